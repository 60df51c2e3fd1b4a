#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nppc/gmm.hpp"
#include "nppc/linalg.hpp"
#include "nppc/models.hpp"

namespace nppc {

/// d×K matrix whose k-th column is σ̂_k·w_k.
Matrix scaled_pc_factor(const NppcOutput& output, std::size_t k = static_cast<std::size_t>(-1));

/// N(x̂, W⋆W⋆ᵀ).
GaussianMoments nppc_gaussian(std::span<const double> xhat, const NppcOutput& output);

/// Gaussian with covariance factor·factorᵀ; a d×0 factor is a point mass.
struct FactoredGaussian {
    Vector mean;
    Matrix factor;
};

enum class ReferenceMode {
    /// Ground-truth covariance truncated to rank K in column K.
    Truncated,
    /// Full ground-truth covariance in every column.
    Full,
};

struct W2Cell {
    double mean = 0.0;
    double sem = 0.0;
    std::size_t n = 0;
    bool poisoned = false;
    std::vector<double> per_point;
};

struct W2Report {
    std::vector<std::string> methods;
    std::vector<std::size_t> ks;
    /// cells[method][k index]
    std::vector<std::vector<W2Cell>> cells;
    std::size_t test_size = 0;
    std::uint64_t seed = 0;
};

/// Maps (test point index, y, K) to the method's Gaussian for that column.
using W2Method = std::function<FactoredGaussian(std::size_t, std::span<const double>, std::size_t)>;
using MomentsFn = std::function<GaussianMoments(std::span<const double>)>;

struct NamedMethod {
    std::string name;
    W2Method build;
};

/// Mean squared W2 distance of every method to the ground-truth Gaussian,
/// per K. Failing cells are marked poisoned rather than aborting the table.
/// Per-point results are summed in sorted order, so cells do not depend on
/// test-set order or thread count.
W2Report w2_table(const MomentsFn& oracle, const std::vector<NamedMethod>& methods,
                  const Matrix& test_ys, const std::vector<std::size_t>& ks,
                  ReferenceMode mode = ReferenceMode::Truncated, std::size_t threads = 1,
                  std::uint64_t seed = 0);

/// Point mass at a per-point mean.
W2Method point_mass_method(std::function<Vector(std::size_t)> mean_of);
/// NPPC Gaussian from precomputed outputs, using the first K directions.
W2Method nppc_method(const Matrix& xhats, const std::vector<NppcOutput>& outputs);

/// ‖e − Σ_k (w_kᵀe) w_k‖ for K×d orthonormal W.
double residual_norm(std::span<const double> e, const Matrix& w);
/// Mean over rows of ‖x − x̂‖.
double rmse(const Matrix& xhat, const Matrix& x);

/// Fraction of error energy outside the top-K subspace, K = 0…K_max, with
/// per-sample directions.
Vector unexplained_curve(const Matrix& errors, const std::vector<Matrix>& per_sample_w);
/// Same with a single shared K_max×d basis.
Vector unexplained_curve(const Matrix& errors, const Matrix& shared_w);

/// Draws m samples for y.
using PosteriorSampler = std::function<Matrix(std::span<const double>, std::size_t, std::mt19937_64&)>;

/// PCA of m posterior samples at y. Throws InsufficientSamples when m ≤ K.
SamplePca sample_pca_baseline(const PosteriorSampler& sampler, std::span<const double> y,
                              std::size_t m, std::size_t k, std::mt19937_64& rng);

/// Angle in degrees between two lines, in [0, 90].
double line_angle_degrees(std::span<const double> a, std::span<const double> b);

/// Runs fn(i) for i in [0, n) across `threads` workers. Callers write results
/// into slot i only, so output is independent of scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Mean of values summed in ascending order, and the standard error.
std::pair<double, double> mean_and_sem(std::vector<double> values);

}  // namespace nppc

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "nppc/linalg.hpp"
#include "nppc/nppc.hpp"

namespace nppc {

struct GaussianMixture {
    Vector weights;
    std::vector<Vector> means;
    std::vector<Matrix> covariances;

    std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
    std::size_t components() const { return weights.size(); }
    /// Weights positive and summing to 1 within 1e-12, covariances symmetric PSD.
    void validate() const;
    friend bool operator==(const GaussianMixture&, const GaussianMixture&) = default;
};

/// Isotropic additive observation noise, y = x + σ·z.
struct NoiseModel {
    double sigma = 1.0;
    friend bool operator==(const NoiseModel&, const NoiseModel&) = default;
};

struct PosteriorComponents {
    Vector responsibilities;
    std::vector<Vector> means;
    std::vector<Matrix> covariances;
};

struct GaussianMoments {
    Vector mean;
    Matrix covariance;
};

/// Exact posterior of a mixture prior under isotropic Gaussian noise.
/// Everything that does not depend on y (the spectra of Σ_ℓ + σ²I, gains,
/// conditioned covariances and their square roots) is computed once here.
class PosteriorOracle {
public:
    PosteriorOracle(GaussianMixture mixture, NoiseModel noise);

    const GaussianMixture& mixture() const { return mixture_; }
    const NoiseModel& noise() const { return noise_; }
    std::size_t dim() const { return mixture_.dim(); }

    PosteriorComponents components(std::span<const double> y) const;
    GaussianMoments moments(std::span<const double> y) const;
    /// m exact draws from p(x|y), one per row.
    Matrix sample(std::span<const double> y, std::size_t m, std::mt19937_64& rng) const;
    /// log p(y) under the marginal y ~ Σ π_ℓ N(μ_ℓ, Σ_ℓ + σ²I).
    double log_evidence(std::span<const double> y) const;

private:
    struct Component {
        Spectrum marginal;        // Σ_ℓ + σ²I in the eigenbasis of Σ_ℓ
        double log_det = 0.0;
        Matrix gain;              // Σ_ℓ(Σ_ℓ + σ²I)⁻¹
        Matrix posterior_cov;     // Σ_ℓ − gain·Σ_ℓ
        Matrix posterior_root;    // symmetric square root of posterior_cov
    };
    Vector log_weighted_likelihoods(std::span<const double> y) const;

    GaussianMixture mixture_;
    NoiseModel noise_;
    std::vector<Component> cache_;
};

PosteriorComponents posterior_components(const GaussianMixture& mix, const NoiseModel& noise,
                                         std::span<const double> y);
GaussianMoments posterior_moments(const GaussianMixture& mix, const NoiseModel& noise,
                                  std::span<const double> y);
Matrix posterior_sample(const GaussianMixture& mix, const NoiseModel& noise,
                        std::span<const double> y, std::size_t m, std::mt19937_64& rng);

/// Draws n pairs: component by weight, x from it, then y = x + σz.
Dataset sample_dataset(const GaussianMixture& mix, const NoiseModel& noise, std::size_t n,
                       std::mt19937_64& rng);

/// Best rank-K PSD approximation Σ_{i≤K} λ_i v_i v_iᵀ.
Matrix rank_k_truncation(const Matrix& cov, std::size_t k);

/// Mixture moments: Σ r_ℓ μ̃_ℓ and Σ r_ℓ[(μ̃_ℓ − μ)(μ̃_ℓ − μ)ᵀ + Σ̃_ℓ].
GaussianMoments mixture_moments(const PosteriorComponents& parts);

/// Canonical 2-D toy: π = (½, ½), μ₁ = −μ₂ = (3, 3), anisotropic covariances, σ = 2.
std::pair<GaussianMixture, NoiseModel> make_toy_2d(std::uint64_t seed);

/// 100-D toy: μ₁ = −μ₂ with ‖μ₁‖ = 25, Σ₁ = Σ₂ = QQᵀ + I with Q 100×12, σ = 10.
/// Q has random orthonormal columns with squared norms log-spaced from 180 to 1.5.
std::pair<GaussianMixture, NoiseModel> make_toy_100d(std::uint64_t seed);

/// Stable log Σ exp(v_i).
double log_sum_exp(std::span<const double> v);

}  // namespace nppc

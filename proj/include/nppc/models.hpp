#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "nppc/autodiff.hpp"
#include "nppc/linalg.hpp"

namespace nppc {

struct MlpConfig {
    std::size_t input_dim = 0;
    std::size_t hidden_width = 256;
    /// Number of affine layers; every layer but the last is followed by a leaky ReLU.
    std::size_t depth = 5;
    double slope = 0.1;
    std::size_t output_dim = 0;

    void validate() const;
    friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

/// A fully connected network whose parameters live in a ParamStore under
/// "<prefix>/layer<i>/weight" (in×out) and "<prefix>/layer<i>/bias" (1×out).
struct Mlp {
    MlpConfig config;
    std::string prefix;

    /// Registers freshly initialized parameters, uniform in ±√(1/fan_in).
    static Mlp create(const MlpConfig& config, std::string prefix, ad::ParamStore& params,
                      std::mt19937_64& rng);
    /// Binds to parameters that already exist in the store.
    static Mlp bind(const MlpConfig& config, std::string prefix, const ad::ParamStore& params);

    std::string weight_name(std::size_t layer) const;
    std::string bias_name(std::size_t layer) const;
};

/// Batched forward pass: input is B×input_dim, result is B×output_dim.
ad::Var mlp_forward(const Mlp& mlp, const ad::ParamStore& params, ad::Var input, ad::Tape& tape);

struct NppcHeadConfig {
    std::size_t k = 1;
    std::size_t dx = 1;
    std::size_t dy = 1;
    bool include_mean_input = true;

    void validate() const;
    std::size_t trunk_input_dim() const { return dy + (include_mean_input ? dx : 0); }
    friend bool operator==(const NppcHeadConfig&, const NppcHeadConfig&) = default;
};

/// Plain-value head output for one sample.
struct NppcOutput {
    Matrix w;          // K×dx, orthonormal rows
    Vector sigma2;     // squared Gram-Schmidt residual norms
    Matrix raw_dirs;   // K×dx, trunk output before orthogonalization
};

/// Tape-level result of the Gram-Schmidt layer for a batch of B samples.
struct GsTapeOutput {
    std::vector<ad::Var> w;        // K entries, each B×dx
    std::vector<ad::Var> sigma2;   // K entries, each B×1
    std::vector<ad::Var> raw;      // K entries, each B×dx
    /// valid(b, k) is 0 once sample b collapsed at some index ≤ k.
    Matrix valid;
    std::size_t degenerate_events = 0;
};

/// Gram-Schmidt with stop-gradient on every previously derived direction.
/// `preceding` holds already-orthonormal directions (B×dx each) that the new
/// ones are orthogonalized against first; they are treated as constants.
GsTapeOutput gram_schmidt_layer(ad::Tape& tape, const std::vector<ad::Var>& raw,
                                const std::vector<ad::Var>& preceding = {});

/// Mean predictor x̂ = f(y).
struct MeanModel {
    Mlp mlp;
    ad::ParamStore params;

    static MeanModel create(const MlpConfig& config, std::uint64_t seed);
};

/// Posterior-PC head w(y, x̂).
struct NppcModel {
    NppcHeadConfig head;
    Mlp trunk;
    ad::ParamStore params;

    static NppcModel create(const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                            std::uint64_t seed);
};

/// Mean predictor and PC head trained together; parameters share one store.
struct JointModel {
    Mlp mean;
    NppcHeadConfig head;
    Mlp trunk;
    ad::ParamStore params;

    static JointModel create(const MlpConfig& mean_shape, const NppcHeadConfig& head,
                             const MlpConfig& trunk_shape, std::uint64_t seed);
};

/// Trunk configuration implied by a head: input and output dims are filled in
/// from the head, width/depth/slope come from `shape`.
MlpConfig trunk_config(const NppcHeadConfig& head, const MlpConfig& shape);

/// Raw directions from the trunk (B×K·dx) split into K blocks of B×dx.
std::vector<ad::Var> split_directions(ad::Var trunk_out, std::size_t k, std::size_t dx);

/// Head forward on a batch; x̂ is fed through as given (callers stop_grad it
/// when it comes from a jointly trained mean).
GsTapeOutput nppc_forward(const NppcHeadConfig& head, const Mlp& trunk,
                          const ad::ParamStore& params, ad::Tape& tape, ad::Var y, ad::Var xhat,
                          const std::vector<ad::Var>& preceding = {});

Vector mean_predict(const MeanModel& model, std::span<const double> y);
/// Rows of `ys` are measurements; returns one x̂ per row.
Matrix mean_predict_batch(const Mlp& mlp, const ad::ParamStore& params, const Matrix& ys);

/// Inference for a batch. Throws DegenerateDirections if any sample collapses.
std::vector<NppcOutput> nppc_predict(const NppcModel& model, const Matrix& ys, const Matrix& xhats);

/// Extracts sample b from a tape output.
NppcOutput gs_output_row(const GsTapeOutput& out, std::size_t b);

/// Copies rows [begin, begin+count) of a matrix.
Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t count);
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx);

}  // namespace nppc

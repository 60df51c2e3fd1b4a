#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "nppc/autodiff.hpp"
#include "nppc/linalg.hpp"
#include "nppc/models.hpp"

namespace nppc {

/// Matched (x, y) pairs, one sample per row.
struct Dataset {
    Matrix x;
    Matrix y;

    std::size_t size() const { return x.rows(); }
};

/// Training triplets for a frozen mean model. The error x − x̂ is derived on
/// demand rather than stored.
struct TripletSet {
    Matrix x;
    Matrix y;
    Matrix xhat;

    std::size_t size() const { return x.rows(); }
    Matrix errors() const { return x - xhat; }
};

struct TrainConfig {
    std::size_t k = 1;
    std::size_t epochs = 60;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    /// First epoch with λ1 active.
    std::size_t ramp_w_epoch = 20;
    /// First epoch with λ2 active.
    std::size_t ramp_sigma_epoch = 40;
    bool normalize_losses = true;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    /// Learning-rate drop on a validation plateau: after more than
    /// `lr_patience` epochs without improvement the rate is multiplied by
    /// `lr_factor`, never going below `min_learning_rate`. 0 disables it.
    std::size_t lr_patience = 0;
    double lr_factor = 0.1;
    double min_learning_rate = 5e-6;

    /// Schedule used when wrapping a frozen mean model.
    static TrainConfig posthoc_defaults();
    void validate() const;
    double lambda1_at(std::size_t epoch) const { return epoch < ramp_w_epoch ? 0.0 : lambda1; }
    double lambda2_at(std::size_t epoch) const { return epoch < ramp_sigma_epoch ? 0.0 : lambda2; }
};

/// Per-epoch record. Terms that were not evaluated in an epoch are NaN.
struct EpochMetrics {
    std::size_t epoch = 0;
    double loss_mu = 0.0;
    double loss_w = 0.0;
    double loss_sigma = 0.0;
    double lambda1_eff = 0.0;
    double lambda2_eff = 0.0;
    std::size_t skipped_zero_error = 0;
    std::size_t degenerate_events = 0;
    double validation_loss = 0.0;
    double learning_rate = 0.0;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

struct TrainReport {
    double initial_validation_loss = 0.0;
    std::vector<EpochMetrics> epochs;
};

// ---------------------------------------------------------------------------
// Losses. Vars are batched: e, x, x̂ are B×dx; returned scalars are batch means.

/// Per-row masks shared by the PC and variance losses. Rows whose error norm
/// is below 1e-12 are dropped when normalizing.
struct ErrorMask {
    Matrix keep;                 // B×1 of 0/1
    std::size_t kept = 0;
    std::size_t skipped = 0;
};
ErrorMask make_error_mask(const Matrix& e, bool normalize);

/// −Σ_k |w_kᵀe|², optionally divided by ‖e‖², averaged over kept rows.
/// Terms at or after a Gram-Schmidt collapse are excluded.
ad::Var loss_pc(const GsTapeOutput& out, ad::Var e, bool normalize, const ErrorMask& mask);
/// Strict variant: throws ZeroError instead of skipping rows.
ad::Var loss_pc(const GsTapeOutput& out, ad::Var e, bool normalize);

/// Single-direction form used by the iterative scheme.
ad::Var loss_pc_first(ad::Var w1, ad::Var e, bool normalize);

/// Σ_k (σ̂_k² − stop_grad(|w_kᵀe|²))², optionally divided by ‖e‖⁴.
ad::Var loss_sigma(const GsTapeOutput& out, ad::Var e, bool normalize, const ErrorMask& mask);
ad::Var loss_sigma(const GsTapeOutput& out, ad::Var e, bool normalize);

/// ‖x − x̂‖² averaged over the batch.
ad::Var loss_mu(ad::Var xhat, ad::Var x);

/// ‖x̂ − x‖² + ‖σ̂² − stop_grad(x̂ − x)²‖², averaged over the batch.
ad::Var loss_per_pixel_var(ad::Var xhat, ad::Var sigma2, ad::Var x);

struct LossBreakdown {
    ad::Var total;
    std::optional<double> loss_mu;
    std::optional<double> loss_w;
    std::optional<double> loss_sigma;
    double lambda1_eff = 0.0;
    double lambda2_eff = 0.0;
    std::size_t skipped_zero_error = 0;
    std::size_t degenerate_events = 0;
};

/// L_μ + λ1·L_w + λ2·L_σ for a joint model with the epoch's scheduled weights.
/// The error and x̂ reach the head through stop_grad.
LossBreakdown loss_all(const JointModel& model, ad::Tape& tape, const Matrix& x, const Matrix& y,
                       std::size_t epoch, const TrainConfig& config);

/// λ1·L_w + λ2·L_σ for a head around a frozen mean.
LossBreakdown loss_posthoc(const NppcModel& model, ad::Tape& tape, const Matrix& x,
                           const Matrix& y, const Matrix& xhat, std::size_t epoch,
                           const TrainConfig& config,
                           const std::vector<ad::Var>& preceding = {});

// ---------------------------------------------------------------------------
// Training

struct MeanTrainResult {
    MeanModel model;
    TrainReport report;
};
MeanTrainResult train_mean(const Dataset& data, const MlpConfig& shape, const TrainConfig& config,
                           const MetricsSink& sink = {});

struct PosthocTrainResult {
    NppcModel model;
    TrainReport report;
};
PosthocTrainResult train_posthoc(const TripletSet& data, const NppcHeadConfig& head,
                                 const MlpConfig& trunk_shape, const TrainConfig& config,
                                 const MetricsSink& sink = {});

struct JointTrainResult {
    JointModel model;
    TrainReport report;
};
JointTrainResult train_joint(const Dataset& data, const MlpConfig& mean_shape,
                             const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                             const TrainConfig& config, const MetricsSink& sink = {});

struct IterativeTrainResult {
    std::vector<NppcModel> models;   // one single-direction head per PC
    std::vector<TrainReport> reports;
};

/// Trains `upto_k` single-direction heads in order; head k is orthogonalized
/// against the frozen outputs of heads 1…k−1. Each head minimizes
/// λ1·L_w1 + λ2·L_σ over its own direction, so head 1 follows exactly the
/// trajectory of train_posthoc with K = 1.
IterativeTrainResult train_iterative(const TripletSet& data, const NppcHeadConfig& head,
                                     const MlpConfig& trunk_shape, const TrainConfig& config,
                                     std::size_t upto_k, const MetricsSink& sink = {});

/// Continues an iterative run: trains one more head on top of `frozen`.
NppcModel train_next_iterative(const TripletSet& data, const std::vector<NppcModel>& frozen,
                               const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                               const TrainConfig& config, TrainReport* report = nullptr,
                               const MetricsSink& sink = {});

/// Chains single-direction heads into one K-direction output per row.
std::vector<NppcOutput> iterative_predict(const std::vector<NppcModel>& models, const Matrix& ys,
                                          const Matrix& xhats);

/// Seed used for the k-th (1-based) head of an iterative run.
std::uint64_t iterative_seed(std::uint64_t base, std::size_t k);

}  // namespace nppc

#include "nppc/nppc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "nppc/errors.hpp"

namespace nppc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kFinalEpoch = std::numeric_limits<std::size_t>::max();

Matrix column(const Matrix& m, std::size_t c) {
    Matrix out(m.rows(), 1);
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, 0) = m(r, c);
    return out;
}

bool all_ones(const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 1.0; });
}

// ‖e‖² per row, with skipped rows bumped to 1 so divisions stay finite.
ad::Var safe_error_norm2(ad::Tape& tape, ad::Var e, const ErrorMask& mask) {
    ad::Var ne2 = ad::squared_norm(e);
    if (mask.skipped == 0) return ne2;
    Matrix fix(mask.keep.rows(), 1);
    for (std::size_t r = 0; r < fix.rows(); ++r) fix(r, 0) = mask.keep(r, 0) == 0.0 ? 1.0 : 0.0;
    return ad::add(ne2, tape.constant(std::move(fix)));
}

// Batch mean over kept rows of a B×1 per-sample loss.
ad::Var masked_mean(ad::Tape& tape, ad::Var per_sample, const ErrorMask& mask) {
    if (mask.kept == 0) return tape.constant(Matrix(1, 1, 0.0));
    ad::Var v = per_sample;
    if (mask.skipped != 0) v = ad::mul(v, tape.constant(mask.keep));
    return ad::scale(ad::sum(v), 1.0 / static_cast<double>(mask.kept));
}

void check_error_shape(const GsTapeOutput& out, ad::Var e) {
    if (out.w.empty()) throw ShapeMismatch("loss: head output has no directions");
    if (e.rows() != out.w.front().rows() || e.cols() != out.w.front().cols()) {
        throw ShapeMismatch("loss: error shape does not match directions");
    }
}

ErrorMask strict_mask(ad::Var e, bool normalize) {
    ErrorMask mask = make_error_mask(e.value(), normalize);
    if (mask.skipped != 0) {
        throw ZeroError("normalized loss with ‖e‖ < 1e-12 on " + std::to_string(mask.skipped) +
                        " sample(s)");
    }
    return mask;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TrainConfig TrainConfig::posthoc_defaults() {
    TrainConfig c;
    c.ramp_w_epoch = 0;
    c.ramp_sigma_epoch = 20;
    c.epochs = 40;
    return c;
}

void TrainConfig::validate() const {
    if (k == 0) throw InvalidConfig("TrainConfig: K must be positive");
    if (batch_size == 0) throw InvalidConfig("TrainConfig: batch_size must be positive");
    if (!(ramp_w_epoch <= ramp_sigma_epoch && ramp_sigma_epoch <= epochs)) {
        throw InvalidConfig("TrainConfig: need 0 <= T1 <= T2 <= epochs (T1=" +
                            std::to_string(ramp_w_epoch) + ", T2=" +
                            std::to_string(ramp_sigma_epoch) + ", epochs=" +
                            std::to_string(epochs) + ")");
    }
    if (lambda1 < 0.0 || lambda2 < 0.0) throw InvalidConfig("TrainConfig: λ must be non-negative");
    if (!(learning_rate > 0.0)) throw InvalidConfig("TrainConfig: learning rate must be positive");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw InvalidConfig("TrainConfig: validation_fraction must be in [0, 1)");
    }
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw InvalidConfig("TrainConfig: lr_factor must be in (0, 1]");
    if (lr_patience > 0 && validation_fraction == 0.0) {
        throw InvalidConfig("TrainConfig: the plateau scheduler needs a validation split");
    }
}

// ---------------------------------------------------------------------------
// Losses

ErrorMask make_error_mask(const Matrix& e, bool normalize) {
    ErrorMask mask{Matrix(e.rows(), 1, 1.0), e.rows(), 0};
    if (!normalize) return mask;
    for (std::size_t r = 0; r < e.rows(); ++r) {
        if (norm(e.row(r)) < 1e-12) {
            mask.keep(r, 0) = 0.0;
            --mask.kept;
            ++mask.skipped;
        }
    }
    return mask;
}

ad::Var loss_pc(const GsTapeOutput& out, ad::Var e, bool normalize, const ErrorMask& mask) {
    check_error_shape(out, e);
    ad::Tape& tape = *e.tape;
    std::optional<ad::Var> captured;
    for (std::size_t k = 0; k < out.w.size(); ++k) {
        const ad::Var proj = ad::dot(out.w[k], e);
        ad::Var term = ad::mul(proj, proj);
        const Matrix valid = column(out.valid, k);
        if (!all_ones(valid)) term = ad::mul(term, tape.constant(valid));
        captured = captured ? ad::add(*captured, term) : term;
    }
    ad::Var per_sample = *captured;
    if (normalize) per_sample = ad::divide_by_scalar(per_sample, safe_error_norm2(tape, e, mask));
    return masked_mean(tape, ad::scale(per_sample, -1.0), mask);
}

ad::Var loss_pc(const GsTapeOutput& out, ad::Var e, bool normalize) {
    return loss_pc(out, e, normalize, strict_mask(e, normalize));
}

ad::Var loss_pc_first(ad::Var w1, ad::Var e, bool normalize) {
    GsTapeOutput single;
    single.w = {w1};
    single.valid = Matrix(w1.rows(), 1, 1.0);
    return loss_pc(single, e, normalize);
}

ad::Var loss_sigma(const GsTapeOutput& out, ad::Var e, bool normalize, const ErrorMask& mask) {
    check_error_shape(out, e);
    if (out.sigma2.size() != out.w.size()) throw ShapeMismatch("loss_sigma: missing variances");
    ad::Tape& tape = *e.tape;
    std::optional<ad::Var> total;
    for (std::size_t k = 0; k < out.w.size(); ++k) {
        const ad::Var proj = ad::dot(out.w[k], e);
        const ad::Var target = ad::stop_grad(ad::mul(proj, proj));
        const ad::Var diff = ad::sub(out.sigma2[k], target);
        ad::Var term = ad::mul(diff, diff);
        const Matrix valid = column(out.valid, k);
        if (!all_ones(valid)) term = ad::mul(term, tape.constant(valid));
        total = total ? ad::add(*total, term) : term;
    }
    ad::Var per_sample = *total;
    if (normalize) {
        const ad::Var ne2 = safe_error_norm2(tape, e, mask);
        per_sample = ad::divide_by_scalar(per_sample, ad::mul(ne2, ne2));
    }
    return masked_mean(tape, per_sample, mask);
}

ad::Var loss_sigma(const GsTapeOutput& out, ad::Var e, bool normalize) {
    return loss_sigma(out, e, normalize, strict_mask(e, normalize));
}

ad::Var loss_mu(ad::Var xhat, ad::Var x) {
    const ad::Var per_sample = ad::squared_norm(ad::sub(x, xhat));
    return ad::scale(ad::sum(per_sample), 1.0 / static_cast<double>(per_sample.rows()));
}

ad::Var loss_per_pixel_var(ad::Var xhat, ad::Var sigma2, ad::Var x) {
    if (sigma2.rows() != x.rows() || sigma2.cols() != x.cols()) {
        throw ShapeMismatch("loss_per_pixel_var: variance map shape differs from x");
    }
    const ad::Var diff = ad::sub(xhat, x);
    const ad::Var frozen = ad::stop_grad(diff);
    const ad::Var mismatch = ad::sub(sigma2, ad::mul(frozen, frozen));
    const ad::Var per_sample = ad::add(ad::squared_norm(diff), ad::squared_norm(mismatch));
    return ad::scale(ad::sum(per_sample), 1.0 / static_cast<double>(per_sample.rows()));
}

namespace {

void add_pc_terms(LossBreakdown& lb, ad::Tape& tape, const GsTapeOutput& out, ad::Var e,
                  const TrainConfig& config) {
    const ErrorMask mask = make_error_mask(e.value(), config.normalize_losses);
    lb.skipped_zero_error = mask.skipped;
    lb.degenerate_events = out.degenerate_events;
    if (lb.lambda1_eff > 0.0) {
        const ad::Var lw = loss_pc(out, e, config.normalize_losses, mask);
        lb.loss_w = lw.scalar();
        lb.total = ad::add(lb.total, ad::scale(lw, lb.lambda1_eff));
    }
    if (lb.lambda2_eff > 0.0) {
        const ad::Var ls = loss_sigma(out, e, config.normalize_losses, mask);
        lb.loss_sigma = ls.scalar();
        lb.total = ad::add(lb.total, ad::scale(ls, lb.lambda2_eff));
    }
    (void)tape;
}

}  // namespace

LossBreakdown loss_all(const JointModel& model, ad::Tape& tape, const Matrix& x, const Matrix& y,
                       std::size_t epoch, const TrainConfig& config) {
    LossBreakdown lb;
    lb.lambda1_eff = config.lambda1_at(epoch);
    lb.lambda2_eff = config.lambda2_at(epoch);

    const ad::Var yv = tape.constant(y);
    const ad::Var xv = tape.constant(x);
    const ad::Var xhat = mlp_forward(model.mean, model.params, yv, tape);
    const ad::Var lmu = loss_mu(xhat, xv);
    lb.loss_mu = lmu.scalar();
    lb.total = lmu;
    if (lb.lambda1_eff == 0.0 && lb.lambda2_eff == 0.0) return lb;

    const ad::Var e = ad::stop_grad(ad::sub(xv, xhat));
    const ad::Var head_mean = ad::stop_grad(xhat);
    const GsTapeOutput out = nppc_forward(model.head, model.trunk, model.params, tape, yv, head_mean);
    add_pc_terms(lb, tape, out, e, config);
    return lb;
}

LossBreakdown loss_posthoc(const NppcModel& model, ad::Tape& tape, const Matrix& x,
                           const Matrix& y, const Matrix& xhat, std::size_t epoch,
                           const TrainConfig& config, const std::vector<ad::Var>& preceding) {
    LossBreakdown lb;
    lb.lambda1_eff = config.lambda1_at(epoch);
    lb.lambda2_eff = config.lambda2_at(epoch);
    lb.total = tape.constant(Matrix(1, 1, 0.0));
    const ad::Var e = tape.constant(x - xhat);
    const GsTapeOutput out = nppc_forward(model.head, model.trunk, model.params, tape,
                                          tape.constant(y), tape.constant(xhat), preceding);
    add_pc_terms(lb, tape, out, e, config);
    return lb;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

// Builds a loss for the rows in `idx` (or the validation rows) at `epoch`.
using StepFn = std::function<LossBreakdown(ad::Tape&, std::span<const std::size_t>, std::size_t)>;

struct Split {
    std::size_t train = 0;
    std::size_t validation = 0;
};

Split split_for(std::size_t n, const TrainConfig& config) {
    if (n == 0) throw InvalidConfig("training: empty dataset");
    const auto val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(n)));
    if (val >= n) throw InvalidConfig("training: validation split leaves no training rows");
    return {n - val, val};
}

struct Running {
    double sum = 0.0;
    double weight = 0.0;
    void add(const std::optional<double>& v, double w) {
        if (!v) return;
        sum += *v * w;
        weight += w;
    }
    double mean() const { return weight > 0.0 ? sum / weight : kNaN; }
};

double validation_loss(const StepFn& step, const Split& split) {
    if (split.validation == 0) return kNaN;
    constexpr std::size_t chunk = 4096;
    std::vector<std::size_t> idx(split.validation);
    std::iota(idx.begin(), idx.end(), split.train);
    double total = 0.0;
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::size_t n = std::min(chunk, idx.size() - start);
        ad::Tape tape;
        const LossBreakdown lb = step(tape, std::span(idx).subspan(start, n), kFinalEpoch);
        total += lb.total.scalar() * static_cast<double>(n);
    }
    return total / static_cast<double>(split.validation);
}

TrainReport run_training(std::size_t n, const TrainConfig& config, ad::ParamStore& params,
                         const StepFn& step, const MetricsSink& sink) {
    config.validate();
    const Split split = split_for(n, config);
    ad::AdamState adam = ad::AdamState::for_params(params, config.learning_rate);
    std::mt19937_64 shuffle_rng(config.seed ^ 0x5deece66dULL);
    std::vector<std::size_t> order(split.train);
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainReport report;
    report.initial_validation_loss = validation_loss(step, split);
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        Running mu, w, sigma;
        EpochMetrics m;
        m.epoch = epoch;
        m.lambda1_eff = config.lambda1_at(epoch);
        m.lambda2_eff = config.lambda2_at(epoch);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, order.size() - start);
            const auto idx = std::span<const std::size_t>(order).subspan(start, count);
            ad::Tape tape;
            const LossBreakdown lb = step(tape, idx, epoch);
            const double value = lb.total.scalar();
            if (!std::isfinite(value)) {
                throw NumericFailure("training diverged: non-finite loss at epoch " +
                                     std::to_string(epoch));
            }
            const ad::Gradients grads = tape.backward(lb.total, params);
            ad::adam_step(adam, params, grads);
            const auto weight = static_cast<double>(count);
            mu.add(lb.loss_mu, weight);
            w.add(lb.loss_w, weight);
            sigma.add(lb.loss_sigma, weight);
            m.skipped_zero_error += lb.skipped_zero_error;
            m.degenerate_events += lb.degenerate_events;
        }
        m.loss_mu = mu.mean();
        m.loss_w = w.mean();
        m.loss_sigma = sigma.mean();
        m.validation_loss = validation_loss(step, split);
        m.learning_rate = adam.learning_rate;
        // Only once every term is switched on; earlier validation losses are
        // dominated by untrained terms.
        if (config.lr_patience > 0 && epoch >= config.ramp_sigma_epoch && std::isfinite(m.validation_loss)) {
            // Relative threshold of 1e-4, as in the usual plateau scheduler.
            if (m.validation_loss < best - 1e-4 * std::abs(best)) {
                best = m.validation_loss;
                bad_epochs = 0;
            } else if (++bad_epochs > config.lr_patience) {
                adam.learning_rate = std::max(adam.learning_rate * config.lr_factor, config.min_learning_rate);
                bad_epochs = 0;
            }
        }
        report.epochs.push_back(m);
        if (sink) sink(m);
    }
    return report;
}

// Plain-value directions of the frozen heads, one B×dx tensor per head.
std::vector<Matrix> frozen_directions(const std::vector<NppcModel>& models, const Matrix& ys,
                                      const Matrix& xhats) {
    std::vector<Matrix> dirs;
    for (const NppcModel& m : models) {
        ad::Tape tape;
        std::vector<ad::Var> preceding;
        for (const Matrix& d : dirs) preceding.push_back(tape.constant(d));
        const GsTapeOutput out = nppc_forward(m.head, m.trunk, m.params, tape, tape.constant(ys),
                                              tape.constant(xhats), preceding);
        dirs.push_back(out.w.front().value());
    }
    return dirs;
}

}  // namespace

MeanTrainResult train_mean(const Dataset& data, const MlpConfig& shape, const TrainConfig& config,
                           const MetricsSink& sink) {
    MlpConfig c = shape;
    c.input_dim = data.y.cols();
    c.output_dim = data.x.cols();
    MeanTrainResult result{MeanModel::create(c, config.seed), {}};
    MeanModel& model = result.model;
    const StepFn step = [&](ad::Tape& tape, std::span<const std::size_t> idx, std::size_t) {
        LossBreakdown lb;
        const ad::Var xhat = mlp_forward(model.mlp, model.params,
                                         tape.constant(gather_rows(data.y, idx)), tape);
        lb.total = loss_mu(xhat, tape.constant(gather_rows(data.x, idx)));
        lb.loss_mu = lb.total.scalar();
        return lb;
    };
    result.report = run_training(data.size(), config, model.params, step, sink);
    return result;
}

PosthocTrainResult train_posthoc(const TripletSet& data, const NppcHeadConfig& head,
                                 const MlpConfig& trunk_shape, const TrainConfig& config,
                                 const MetricsSink& sink) {
    NppcHeadConfig h = head;
    h.k = config.k;
    h.dx = data.x.cols();
    h.dy = data.y.cols();
    PosthocTrainResult result{NppcModel::create(h, trunk_shape, config.seed), {}};
    NppcModel& model = result.model;
    const StepFn step = [&](ad::Tape& tape, std::span<const std::size_t> idx, std::size_t epoch) {
        return loss_posthoc(model, tape, gather_rows(data.x, idx), gather_rows(data.y, idx),
                            gather_rows(data.xhat, idx), epoch, config);
    };
    result.report = run_training(data.size(), config, model.params, step, sink);
    return result;
}

JointTrainResult train_joint(const Dataset& data, const MlpConfig& mean_shape,
                             const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                             const TrainConfig& config, const MetricsSink& sink) {
    MlpConfig mean_cfg = mean_shape;
    mean_cfg.input_dim = data.y.cols();
    mean_cfg.output_dim = data.x.cols();
    NppcHeadConfig h = head;
    h.k = config.k;
    h.dx = data.x.cols();
    h.dy = data.y.cols();
    JointTrainResult result{JointModel::create(mean_cfg, h, trunk_shape, config.seed), {}};
    JointModel& model = result.model;
    const StepFn step = [&](ad::Tape& tape, std::span<const std::size_t> idx, std::size_t epoch) {
        return loss_all(model, tape, gather_rows(data.x, idx), gather_rows(data.y, idx), epoch, config);
    };
    result.report = run_training(data.size(), config, model.params, step, sink);
    return result;
}

std::uint64_t iterative_seed(std::uint64_t base, std::size_t k) {
    return k <= 1 ? base : base + 0x632be59bd9b4e019ULL * static_cast<std::uint64_t>(k - 1);
}

NppcModel train_next_iterative(const TripletSet& data, const std::vector<NppcModel>& frozen,
                               const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                               const TrainConfig& config, TrainReport* report,
                               const MetricsSink& sink) {
    NppcHeadConfig h = head;
    h.k = 1;
    h.dx = data.x.cols();
    h.dy = data.y.cols();
    if (frozen.size() + 1 > h.dx) {
        throw InvalidConfig("train_iterative: cannot learn more directions than dx");
    }
    TrainConfig c = config;
    c.k = 1;
    NppcModel model = NppcModel::create(h, trunk_shape, iterative_seed(config.seed, frozen.size() + 1));
    const StepFn step = [&](ad::Tape& tape, std::span<const std::size_t> idx, std::size_t epoch) {
        const Matrix ys = gather_rows(data.y, idx);
        const Matrix xh = gather_rows(data.xhat, idx);
        std::vector<ad::Var> preceding;
        for (Matrix& d : frozen_directions(frozen, ys, xh)) preceding.push_back(tape.constant(std::move(d)));
        return loss_posthoc(model, tape, gather_rows(data.x, idx), ys, xh, epoch, c, preceding);
    };
    TrainReport r = run_training(data.size(), c, model.params, step, sink);
    if (report != nullptr) *report = std::move(r);
    return model;
}

IterativeTrainResult train_iterative(const TripletSet& data, const NppcHeadConfig& head,
                                     const MlpConfig& trunk_shape, const TrainConfig& config,
                                     std::size_t upto_k, const MetricsSink& sink) {
    if (upto_k == 0 || upto_k > data.x.cols()) {
        throw InvalidConfig("train_iterative: need 1 <= upto_k <= dx");
    }
    IterativeTrainResult result;
    for (std::size_t k = 0; k < upto_k; ++k) {
        TrainReport report;
        NppcModel next = train_next_iterative(data, result.models, head, trunk_shape, config, &report, sink);
        result.models.push_back(std::move(next));
        result.reports.push_back(std::move(report));
    }
    return result;
}

std::vector<NppcOutput> iterative_predict(const std::vector<NppcModel>& models, const Matrix& ys,
                                          const Matrix& xhats) {
    if (models.empty()) throw InvalidConfig("iterative_predict: no models");
    const std::size_t n = ys.rows();
    const std::size_t dx = xhats.cols();
    const std::size_t k_count = models.size();
    std::vector<NppcOutput> outputs(n, NppcOutput{Matrix(k_count, dx), Vector(k_count), Matrix(k_count, dx)});
    constexpr std::size_t chunk = 2048;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        const Matrix yb = take_rows(ys, start, count);
        const Matrix xb = take_rows(xhats, start, count);
        std::vector<Matrix> dirs;
        for (std::size_t k = 0; k < k_count; ++k) {
            const NppcModel& m = models[k];
            ad::Tape tape;
            std::vector<ad::Var> preceding;
            for (const Matrix& d : dirs) preceding.push_back(tape.constant(d));
            const GsTapeOutput out = nppc_forward(m.head, m.trunk, m.params, tape, tape.constant(yb),
                                                  tape.constant(xb), preceding);
            if (out.degenerate_events != 0) {
                throw DegenerateDirections("iterative_predict: head " + std::to_string(k + 1) +
                                           " collapsed");
            }
            for (std::size_t r = 0; r < count; ++r) {
                NppcOutput& o = outputs[start + r];
                const auto w = out.w.front().value().row(r);
                const auto d = out.raw.front().value().row(r);
                std::copy(w.begin(), w.end(), o.w.row(k).begin());
                std::copy(d.begin(), d.end(), o.raw_dirs.row(k).begin());
                o.sigma2[k] = out.sigma2.front().value()(r, 0);
            }
            dirs.push_back(out.w.front().value());
        }
    }
    return outputs;
}

}  // namespace nppc

#include "nppc/models.hpp"

#include <cmath>
#include <string>

#include "nppc/errors.hpp"

namespace nppc {

void MlpConfig::validate() const {
    if (depth < 2) throw InvalidConfig("MlpConfig: depth must be at least 2");
    if (input_dim == 0 || output_dim == 0 || hidden_width == 0) {
        throw InvalidConfig("MlpConfig: widths must be positive");
    }
}

std::string Mlp::weight_name(std::size_t layer) const {
    return prefix + "/layer" + std::to_string(layer) + "/weight";
}

std::string Mlp::bias_name(std::size_t layer) const {
    return prefix + "/layer" + std::to_string(layer) + "/bias";
}

namespace {

std::size_t layer_in(const MlpConfig& c, std::size_t layer) {
    return layer == 0 ? c.input_dim : c.hidden_width;
}

std::size_t layer_out(const MlpConfig& c, std::size_t layer) {
    return layer + 1 == c.depth ? c.output_dim : c.hidden_width;
}

}  // namespace

Mlp Mlp::create(const MlpConfig& config, std::string prefix, ad::ParamStore& params,
                std::mt19937_64& rng) {
    config.validate();
    Mlp mlp{config, std::move(prefix)};
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::size_t in = layer_in(config, l);
        const std::size_t out = layer_out(config, l);
        const double bound = std::sqrt(1.0 / static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Matrix w(in, out);
        for (double& v : w.data()) v = dist(rng);
        Matrix b(1, out);
        for (double& v : b.data()) v = dist(rng);
        params.add(mlp.weight_name(l), std::move(w));
        params.add(mlp.bias_name(l), std::move(b));
    }
    return mlp;
}

Mlp Mlp::bind(const MlpConfig& config, std::string prefix, const ad::ParamStore& params) {
    config.validate();
    Mlp mlp{config, std::move(prefix)};
    for (std::size_t l = 0; l < config.depth; ++l) {
        const Matrix& w = params.value(params.index(mlp.weight_name(l)));
        const Matrix& b = params.value(params.index(mlp.bias_name(l)));
        if (w.rows() != layer_in(config, l) || w.cols() != layer_out(config, l) || b.rows() != 1 ||
            b.cols() != layer_out(config, l)) {
            throw ShapeMismatch("Mlp::bind: parameter shapes do not match config for layer " +
                                std::to_string(l));
        }
    }
    return mlp;
}

ad::Var mlp_forward(const Mlp& mlp, const ad::ParamStore& params, ad::Var input, ad::Tape& tape) {
    if (input.cols() != mlp.config.input_dim) {
        throw ShapeMismatch("mlp_forward: input has " + std::to_string(input.cols()) +
                            " features, expected " + std::to_string(mlp.config.input_dim));
    }
    ad::Var h = input;
    for (std::size_t l = 0; l < mlp.config.depth; ++l) {
        const ad::Var w = tape.param(params, mlp.weight_name(l));
        const ad::Var b = tape.param(params, mlp.bias_name(l));
        h = ad::add_bias(ad::matmul(h, w), b);
        if (l + 1 < mlp.config.depth) h = ad::leaky_relu(h, mlp.config.slope);
    }
    return h;
}

void NppcHeadConfig::validate() const {
    if (k < 1 || k > dx) {
        throw InvalidConfig("NppcHeadConfig: need 1 <= K <= dx, got K=" + std::to_string(k) +
                            " dx=" + std::to_string(dx));
    }
    if (dy == 0) throw InvalidConfig("NppcHeadConfig: dy must be positive");
}

MlpConfig trunk_config(const NppcHeadConfig& head, const MlpConfig& shape) {
    MlpConfig c = shape;
    c.input_dim = head.trunk_input_dim();
    c.output_dim = head.k * head.dx;
    return c;
}

GsTapeOutput gram_schmidt_layer(ad::Tape& tape, const std::vector<ad::Var>& raw,
                                const std::vector<ad::Var>& preceding) {
    GsTapeOutput out;
    if (raw.empty()) return out;
    const std::size_t batch = raw.front().rows();
    const std::size_t k_count = raw.size();
    out.valid = Matrix(batch, k_count, 1.0);
    out.raw = raw;

    std::vector<ad::Var> frozen;
    frozen.reserve(preceding.size() + k_count);
    for (const ad::Var& p : preceding) frozen.push_back(ad::stop_grad(p));

    for (std::size_t k = 0; k < k_count; ++k) {
        const ad::Var dk = raw[k];
        ad::Var residual = dk;
        for (const ad::Var& wl : frozen) {
            const ad::Var coeff = ad::dot(dk, wl);
            residual = ad::sub(residual, ad::multiply_by_scalar(wl, coeff));
        }
        const ad::Var sq = ad::squared_norm(residual);
        const ad::Var dnorm2 = ad::squared_norm(dk);

        // Collapsed rows get a unit offset on the norm so the division stays finite;
        // their terms are masked out downstream.
        Matrix fix(batch, 1, 0.0);
        bool any_collapsed = false;
        for (std::size_t b = 0; b < batch; ++b) {
            const double r2 = sq.value()(b, 0);
            const double d2 = dnorm2.value()(b, 0);
            const bool collapsed = !(std::sqrt(r2) >= 1e-12 * std::sqrt(d2)) || d2 == 0.0;
            if (collapsed) {
                if (out.valid(b, k) != 0.0) ++out.degenerate_events;
                for (std::size_t j = k; j < k_count; ++j) out.valid(b, j) = 0.0;
                fix(b, 0) = 1.0;
                any_collapsed = true;
            }
        }
        ad::Var rnorm = ad::sqrt(sq);
        if (any_collapsed) rnorm = ad::add(rnorm, tape.constant(std::move(fix)));
        const ad::Var wk = ad::divide_by_scalar(residual, rnorm);
        out.w.push_back(wk);
        out.sigma2.push_back(sq);
        frozen.push_back(ad::stop_grad(wk));
    }
    return out;
}

std::vector<ad::Var> split_directions(ad::Var trunk_out, std::size_t k, std::size_t dx) {
    if (trunk_out.cols() != k * dx) {
        throw ShapeMismatch("split_directions: trunk emits " + std::to_string(trunk_out.cols()) +
                            " values, expected K*dx = " + std::to_string(k * dx));
    }
    std::vector<ad::Var> dirs;
    dirs.reserve(k);
    for (std::size_t i = 0; i < k; ++i) dirs.push_back(ad::slice_cols(trunk_out, i * dx, dx));
    return dirs;
}

GsTapeOutput nppc_forward(const NppcHeadConfig& head, const Mlp& trunk,
                          const ad::ParamStore& params, ad::Tape& tape, ad::Var y, ad::Var xhat,
                          const std::vector<ad::Var>& preceding) {
    if (y.cols() != head.dy || xhat.cols() != head.dx || y.rows() != xhat.rows()) {
        throw ShapeMismatch("nppc_forward: y/x_hat shapes do not match head config");
    }
    const ad::Var input = head.include_mean_input ? ad::concat(y, xhat) : y;
    const ad::Var raw = mlp_forward(trunk, params, input, tape);
    return gram_schmidt_layer(tape, split_directions(raw, head.k, head.dx), preceding);
}

MeanModel MeanModel::create(const MlpConfig& config, std::uint64_t seed) {
    MeanModel m;
    std::mt19937_64 rng(seed);
    m.mlp = Mlp::create(config, "mean", m.params, rng);
    return m;
}

NppcModel NppcModel::create(const NppcHeadConfig& head, const MlpConfig& trunk_shape,
                            std::uint64_t seed) {
    head.validate();
    NppcModel m;
    m.head = head;
    std::mt19937_64 rng(seed);
    m.trunk = Mlp::create(trunk_config(head, trunk_shape), "head", m.params, rng);
    return m;
}

JointModel JointModel::create(const MlpConfig& mean_shape, const NppcHeadConfig& head,
                              const MlpConfig& trunk_shape, std::uint64_t seed) {
    head.validate();
    JointModel m;
    m.head = head;
    // Separate streams so the mean network initializes exactly like a
    // stand-alone MeanModel with the same seed.
    std::mt19937_64 mean_rng(seed);
    m.mean = Mlp::create(mean_shape, "mean", m.params, mean_rng);
    std::mt19937_64 head_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    m.trunk = Mlp::create(trunk_config(head, trunk_shape), "head", m.params, head_rng);
    return m;
}

Matrix mean_predict_batch(const Mlp& mlp, const ad::ParamStore& params, const Matrix& ys) {
    constexpr std::size_t chunk = 2048;
    Matrix out(ys.rows(), mlp.config.output_dim);
    for (std::size_t start = 0; start < ys.rows(); start += chunk) {
        const std::size_t n = std::min(chunk, ys.rows() - start);
        ad::Tape tape;
        const ad::Var pred = mlp_forward(mlp, params, tape.constant(take_rows(ys, start, n)), tape);
        for (std::size_t r = 0; r < n; ++r) {
            std::copy(pred.value().row(r).begin(), pred.value().row(r).end(),
                      out.row(start + r).begin());
        }
    }
    return out;
}

Vector mean_predict(const MeanModel& model, std::span<const double> y) {
    Matrix ys(1, y.size(), Vector(y.begin(), y.end()));
    return mean_predict_batch(model.mlp, model.params, ys).row_vector(0);
}

NppcOutput gs_output_row(const GsTapeOutput& out, std::size_t b) {
    const std::size_t k_count = out.w.size();
    const std::size_t dx = k_count == 0 ? 0 : out.w.front().cols();
    NppcOutput row{Matrix(k_count, dx), Vector(k_count), Matrix(k_count, dx)};
    for (std::size_t k = 0; k < k_count; ++k) {
        const auto w = out.w[k].value().row(b);
        const auto d = out.raw[k].value().row(b);
        std::copy(w.begin(), w.end(), row.w.row(k).begin());
        std::copy(d.begin(), d.end(), row.raw_dirs.row(k).begin());
        row.sigma2[k] = out.sigma2[k].value()(b, 0);
    }
    return row;
}

std::vector<NppcOutput> nppc_predict(const NppcModel& model, const Matrix& ys, const Matrix& xhats) {
    if (ys.rows() != xhats.rows()) throw ShapeMismatch("nppc_predict: row count mismatch");
    constexpr std::size_t chunk = 2048;
    std::vector<NppcOutput> outputs;
    outputs.reserve(ys.rows());
    for (std::size_t start = 0; start < ys.rows(); start += chunk) {
        const std::size_t n = std::min(chunk, ys.rows() - start);
        ad::Tape tape;
        const GsTapeOutput out =
            nppc_forward(model.head, model.trunk, model.params, tape,
                         tape.constant(take_rows(ys, start, n)),
                         tape.constant(take_rows(xhats, start, n)));
        if (out.degenerate_events != 0) {
            throw DegenerateDirections("nppc_predict: Gram-Schmidt collapsed on " +
                                       std::to_string(out.degenerate_events) + " sample(s)");
        }
        for (std::size_t r = 0; r < n; ++r) outputs.push_back(gs_output_row(out, r));
    }
    return outputs;
}

Matrix take_rows(const Matrix& m, std::size_t begin, std::size_t count) {
    Matrix out(count, m.cols());
    std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
              m.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * m.cols()),
              out.data().begin());
    return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto src = m.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

}  // namespace nppc

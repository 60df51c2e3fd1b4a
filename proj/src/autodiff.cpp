#include "nppc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include <Eigen/Core>

#include "nppc/errors.hpp"

namespace nppc::ad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

MapC view(const Tensor& t) {
    return MapC(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

Map view(Tensor& t) {
    return Map(t.data().data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}

// Eigen picks its vectorized traversal from the buffer address, so products on
// maps over std::vector storage can round differently from run to run. Owned
// Eigen matrices are always maximally aligned, which pins the summation order.
RowMajor owned(const Tensor& t) { return view(t); }

Tensor to_tensor(const RowMajor& m) {
    Tensor out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    std::copy(m.data(), m.data() + m.size(), out.data().begin());
    return out;
}

std::string shape(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeMismatch(std::string(op) + ": " + shape(a) + " vs " + shape(b));
    }
}

void require_row_scalars(const char* op, const Tensor& a, const Tensor& s) {
    if (s.cols() != 1 || s.rows() != a.rows()) {
        throw ShapeMismatch(std::string(op) + ": per-row scalars " + shape(s) + " for " + shape(a));
    }
}

void accumulate(Tensor& slot, const Tensor& g) {
    if (slot.size() == 0 && g.size() != 0) {
        slot = g;
        return;
    }
    for (std::size_t i = 0; i < slot.size(); ++i) slot.data()[i] += g.data()[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(std::string name, Tensor init) {
    if (lookup_.contains(name)) throw InvalidConfig("ParamStore: duplicate parameter '" + name + "'");
    const std::size_t idx = values_.size();
    lookup_.emplace(name, idx);
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return idx;
}

std::size_t ParamStore::index(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end()) throw InvalidConfig("ParamStore: unknown parameter '" + std::string(name) + "'");
    return it->second;
}

bool ParamStore::contains(std::string_view name) const {
    return lookup_.contains(std::string(name));
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

Gradients zero_gradients(const ParamStore& params) {
    Gradients g;
    g.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        g.emplace_back(params.value(i).rows(), params.value(i).cols());
    }
    return g;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(id); }

struct Recorder {
    static Var push(Tape& tape, OpKind op, std::initializer_list<Var> inputs, Tensor value,
                    double scalar = 0.0, std::size_t aux = 0) {
        Tape::Node node{op, {0, 0}, inputs.size(), std::move(value), scalar, aux};
        std::size_t i = 0;
        for (const Var& v : inputs) {
            tape.check_owned(v);
            node.inputs[i++] = v.id;
        }
        return tape.push(std::move(node));
    }

    static Tape& tape_of(Var a) { return *a.tape; }

    static Tape& common_tape(Var a, Var b) {
        if (a.tape != b.tape || a.tape == nullptr) {
            throw ShapeMismatch("operands are recorded on different tapes");
        }
        return *a.tape;
    }

    static Tensor next_stop_grad(Tape& tape, const Tensor& input) {
        const std::size_t n = tape.stop_grad_count_++;
        if (!tape.replay_) return input;
        if (n >= tape.frozen_.size()) {
            throw ShapeMismatch("replay tape: more stop_grad calls than captured values");
        }
        const Tensor& frozen = tape.frozen_[n];
        require_same_shape("stop_grad replay", frozen, input);
        return frozen;
    }
};

Tape::Tape(std::vector<Tensor> frozen_stop_grads)
    : frozen_(std::move(frozen_stop_grads)), replay_(true) {}

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

void Tape::check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
        throw ShapeMismatch("variable does not belong to this tape");
    }
}

Var Tape::constant(Tensor value) {
    return push(Node{OpKind::Constant, {0, 0}, 0, std::move(value)});
}

Var Tape::param(const ParamStore& params, std::size_t index) {
    return push(Node{OpKind::Param, {0, 0}, 0, params.value(index), 0.0, index});
}

Var Tape::param(const ParamStore& params, std::string_view name) {
    return param(params, params.index(name));
}

std::vector<Tensor> Tape::stop_grad_values() const {
    std::vector<Tensor> out;
    for (const auto& n : nodes_) {
        if (n.op == OpKind::StopGrad) out.push_back(n.value);
    }
    return out;
}

std::vector<Tensor> Tape::backward_all(Var loss) const {
    check_owned(loss);
    const Tensor& lv = value(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw NonScalarLoss("backward: loss has shape " + shape(lv));
    }
    std::vector<Tensor> grads(loss.id + 1);
    grads[loss.id] = Tensor(1, 1, 1.0);

    for (std::size_t id = loss.id + 1; id-- > 0;) {
        if (grads[id].size() == 0) continue;
        const Node& node = nodes_[id];
        const Tensor& g = grads[id];
        const std::size_t ia = node.inputs[0];
        const std::size_t ib = node.inputs[1];

        switch (node.op) {
            case OpKind::Constant:
            case OpKind::Param:
            case OpKind::StopGrad:
                break;
            case OpKind::Add:
                accumulate(grads[ia], g);
                accumulate(grads[ib], g);
                break;
            case OpKind::Sub: {
                accumulate(grads[ia], g);
                accumulate(grads[ib], -1.0 * g);
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& b = nodes_[ib].value;
                Tensor ga(g.rows(), g.cols());
                Tensor gb(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] = g.data()[i] * b.data()[i];
                    gb.data()[i] = g.data()[i] * a.data()[i];
                }
                accumulate(grads[ia], ga);
                accumulate(grads[ib], gb);
                break;
            }
            case OpKind::Scale:
                accumulate(grads[ia], node.scalar * g);
                break;
            case OpKind::MatMul: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& b = nodes_[ib].value;
                const RowMajor ge = owned(g);
                const RowMajor ga = ge * owned(b).transpose();
                const RowMajor gb = owned(a).transpose() * ge;
                accumulate(grads[ia], to_tensor(ga));
                accumulate(grads[ib], to_tensor(gb));
                break;
            }
            case OpKind::AddBias: {
                accumulate(grads[ia], g);
                // Plain row-order loop: a vectorized column sum would round
                // differently depending on buffer alignment.
                Tensor gb(1, g.cols());
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                accumulate(grads[ib], gb);
                break;
            }
            case OpKind::LeakyRelu: {
                const Tensor& x = nodes_[ia].value;
                Tensor gx(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gx.data()[i] = x.data()[i] > 0.0 ? g.data()[i] : node.scalar * g.data()[i];
                }
                accumulate(grads[ia], gx);
                break;
            }
            case OpKind::Sqrt: {
                Tensor gx(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gx.data()[i] = g.data()[i] / (2.0 * node.value.data()[i]);
                }
                accumulate(grads[ia], gx);
                break;
            }
            case OpKind::Sum: {
                const Tensor& a = nodes_[ia].value;
                accumulate(grads[ia], Tensor(a.rows(), a.cols(), g(0, 0)));
                break;
            }
            case OpKind::RowDot: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& b = nodes_[ib].value;
                Tensor ga(a.rows(), a.cols());
                Tensor gb(a.rows(), a.cols());
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    const double gr = g(r, 0);
                    for (std::size_t c = 0; c < a.cols(); ++c) {
                        ga(r, c) = gr * b(r, c);
                        gb(r, c) = gr * a(r, c);
                    }
                }
                accumulate(grads[ia], ga);
                accumulate(grads[ib], gb);
                break;
            }
            case OpKind::RowSquaredNorm: {
                const Tensor& a = nodes_[ia].value;
                Tensor ga(a.rows(), a.cols());
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = 2.0 * g(r, 0) * a(r, c);
                accumulate(grads[ia], ga);
                break;
            }
            case OpKind::DivRows: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& s = nodes_[ib].value;
                Tensor ga(a.rows(), a.cols());
                Tensor gs(s.rows(), 1);
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    const double sr = s(r, 0);
                    double acc = 0.0;
                    for (std::size_t c = 0; c < a.cols(); ++c) {
                        ga(r, c) = g(r, c) / sr;
                        acc += g(r, c) * a(r, c);
                    }
                    gs(r, 0) = -acc / (sr * sr);
                }
                accumulate(grads[ia], ga);
                accumulate(grads[ib], gs);
                break;
            }
            case OpKind::MulRows: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& s = nodes_[ib].value;
                Tensor ga(a.rows(), a.cols());
                Tensor gs(s.rows(), 1);
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    const double sr = s(r, 0);
                    double acc = 0.0;
                    for (std::size_t c = 0; c < a.cols(); ++c) {
                        ga(r, c) = g(r, c) * sr;
                        acc += g(r, c) * a(r, c);
                    }
                    gs(r, 0) = acc;
                }
                accumulate(grads[ia], ga);
                accumulate(grads[ib], gs);
                break;
            }
            case OpKind::ConcatCols: {
                const Tensor& a = nodes_[ia].value;
                const Tensor& b = nodes_[ib].value;
                Tensor ga(a.rows(), a.cols());
                Tensor gb(b.rows(), b.cols());
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(r, c);
                    for (std::size_t c = 0; c < b.cols(); ++c) gb(r, c) = g(r, a.cols() + c);
                }
                accumulate(grads[ia], ga);
                accumulate(grads[ib], gb);
                break;
            }
            case OpKind::SliceCols: {
                const Tensor& a = nodes_[ia].value;
                Tensor ga(a.rows(), a.cols());
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) ga(r, node.aux + c) = g(r, c);
                accumulate(grads[ia], ga);
                break;
            }
            case OpKind::Reshape: {
                const Tensor& a = nodes_[ia].value;
                accumulate(grads[ia], Tensor(a.rows(), a.cols(), g.data()));
                break;
            }
        }
    }
    return grads;
}

Gradients Tape::backward(Var loss, const ParamStore& params) const {
    const std::vector<Tensor> node_grads = backward_all(loss);
    Gradients out = zero_gradients(params);
    // Ascending node id keeps the accumulation order fixed.
    for (std::size_t id = 0; id < node_grads.size(); ++id) {
        const Node& node = nodes_[id];
        if (node.op != OpKind::Param || node_grads[id].size() == 0) continue;
        if (node.aux >= out.size()) throw ShapeMismatch("backward: parameter index outside store");
        require_same_shape("backward", out[node.aux], node_grads[id]);
        accumulate(out[node.aux], node_grads[id]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primitives

Var add(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    require_same_shape("add", a.value(), b.value());
    return Recorder::push(t, OpKind::Add, {a, b}, a.value() + b.value());
}

Var sub(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    require_same_shape("subtract", a.value(), b.value());
    return Recorder::push(t, OpKind::Sub, {a, b}, a.value() - b.value());
}

Var mul(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    require_same_shape("multiply", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
    return Recorder::push(t, OpKind::Mul, {a, b}, std::move(out));
}

Var scale(Var a, double s) {
    return Recorder::push(Recorder::tape_of(a), OpKind::Scale, {a}, s * a.value(), s);
}

Var matmul(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) throw ShapeMismatch("matmul: " + shape(av) + " * " + shape(bv));
    const RowMajor out = owned(av) * owned(bv);
    return Recorder::push(t, OpKind::MatMul, {a, b}, to_tensor(out));
}

Var add_bias(Var a, Var bias) {
    Tape& t = Recorder::common_tape(a, bias);
    const Tensor& av = a.value();
    const Tensor& bv = bias.value();
    if (bv.rows() != 1 || bv.cols() != av.cols()) {
        throw ShapeMismatch("add_bias: bias " + shape(bv) + " for input " + shape(av));
    }
    Tensor out = av;
    view(out).rowwise() += view(bv).row(0);
    return Recorder::push(t, OpKind::AddBias, {a, bias}, std::move(out));
}

Var leaky_relu(Var a, double slope) {
    Tensor out = a.value();
    for (double& v : out.data()) v = v > 0.0 ? v : slope * v;
    return Recorder::push(Recorder::tape_of(a), OpKind::LeakyRelu, {a}, std::move(out), slope);
}

Var sqrt(Var a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = std::sqrt(v);
    return Recorder::push(Recorder::tape_of(a), OpKind::Sqrt, {a}, std::move(out));
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return Recorder::push(Recorder::tape_of(a), OpKind::Sum, {a}, Tensor(1, 1, s));
}

Var dot(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_same_shape("dot", av, bv);
    Tensor out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) out(r, 0) = nppc::dot(av.row(r), bv.row(r));
    return Recorder::push(t, OpKind::RowDot, {a, b}, std::move(out));
}

Var squared_norm(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) out(r, 0) = nppc::dot(av.row(r), av.row(r));
    return Recorder::push(Recorder::tape_of(a), OpKind::RowSquaredNorm, {a}, std::move(out));
}

Var divide_by_scalar(Var a, Var s) {
    Tape& t = Recorder::common_tape(a, s);
    require_row_scalars("divide_by_scalar", a.value(), s.value());
    Tensor out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const double sr = s.value()(r, 0);
        for (double& v : out.row(r)) v /= sr;
    }
    return Recorder::push(t, OpKind::DivRows, {a, s}, std::move(out));
}

Var multiply_by_scalar(Var a, Var s) {
    Tape& t = Recorder::common_tape(a, s);
    require_row_scalars("multiply_by_scalar", a.value(), s.value());
    Tensor out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const double sr = s.value()(r, 0);
        for (double& v : out.row(r)) v *= sr;
    }
    return Recorder::push(t, OpKind::MulRows, {a, s}, std::move(out));
}

Var concat(Var a, Var b) {
    Tape& t = Recorder::common_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rows() != bv.rows()) throw ShapeMismatch("concat: " + shape(av) + " and " + shape(bv));
    Tensor out(av.rows(), av.cols() + bv.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        auto dst = out.row(r);
        std::copy(av.row(r).begin(), av.row(r).end(), dst.begin());
        std::copy(bv.row(r).begin(), bv.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(av.cols()));
    }
    return Recorder::push(t, OpKind::ConcatCols, {a, b}, std::move(out));
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Tensor& av = a.value();
    if (begin + count > av.cols()) {
        throw ShapeMismatch("slice_cols: [" + std::to_string(begin) + ", " +
                            std::to_string(begin + count) + ") outside " + shape(av));
    }
    Tensor out(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        auto src = av.row(r).subspan(begin, count);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return Recorder::push(Recorder::tape_of(a), OpKind::SliceCols, {a}, std::move(out), 0.0, begin);
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
    const Tensor& av = a.value();
    if (rows * cols != av.size()) {
        throw ShapeMismatch("reshape: " + shape(av) + " to " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    }
    return Recorder::push(Recorder::tape_of(a), OpKind::Reshape, {a}, Tensor(rows, cols, av.data()));
}

Var stop_grad(Var a) {
    Tape& t = Recorder::tape_of(a);
    Tensor value = Recorder::next_stop_grad(t, a.value());
    return Recorder::push(t, OpKind::StopGrad, {a}, std::move(value));
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const LossFn& f, const ParamStore& params, const GradCheckOptions& options) {
    Tape base;
    const Var loss = f(base, params);
    const Gradients analytic = base.backward(loss, params);
    const std::vector<Tensor> frozen = base.stop_grad_values();

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params.value(p).size(); ++i) coords.emplace_back(p, i);
    if (options.max_coordinates != 0 && options.max_coordinates < coords.size()) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.max_coordinates);
    }

    auto evaluate = [&](const ParamStore& p) {
        Tape replay(frozen);
        return f(replay, p).scalar();
    };

    double scale = 0.0;
    for (const Tensor& g : analytic)
        for (double v : g.data()) scale = std::max(scale, std::abs(v));
    const double floor = std::max(1e-8, options.floor_fraction * scale);

    ParamStore probe = params;
    double worst = 0.0;
    const double eps = options.epsilon;
    for (const auto& [p, i] : coords) {
        double& slot = probe.value(p).data()[i];
        const double original = slot;
        slot = original + eps;
        const double up = evaluate(probe);
        slot = original - eps;
        const double down = evaluate(probe);
        slot = original;
        const double numeric = (up - down) / (2.0 * eps);
        const double exact = analytic[p].data()[i];
        const double denom = std::max({std::abs(exact), std::abs(numeric), floor});
        worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::for_params(const ParamStore& params, double learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    s.first_moment = zero_gradients(params);
    s.second_moment = zero_gradients(params);
    return s;
}

void adam_step(AdamState& state, ParamStore& params, const Gradients& grads) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
        throw ShapeMismatch("adam_step: gradient/state count does not match parameters");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        require_same_shape("adam_step", params.value(p), grads[p]);
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(state.beta1, t);
    const double correction2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& theta = params.value(p).data();
        auto& m = state.first_moment[p].data();
        auto& v = state.second_moment[p].data();
        const auto& g = grads[p].data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            theta[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

}  // namespace nppc::ad

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nppc/linalg.hpp"

namespace nppc::ad {

/// Values on the tape are 2-D; a batch of B vectors of length n is B×n and a
/// scalar is 1×1. Row-wise reductions (dot, squared_norm) map B×n to B×1.
using Tensor = Matrix;

/// Named trainable tensors with stable insertion order.
class ParamStore {
public:
    std::size_t add(std::string name, Tensor init);
    std::size_t index(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const noexcept { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const Tensor& value(std::size_t i) const { return values_.at(i); }
    Tensor& value(std::size_t i) { return values_.at(i); }
    /// Total number of scalar parameters.
    std::size_t scalar_count() const;

    friend bool operator==(const ParamStore&, const ParamStore&) = default;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

/// One gradient tensor per ParamStore entry, same order and shapes.
using Gradients = std::vector<Tensor>;

Gradients zero_gradients(const ParamStore& params);

enum class OpKind : std::uint8_t {
    Constant,
    Param,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    AddBias,
    LeakyRelu,
    Sqrt,
    Sum,
    RowDot,
    RowSquaredNorm,
    DivRows,
    MulRows,
    ConcatCols,
    SliceCols,
    Reshape,
    StopGrad,
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    /// Convenience for 1×1 values.
    double scalar() const { return value()(0, 0); }
};

/// Eager, append-only record of primitive applications.
///
/// A tape may be built in replay mode with the stop_grad values captured from
/// an earlier tape; the n-th stop_grad call then yields the n-th captured
/// value regardless of its input. Finite-difference checks use this to
/// differentiate the frozen-branch semantics numerically.
class Tape {
public:
    Tape() = default;
    explicit Tape(std::vector<Tensor> frozen_stop_grads);

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var param(const ParamStore& params, std::size_t index);
    Var param(const ParamStore& params, std::string_view name);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    OpKind kind(std::size_t id) const { return nodes_.at(id).op; }

    /// Forward values of every stop_grad node, in creation order.
    std::vector<Tensor> stop_grad_values() const;

    /// Reverse sweep from a 1×1 loss. Parameters not reached get zeros.
    Gradients backward(Var loss, const ParamStore& params) const;
    /// Gradient of the loss with respect to every node (empty when unreached).
    std::vector<Tensor> backward_all(Var loss) const;

private:
    friend struct Recorder;

    struct Node {
        OpKind op;
        std::size_t inputs[2];
        std::size_t input_count;
        Tensor value;
        double scalar = 0.0;   // slope, scale factor
        std::size_t aux = 0;   // param index or slice offset
    };

    Var push(Node node);
    void check_owned(Var v) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> frozen_;
    std::size_t stop_grad_count_ = 0;
    bool replay_ = false;
};

// Primitives. All inputs must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
/// Adds a 1×n row to every row of a B×n tensor.
Var add_bias(Var a, Var bias);
Var leaky_relu(Var a, double slope);
Var sqrt(Var a);
/// Sum of all entries, 1×1.
Var sum(Var a);
/// Row-wise inner product, B×n · B×n → B×1.
Var dot(Var a, Var b);
/// Row-wise squared Euclidean norm, B×n → B×1.
Var squared_norm(Var a);
/// Divides row i of a by s(i,0); s is B×1.
Var divide_by_scalar(Var a, Var s);
/// Multiplies row i of a by s(i,0); s is B×1.
Var multiply_by_scalar(Var a, Var s);
Var concat(Var a, Var b);
/// Columns [begin, begin + count).
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var reshape(Var a, std::size_t rows, std::size_t cols);
/// Identity forward; blocks all gradient flow backward.
Var stop_grad(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Loss builder used by grad_check: records a scalar loss on the given tape.
using LossFn = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckOptions {
    double epsilon = 1e-5;
    /// 0 checks every coordinate; otherwise this many sampled coordinates.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
    /// Denominator floor as a fraction of the largest analytic gradient entry.
    /// Exactly-zero gradients otherwise turn differencing noise into O(1) error.
    double floor_fraction = 1e-4;
};

/// Max relative error between backward gradients and central differences,
/// with max(|a|, |b|, floor_fraction * max|grad|, 1e-8) in the denominator. Stop-gradient values are held
/// at their unperturbed forward values while differencing.
double grad_check(const LossFn& f, const ParamStore& params, const GradCheckOptions& options = {});

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;

    static AdamState for_params(const ParamStore& params, double learning_rate = 1e-3);
};

/// One bias-corrected Adam update in place.
void adam_step(AdamState& state, ParamStore& params, const Gradients& grads);

}  // namespace nppc::ad

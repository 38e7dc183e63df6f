#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dualdiff/tensor.hpp"

namespace dualdiff::ad {

/// The closed set of differentiable operations. Every node in a graph carries
/// one of these tags.
enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    matmul,
    reshape,
    transpose,
    concat,
    slice,
    broadcast,
    sum,
    mean,
    softmax,
    tanh,
    sigmoid,
    silu,
    layer_norm,
    conv2d,
    conv2d_zero_init,
    avg_pool2d,
    upsample_nearest,
    embedding_lookup,
    linear_interp_1d,
    scaled_dot_attention,
};

const char* op_name(Op op);

struct Node {
    Tensor value;
    Tensor grad;  // undefined until a gradient is accumulated
    Op op = Op::leaf;
    bool requires_grad = false;
    // Same order as the op's inputs; null where an optional input was absent.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
   public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    DType dtype() const { return node_->value.dtype(); }
    bool has_grad() const { return node_->grad.defined(); }
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    Op op() const { return node_->op; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

   private:
    std::shared_ptr<Node> node_;
};

/// Leaf that never receives a gradient.
Var constant(Tensor value);
/// Leaf that receives gradients when requires_grad is set.
Var variable(Tensor value, bool requires_grad = true);

// Checked mode rejects non-finite operands in every op.
void set_checked(bool on);
bool checked();

/// Disables graph recording for its lifetime (inference, sampling).
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};
bool grad_enabled();

// Element-wise arithmetic with numpy-style broadcasting of either operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);

// a [..., m, k] x b [k, n] or [..., k, n] with matching leading axes.
Var matmul(const Var& a, const Var& b);

Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a, int axis0, int axis1);
Var concat(std::span<const Var> parts, int axis);
Var slice(const Var& a, int axis, std::int64_t start, std::int64_t stop);
Var broadcast_to(const Var& a, const Shape& shape);

Var sum(const Var& a);             // -> [1]
Var sum(const Var& a, int axis);   // removes the axis ([1] if rank 1)
Var mean(const Var& a);            // -> [1]
Var softmax(const Var& a, int axis);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
// Normalizes over the last axis; no affine parameters.
Var layer_norm(const Var& a, double eps = 1e-5);

struct Conv2dOptions {
    std::int64_t stride = 1;
    std::int64_t pad = 0;
};
// x [N,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] (may be empty).
Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opts = {});
// Identical arithmetic; tagged so zero-initialized residual taps are auditable.
Var conv2d_zero_init(const Var& x, const Var& w, const Var& bias, Conv2dOptions opts = {});
Var avg_pool2d(const Var& x, std::int64_t kernel);
Var upsample_nearest(const Var& x, std::int64_t factor);

// table [V, d], ids in [0, V) -> [len(ids), d]
Var embedding_lookup(const Var& table, std::span<const std::int64_t> ids);
// values [L, d], positions [Q, K] in [0, L-1] -> [Q, K, d]
Var linear_interp_1d(const Var& values, const Var& positions);
// Single-head softmax(q k^T / sqrt(d)) v; q [Tq,d], k [Tk,d], v [Tk,dv] -> [Tq,dv].
Var scaled_dot_attention(const Var& q, const Var& k, const Var& v);

/// Reverse sweep from a scalar ([1]) loss. Gradients accumulate into every
/// leaf with requires_grad; interior gradients are released afterwards.
void backward(const Var& loss);

}  // namespace dualdiff::ad

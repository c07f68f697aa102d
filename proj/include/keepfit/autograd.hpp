#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "keepfit/tensor.hpp"

namespace keepfit::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value in the computation graph. Leaves have no backward function.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-initialised on first use.
    Tensor& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var parameter(Tensor value);

    const Tensor& value() const { return node_->value; }
    /// Direct access for optimizers and initialisers; never call mid-graph.
    Tensor& mutable_value() { return node_->value; }
    /// Empty tensor when no gradient reached this node.
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    double item() const { return node_->value.item(); }
    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

/// Disables graph recording on this thread while alive (inference mode).
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

/// Build a result node. `backward` runs only if some input requires grad.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Reverse-mode sweep from a scalar root; gradients accumulate into leaves.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a / s for a one-element s.
Var div_scalar(const Var& a, const Var& s);
/// x[r, c] + bias[c]
Var add_row(const Var& x, const Var& bias);
Var relu(const Var& a);
/// tanh approximation
Var gelu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
/// log(max(a, eps)); zero gradient below the floor.
Var log_floor(const Var& a, double eps);
Var square(const Var& a);

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);
/// [rows, cols] -> [rows, 1] sum over the last dimension.
Var sum_cols(const Var& a);
/// [groups * group, cols] -> [groups, cols], averaging each run of `group` rows.
Var mean_row_groups(const Var& a, std::size_t group);

// ---- shape ----
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& a, const std::vector<std::size_t>& rows);
Var stop_gradient(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// ---- rowwise (last dimension) ----
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Throws keepfit::Error on a zero-norm row.
Var l2_normalize_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Mean negative log-likelihood of `targets` under row-wise softmax of logits.
Var cross_entropy_rows(const Var& logits, const std::vector<std::size_t>& targets);

/// Index-backpropagation one-hot: the forward value is the exact one-hot of
/// the row argmax (ties to the lowest index); the backward pass is that of
/// softmax(logits).
Var straight_through_onehot(const Var& logits);

// ---- convolution ----
/// NHWC input [B,H,W,Cin], weight [kh,kw,Cin,Cout], bias [Cout] (may be empty Var).
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

} // namespace keepfit::ag

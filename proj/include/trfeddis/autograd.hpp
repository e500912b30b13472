#pragma once

// Reverse-mode differentiation over BasicTensor. A Graph is a tape: every op
// appends a node whose inputs already exist, so node ids are a topological
// order and backward is a single reverse sweep.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "trfeddis/tensor.hpp"

namespace trfeddis::nd {

class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::span<const T> grad() const { return graph_->grad(id_); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = true);
  Var<T> constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op output. The node needs a gradient iff any input does.
  Var<T> record(BasicTensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Populates gradients of every requires-grad node w.r.t. the scalar `loss`.
  /// Leaf gradients accumulate across calls until zero_grad().
  void backward(Var<T> loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  const BasicTensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  /// Gradient of a node; empty span if it never received one.
  std::span<const T> grad(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient, allocated (zeroed) on first use.
  std::vector<T>& grad_buffer(std::size_t id);

 private:
  struct Node {
    BasicTensor<T> value;
    std::vector<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

enum class Mode { kTrain, kEval };

/// Running statistics owned by the caller (they live in the model's parameter
/// set and are updated in place in train mode).
template <typename T>
struct BatchNormState {
  BasicTensor<T>* running_mean = nullptr;
  BasicTensor<T>* running_var = nullptr;
  double eps = 1e-5;
  double momentum = 0.1;
};

// Elementwise (identical shapes).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, double c);
template <typename T> Var<T> add_scalar(Var<T> a, double c);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> softplus(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
/// ln(max(x, floor)). With floor == 0 any x <= 0 is a domain error; with a
/// positive floor the clamped entries get zero gradient.
template <typename T> Var<T> log(Var<T> x, double floor = 0.0);
template <typename T> Var<T> digamma(Var<T> x);
template <typename T> Var<T> lgamma(Var<T> x);

/// Row-wise softmax over the last axis of a rank-2 tensor.
template <typename T> Var<T> softmax(Var<T> x);

/// Scalar sum / mean of all elements (accumulated in double).
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
/// [B,K] -> [B].
template <typename T> Var<T> row_sum(Var<T> x);
/// [B] -> [B,K] by repeating each entry along a new trailing axis.
template <typename T> Var<T> expand_cols(Var<T> v, std::size_t k);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);
/// x[..., F] + b[F].
template <typename T> Var<T> add_bias(Var<T> x, Var<T> b);
/// [M,K] x [K,N] -> [M,N].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// input[B,in] . weight[in,out] + bias[out].
template <typename T> Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);
/// Cross-correlation of input[B,C,H,W] with kernel[O,C,k,k] (im2col + GEMM).
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding);
/// Non-overlapping max pooling with window = stride = `size` (floor on odd extents).
template <typename T> Var<T> max_pool2d(Var<T> input, std::size_t size);
template <typename T> Var<T> avg_pool2d(Var<T> input, std::size_t size);
/// Normalizes input[B,C,...] per channel C over every other axis.
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T> state, Mode mode);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }
template <typename T> Var<T> operator*(double c, Var<T> a) { return scale(a, c); }
template <typename T> Var<T> operator-(Var<T> a) { return scale(a, -1.0); }

// Direct reference kernels, kept for testing the fast paths.
namespace reference {
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
}  // namespace reference

}  // namespace trfeddis::nd

#pragma once

// Tape-based reverse-mode differentiation over double-precision tensors.
//
// A Graph records every operation applied to its Vars in execution order, so
// the tape is already topologically sorted and backward() is a single reverse
// sweep. Graphs are cheap and meant to live for one forward/backward pass.

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "awm/kernels.hpp"
#include "awm/tensor.hpp"

namespace awm {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value) : name(std::move(name)), value(std::move(value)), grad(this->value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
};

class Graph;

/// Handle to a value recorded on a Graph.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient after Graph::backward(); all zeros if the root does not depend on this value.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backprop = std::function<void(Graph&, const Tensor& output, const Tensor& grad_output)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Input that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that receives a gradient, readable through Var::grad().
  Var variable(Tensor value);
  /// Leaf bound to a Parameter; backward() adds into parameter.grad. Untrainable parameters
  /// enter as constants.
  Var parameter(Parameter& parameter, bool trainable = true);

  /// Records an operation result. backprop is kept only if some parent requires a gradient.
  Var record(Tensor value, std::span<const Var> parents, Backprop backprop);

  /// Gradient buffer to accumulate into for v, or nullptr when v needs no gradient.
  Tensor* grad_target(Var v);

  /// Reverse sweep from a scalar root. May be called once per graph.
  void backward(Var root);

  bool backward_done() const noexcept { return backward_done_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Var;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* parameter = nullptr;
    Backprop backprop;
  };

  Var push(Node node);
  const Node& node(int id) const;

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// Differentiable operations. Each mirrors the plain-tensor kernel of the same name.

Var conv2d(Var input, Var kernel, Index stride, Index padding);
Var global_avg_pool(Var input);
Var avg_pool2x2(Var input);
Var fully_connected(Var input, Var weight, Var bias);
Var activation(Var input, Activation kind);
inline Var relu(Var input) { return activation(input, Activation::relu); }
inline Var sigmoid(Var input) { return activation(input, Activation::sigmoid); }
Var batch_norm(Var input, Var gamma, Var beta, BatchNormStats<double>& stats, BatchNormMode mode);
/// Mean cross-entropy over the batch; result is a 1-element tensor.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

Var add(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var input, double factor);
Var sum(Var input);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator*(Var a, Var b) { return multiply(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Concatenates along axis 1 (features of B x D, or channels of B x C x H x W).
Var concat(std::span<const Var> parts);
/// Divides each row of a B x n tensor by its row sum.
Var normalize_rows(Var input);
/// out[b] = lambda[b,0] * f[b] + lambda[b,1] * x[b].
Var weighted_merge_sum(Var f, Var x, Var lambda);
/// Channel concatenation of lambda[b,i]-scaled paths.
Var weighted_merge_concat(std::span<const Var> paths, Var lambda);
/// Parameter-free shortcut: spatial subsampling by stride and symmetric zero channel padding.
Var pad_shortcut(Var input, Index out_channels, Index stride);

}  // namespace awm

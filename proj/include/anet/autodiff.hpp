#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "anet/tensor.hpp"

namespace anet {

enum class Partition { kBackbone, kReidHead, kAttributeBranches, kJointModule };

const char* partition_name(Partition p);

/// A named trainable array. `grad` accumulates the sum of contributions from
/// every graph that referenced the parameter since the last zero_grad().
template <typename Scalar>
struct Parameter {
  std::string name;
  Partition partition = Partition::kBackbone;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = true;
  bool has_grad = false;

  void zero_grad() {
    grad = Tensor<Scalar>::zeros(value.shape());
    has_grad = false;
  }
};

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  int id() const { return id_; }
  Graph<Scalar>& graph() const { return *graph_; }
  const Tensor<Scalar>& value() const;
  const Tensor<Scalar>& grad() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(int i) const { return value().dim(i); }
  bool requires_grad() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its producers.
template <typename Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true);
  Var<Scalar> param(Parameter<Scalar>& p);

  /// Records an op output. The backward closure is dropped when no input
  /// requires a gradient.
  Var<Scalar> record(Tensor<Scalar> value, const std::vector<int>& inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and propagates. Parameter leaves add their
  /// gradient into Parameter::grad.
  void backward(Var<Scalar> root);

  const Tensor<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor<Scalar>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Gradient buffer of an input node, zero-initialized on first use.
  Tensor<Scalar>& grad_buffer(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
  };
  std::deque<Node> nodes_;  // stable references across record()
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return graph_->value(id_);
}
template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::grad() const {
  return graph_->grad(id_);
}
template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return graph_->requires_grad(id_);
}

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace anet

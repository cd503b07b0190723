#include "anet/autodiff.hpp"

#include <sstream>

namespace anet {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual != expected) {
    throw std::invalid_argument(std::string(what) + ": shape " + shape_str(actual) +
                                " does not match expected " + shape_str(expected));
  }
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::kBackbone:
      return "backbone";
    case Partition::kReidHead:
      return "reid_head";
    case Partition::kAttributeBranches:
      return "attribute_branches";
    case Partition::kJointModule:
      return "joint_module";
  }
  return "unknown";
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::constant(Tensor<Scalar> value) {
  return leaf(std::move(value), false);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::leaf(Tensor<Scalar> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::param(Parameter<Scalar>& p) {
  Var<Scalar> v = leaf(p.value, p.trainable);
  nodes_.back().param = &p;
  return v;
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(Tensor<Scalar> value, const std::vector<int>& inputs,
                                  BackwardFn backward) {
  bool needs = false;
  for (int id : inputs) needs = needs || nodes_[static_cast<std::size_t>(id)].requires_grad;
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Scalar>
Tensor<Scalar>& Graph<Scalar>::grad_buffer(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.grad.empty()) node.grad = Tensor<Scalar>::zeros(node.value.shape());
  return node.grad;
}

template <typename Scalar>
void Graph<Scalar>::backward(Var<Scalar> root) {
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward() requires a scalar root, got shape " +
                                shape_str(root.shape()));
  }
  if (!requires_grad(root.id())) return;
  grad_buffer(root.id()).vec().setOnes();
  for (int id = root.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) {
      // The closure may append to grad buffers of earlier nodes only, so
      // `node` stays valid.
      node.backward(*this, id);
    } else if (node.param != nullptr) {
      Parameter<Scalar>& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<Scalar>::zeros(p.value.shape());
      p.grad.vec() += node.grad.vec();
      p.has_grad = true;
    }
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace anet

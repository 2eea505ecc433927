#include "pil/graph.hpp"

#include <algorithm>

#include "pil/errors.hpp"

namespace pil {

const Tensor& Var::value() const { return graph_->value(id_); }

bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  Node node;
  value.set_requires_grad(false);
  value.clear_grad();
  node.value = std::move(value);
  return push(std::move(node));
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node node;
  value.clear_grad();
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  return push(std::move(node));
}

Var Graph::parameter(Tensor& param) {
  Node node;
  node.external = &param;
  node.external_mut = &param;
  node.requires_grad = param.requires_grad();
  return push(std::move(node));
}

Var Graph::parameter(const Tensor& param) {
  Node node;
  node.external = &param;
  return push(std::move(node));
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw ContractViolation("graph input must precede its consumer");
    node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

const Tensor& Graph::value(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.external ? *node.external : node.value;
}

std::span<double> Graph::grad_sink(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.requires_grad) return {};
  if (node.external_mut) return node.external_mut->ensure_grad();
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Graph::backward(Var loss, double seed) {
  if (loss.graph_ != this) throw ArgumentError("loss belongs to a different graph");
  if (loss.value().numel() != 1) {
    throw ArgumentError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  for (auto& node : nodes_) node.grad.clear();
  if (!nodes_[loss.id()].requires_grad) return;

  grad_sink(loss.id())[0] += seed;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    // The closure may append to other nodes' buffers but never to its own.
    node.backward(*this, node.grad);
  }
}

const Buffer* Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.external || node.grad.empty()) return nullptr;
  return &node.grad;
}

std::size_t Graph::grad_node_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.requires_grad; }));
}

}  // namespace pil

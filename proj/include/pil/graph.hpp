#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "pil/tensor.hpp"

namespace pil {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run computation record for reverse-mode differentiation.
///
/// Nodes are appended as operations execute, so every node's inputs precede it.
/// backward() walks the nodes in exact reverse append order. A Graph is owned
/// by one thread and rebuilt for every batch.
class Graph {
 public:
  /// Propagates the node's output gradient into its inputs through grad_sink().
  using BackwardFn = std::function<void(Graph&, std::span<const double> grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf owned by the graph; its gradient is read back with grad().
  Var input(Tensor value, bool requires_grad);
  /// Leaf bound to an external tensor. When the tensor requires grad, backward
  /// accumulates into its gradient buffer; otherwise the leaf is a constant.
  Var parameter(Tensor& param);
  /// Read-only binding of an external tensor; never receives a gradient.
  Var parameter(const Tensor& param);

  /// Appends an operation result. The node requires grad iff any input does;
  /// `backward` is dropped when it does not.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulator for a node during backward. Empty when the node does
  /// not require grad.
  std::span<double> grad_sink(std::size_t id);

  /// Seeds d(loss)/d(loss) = seed and propagates to every reachable leaf.
  /// Throws ArgumentError for a non-scalar loss.
  void backward(Var loss, double seed = 1.0);

  /// Gradient of a graph-owned node after backward(); nullptr when none was produced.
  const Buffer* grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t grad_node_count() const;

  /// Appended-order list of input ids of a node.
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor* external_mut = nullptr;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Buffer grad;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

}  // namespace pil

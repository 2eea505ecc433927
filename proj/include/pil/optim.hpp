#pragma once

#include <string>
#include <vector>

#include "pil/tensor.hpp"

namespace pil {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
///
/// Only parameters that require grad at construction are tracked; frozen ones
/// get no momentum buffer and are never touched.
class Sgd {
 public:
  Sgd(std::vector<NamedTensor> params, double learning_rate, double momentum = 0.9);

  /// Applies one update and zeroes the gradients. Throws ContractViolation when
  /// a tracked parameter has no gradient.
  void step();
  void zero_grad();

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr);
  double momentum() const { return momentum_; }

  std::size_t tracked_count() const { return slots_.size(); }
  bool tracks(const Tensor* param) const;

  /// Momentum buffers in tracking order, named after their parameters.
  std::vector<NamedTensor> state();

 private:
  struct Slot {
    std::string name;
    Tensor* param;
    Tensor velocity;
  };

  std::vector<Slot> slots_;
  double learning_rate_;
  double momentum_;
};

}  // namespace pil

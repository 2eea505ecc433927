#include "pil/optim.hpp"

#include <algorithm>
#include <cmath>

#include "pil/errors.hpp"

namespace pil {

Sgd::Sgd(std::vector<NamedTensor> params, double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("learning rate must be positive and finite");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must lie in [0, 1)");
  for (auto& p : params) {
    if (!p.tensor->requires_grad()) continue;
    slots_.push_back({p.name, p.tensor, Tensor(p.tensor->shape(), 0.0)});
  }
}

void Sgd::set_learning_rate(double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ArgumentError("learning rate must be positive and finite");
  learning_rate_ = lr;
}

void Sgd::step() {
  for (auto& slot : slots_) {
    if (!slot.param->has_grad()) {
      throw ContractViolation("parameter '" + slot.name + "' has no gradient at optimizer step");
    }
  }
  for (auto& slot : slots_) {
    auto p = slot.param->data();
    auto g = slot.param->grad();
    auto v = slot.velocity.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      p[i] -= learning_rate_ * v[i];
    }
    slot.param->zero_grad();
  }
}

void Sgd::zero_grad() {
  for (auto& slot : slots_) slot.param->zero_grad();
}

bool Sgd::tracks(const Tensor* param) const {
  return std::any_of(slots_.begin(), slots_.end(), [&](const Slot& s) { return s.param == param; });
}

std::vector<NamedTensor> Sgd::state() {
  std::vector<NamedTensor> out;
  out.reserve(slots_.size());
  for (auto& slot : slots_) out.push_back({slot.name, &slot.velocity});
  return out;
}

}  // namespace pil

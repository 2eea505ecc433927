#include "pil/losses.hpp"

#include <algorithm>
#include <cmath>

#include "pil/errors.hpp"
#include "pil/ops.hpp"
#include "pil/rng.hpp"

namespace pil {

void LossWeights::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ArgumentError("lambda must be positive");
  if (!(mask_proportion >= 0.0 && mask_proportion <= 1.0)) {
    throw ArgumentError("mask_proportion must lie in [0, 1]");
  }
}

namespace {

double batch_divisor(const Shape& shape) {
  if (shape.empty()) throw ShapeError("loss input needs a batch axis");
  return static_cast<double>(shape[0]);
}

}  // namespace

Var loss_pose(Var pred, Var target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("pose loss shape mismatch " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  return scale(sum_squares(sub(pred, target)), 1.0 / batch_divisor(pred.shape()));
}

Var loss_inter(const ActivationTap& teacher, const ActivationTap& student) {
  if (teacher.value.shape() != student.value.shape()) {
    throw ShapeError("tap shapes incompatible: teacher " + shape_string(teacher.value.shape()) + " vs student " +
                     shape_string(student.value.shape()));
  }
  Graph& graph = student.value.graph();
  Var fixed = graph.constant(teacher.value.value());
  return scale(sum_squares(sub(student.value, fixed)), 1.0 / batch_divisor(student.value.shape()));
}

Var loss_joint(Var inter, Var pose, const LossWeights& weights) {
  weights.validate();
  if (inter.value().numel() != 1 || pose.value().numel() != 1) {
    throw ShapeError("joint loss combines scalar losses");
  }
  return add(inter, scale(pose, weights.lambda));
}

Var loss_mask(const ActivationTap& student, const Tensor& mask) {
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw ContractViolation("mask values must be 0 or 1");
  }
  Graph& graph = student.value.graph();
  Var masked = elementwise_mul(student.value, graph.constant(mask));
  return scale(sum_squares(masked), 1.0 / batch_divisor(student.value.shape()));
}

std::vector<std::size_t> select_mask_batch(std::span<const std::size_t> ids, double proportion, std::uint64_t seed) {
  if (!(proportion >= 0.0 && proportion <= 1.0)) throw ArgumentError("proportion must lie in [0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(proportion * static_cast<double>(ids.size())));
  std::vector<std::size_t> pool(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, "mask-subset"));
  shuffle(pool, rng);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

Tensor invert_mask(const Tensor& foreground_mask) {
  Tensor out = foreground_mask;
  for (double& v : out.data()) v = 1.0 - v;
  return out;
}

}  // namespace pil

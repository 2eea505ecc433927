#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pil/graph.hpp"
#include "pil/model.hpp"

namespace pil {

struct LossWeights {
  /// Weight of the pose term in the joint loss.
  double lambda = 100.0;
  /// Fraction of each batch that receives the mask loss; 0 disables it.
  double mask_proportion = 0.0;

  /// Throws ArgumentError unless lambda > 0 and 0 <= mask_proportion <= 1.
  void validate() const;
};

// Every loss below is a [1] tensor divided by the batch size N.

/// Squared L2 distance between predicted and target poses [N,3J].
/// Used for both branches (student and teacher pose losses).
Var loss_pose(Var pred, Var target);

/// Squared L2 distance between the teacher and student taps. The teacher tap is
/// read as a constant, so gradient reaches the student only.
Var loss_inter(const ActivationTap& teacher, const ActivationTap& student);

/// inter + lambda * pose.
Var loss_joint(Var inter, Var pose, const LossWeights& weights);

/// Squared L2 energy of the student tap where `mask` is 1. The mask is
/// [N,1,h,w] (or tap-shaped), 0 on the foreground and 1 on the background.
/// Throws ContractViolation for values other than 0 and 1.
Var loss_mask(const ActivationTap& student, const Tensor& mask);

/// Deterministic subset of `ids` of size round(proportion * ids.size()),
/// returned in ascending order.
std::vector<std::size_t> select_mask_batch(std::span<const std::size_t> ids, double proportion, std::uint64_t seed);

/// Flips a foreground=1 mask into the background=1 polarity used by loss_mask.
Tensor invert_mask(const Tensor& foreground_mask);

}  // namespace pil

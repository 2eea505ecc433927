#include <gtest/gtest.h>

#include <set>

#include "grad_cases.hpp"
#include "oracles.hpp"
#include "pil/errors.hpp"
#include "pil/losses.hpp"

using namespace pil;

namespace {

ActivationTap tap_of(Var v) { return {1, v}; }

Tensor binary_mask(Shape s, Rng& rng) {
  Tensor m(std::move(s));
  for (double& v : m.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(Losses, MatchLoopReferences) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(derive_seed(1, "losses", trial));
    const std::size_t n = 1 + rng.below(4), c = 1 + rng.below(3), hw = 4 + rng.below(12);
    const Tensor pred = gradcheck::uniform({n, 63}, rng), target = gradcheck::uniform({n, 63}, rng);
    const Tensor ts = gradcheck::uniform({n, c, 1, hw}, rng), tt = gradcheck::uniform({n, c, 1, hw}, rng);
    const Tensor mask = binary_mask({n, 1, 1, hw}, rng);
    Graph g;
    Var pose = loss_pose(g.input(pred, true), g.constant(target));
    Var inter = loss_inter(tap_of(g.constant(tt)), tap_of(g.input(ts, true)));
    Var joint = loss_joint(inter, pose, LossWeights{100.0, 0.0});
    Var m = loss_mask(tap_of(g.input(ts, true)), mask);
    const double ref_pose = oracle::mean_sq_dist(pred.values(), target.values(), n);
    const double ref_inter = oracle::mean_sq_dist(ts.values(), tt.values(), n);
    EXPECT_NEAR(pose.value().item(), ref_pose, 1e-12 * std::max(1.0, ref_pose));
    EXPECT_NEAR(inter.value().item(), ref_inter, 1e-12 * std::max(1.0, ref_inter));
    EXPECT_NEAR(joint.value().item(), ref_inter + 100.0 * ref_pose, 1e-12 * (ref_inter + 100.0 * ref_pose));
    const double ref_mask = oracle::mask_energy(ts.values(), mask.values(), n, c, hw);
    EXPECT_NEAR(m.value().item(), ref_mask, 1e-12 * std::max(1.0, ref_mask));
  }
}

TEST(Losses, PoseLossIsZeroOnTarget) {
  Graph g;
  Tensor p({2, 6}, 0.3);
  EXPECT_EQ(loss_pose(g.constant(p), g.constant(p)).value().item(), 0.0);
}

TEST(Losses, InterGradientReachesStudentOnly) {
  Graph g;
  Var t = g.input(Tensor({1, 1, 2, 2}, 1.0), true);
  Var s = g.input(Tensor({1, 1, 2, 2}, 0.0), true);
  g.backward(loss_inter(tap_of(t), tap_of(s)));
  EXPECT_EQ(g.grad(t), nullptr);
  EXPECT_EQ(gradcheck::grad_of(g, s), (std::vector<double>(4, -2.0)));
}

TEST(Losses, ShapeMismatchesThrow) {
  Graph g;
  EXPECT_THROW(loss_pose(g.constant(Tensor({2, 6})), g.constant(Tensor({2, 3}))), ShapeError);
  EXPECT_THROW(loss_inter(tap_of(g.constant(Tensor({1, 2, 2, 2}))), tap_of(g.constant(Tensor({1, 1, 2, 2})))),
               ShapeError);
  EXPECT_THROW(loss_mask(tap_of(g.constant(Tensor({1, 2, 2, 2}))), Tensor({1, 1, 3, 3}, 1.0)), ShapeError);
}

TEST(Losses, NonBinaryMaskIsAContractViolation) {
  Graph g;
  EXPECT_THROW(loss_mask(tap_of(g.constant(Tensor({1, 1, 2, 2}))), Tensor({1, 1, 2, 2}, 0.5)), ContractViolation);
}

TEST(Losses, JointRejectsBadLambda) {
  Graph g;
  Var a = g.constant(Tensor::scalar(1.0));
  EXPECT_THROW(loss_joint(a, a, LossWeights{0.0, 0.0}), ArgumentError);
  EXPECT_THROW(loss_joint(a, a, LossWeights{1.0, 1.5}), ArgumentError);
}

TEST(Losses, MaskLossIgnoresTheHand) {
  Rng rng(5);
  Tensor a = gradcheck::uniform({2, 3, 4, 4}, rng);
  Tensor mask({2, 1, 4, 4}, 0.0);
  Graph g;
  EXPECT_EQ(loss_mask(tap_of(g.constant(a)), mask).value().item(), 0.0);
}

// Raising any activation magnitude outside the hand never lowers the loss.
TEST(Losses, MaskLossIsMonotoneInBackgroundMagnitude) {
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    Rng rng(derive_seed(2, "monotone", trial));
    Tensor a = gradcheck::uniform({2, 2, 3, 3}, rng);
    const Tensor mask = binary_mask({2, 1, 3, 3}, rng);
    auto loss = [&](const Tensor& x) {
      Graph g;
      return loss_mask(tap_of(g.constant(x)), mask).value().item();
    };
    const double before = loss(a);
    const std::size_t i = rng.below(a.numel());
    const std::size_t n = i / 18, cell = i % 9;
    a[i] *= 1.0 + rng.uniform(0.0, 2.0);
    const double after = loss(a);
    if (mask[n * 9 + cell] == 1.0) {
      EXPECT_GE(after, before);
    } else {
      EXPECT_EQ(after, before);
    }
  }
}

TEST(MaskSubset, SizeAndDeterminism) {
  std::vector<std::size_t> ids(16);
  std::iota(ids.begin(), ids.end(), 0);
  for (double p : {0.0, 0.2, 0.5, 0.8, 1.0}) {
    const auto a = select_mask_batch(ids, p, 7);
    EXPECT_EQ(a.size(), static_cast<std::size_t>(std::llround(p * 16)));
    EXPECT_EQ(a, select_mask_batch(ids, p, 7));
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), a.size());
  }
  EXPECT_NE(select_mask_batch(ids, 0.5, 7), select_mask_batch(ids, 0.5, 8));
  EXPECT_THROW(select_mask_batch(ids, 1.5, 7), ArgumentError);
}

TEST(MaskSubset, InvertFlipsPolarity) {
  const Tensor fg({1, 1, 1, 3}, std::vector<double>{1, 0, 1});
  EXPECT_EQ(invert_mask(fg).values(), (std::vector<double>{0, 1, 0}));
}

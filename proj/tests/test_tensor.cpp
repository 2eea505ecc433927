#include <gtest/gtest.h>

#include "pil/errors.hpp"
#include "pil/graph.hpp"
#include "pil/ops.hpp"
#include "pil/optim.hpp"
#include "pil/tensor.hpp"

using namespace pil;

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(t[5], 1.5);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.values(), t.values());
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, GradBufferMatchesShape) {
  Tensor t({2, 2});
  EXPECT_THROW(t.grad(), ContractViolation);
  auto g = t.ensure_grad();
  EXPECT_EQ(g.size(), t.numel());
  g[0] = 3;
  t.zero_grad();
  EXPECT_EQ(t.grad()[0], 0.0);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2}, std::vector<double>{1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(Graph, InputsPrecedeNodes) {
  Graph g;
  Var a = g.input(Tensor({2}, std::vector<double>{1, 2}), true);
  Var b = g.input(Tensor({2}, std::vector<double>{3, 4}), true);
  Var s = sum_squares(add(a, b));
  for (std::size_t id = 0; id < g.size(); ++id) {
    for (auto in : g.inputs(id)) EXPECT_LT(in, id);
  }
  EXPECT_DOUBLE_EQ(s.value().item(), 16.0 + 36.0);
}

TEST(Graph, BackwardVisitsNodesInReverseAppendOrder) {
  Graph g;
  std::vector<std::size_t> visited;
  Var x = g.input(Tensor::scalar(2.0), true);
  auto tracer = [&](Var in) {
    const std::size_t src = in.id();
    Tensor v = in.value();
    return g.record(v, {src}, [&visited, src](Graph& gr, std::span<const double> go) {
      visited.push_back(src);
      gr.grad_sink(src)[0] += go[0];
    });
  };
  Var a = tracer(x);
  Var b = tracer(a);
  Var c = tracer(b);
  g.backward(c);
  EXPECT_EQ(visited, (std::vector<std::size_t>{b.id(), a.id(), x.id()}));
}

TEST(Graph, BackwardNeedsScalar) {
  Graph g;
  Var a = g.input(Tensor({2}), true);
  EXPECT_THROW(g.backward(a), ArgumentError);
}

TEST(Graph, ParameterGradientsAccumulateIntoTensor) {
  Tensor w({2}, std::vector<double>{1.0, -2.0});
  w.set_requires_grad(true);
  for (int pass = 0; pass < 2; ++pass) {
    Graph g;
    g.backward(sum_squares(g.parameter(w)));
  }
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -8.0);
}

TEST(Graph, FrozenParameterReceivesNoGradient) {
  Tensor w({2}, std::vector<double>{1.0, 2.0});
  Tensor x({2}, std::vector<double>{3.0, 4.0});
  x.set_requires_grad(true);
  Graph g;
  g.backward(sum_squares(elementwise_mul(g.parameter(w), g.parameter(x))));
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Sgd, MomentumUpdateMatchesRecurrence) {
  Tensor p({2}, std::vector<double>{1.0, 1.0});
  p.set_requires_grad(true);
  Sgd opt({{"p", &p}}, 0.1, 0.5);
  double v0 = 0, v1 = 0, x0 = 1, x1 = 1;
  for (int step = 0; step < 4; ++step) {
    const double g0 = 2 * x0, g1 = 0.5;
    p.ensure_grad()[0] = g0;
    p.ensure_grad()[1] = g1;
    opt.step();
    v0 = 0.5 * v0 + g0;
    v1 = 0.5 * v1 + g1;
    x0 -= 0.1 * v0;
    x1 -= 0.1 * v1;
    EXPECT_DOUBLE_EQ(p[0], x0);
    EXPECT_DOUBLE_EQ(p[1], x1);
    EXPECT_EQ(p.grad()[0], 0.0);
  }
}

TEST(Sgd, FrozenParametersHaveNoStateAndStayPut) {
  Tensor live({1}, 1.0), frozen({1}, 1.0);
  live.set_requires_grad(true);
  Sgd opt({{"live", &live}, {"frozen", &frozen}}, 0.1);
  EXPECT_EQ(opt.tracked_count(), 1u);
  EXPECT_FALSE(opt.tracks(&frozen));
  live.ensure_grad()[0] = 1.0;
  opt.step();
  EXPECT_EQ(frozen[0], 1.0);
  EXPECT_NE(live[0], 1.0);
}

TEST(Sgd, MissingGradientIsAContractViolation) {
  Tensor p({1}, 1.0);
  p.set_requires_grad(true);
  Sgd opt({{"p", &p}}, 0.1);
  EXPECT_THROW(opt.step(), ContractViolation);
  EXPECT_THROW(Sgd({{"p", &p}}, -1.0), ArgumentError);
  EXPECT_THROW(Sgd({{"p", &p}}, 0.1, 1.0), ArgumentError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "helpers.hpp"
#include "mosguard/adam.hpp"
#include "mosguard/autodiff.hpp"
#include "mosguard/finite_diff.hpp"

using namespace mosguard;
namespace ts = testing_support;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{2, 0}), dimension_error);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), dimension_error);
  EXPECT_THROW(Tensor::vector({1.0, 2.0}).item(), contract_error);
}

TEST(Autodiff, TanhAtZero) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor::scalar(0.0));
  const auto y = ad::tanh(x);
  EXPECT_EQ(y.value().item(), 0.0);
  EXPECT_EQ(tape.backward(y)[x].item(), 1.0);
}

TEST(Autodiff, L1NormSignGradient) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor::vector({3.0, -4.0, 0.0}));
  const auto y = ad::l1_norm(x);
  EXPECT_EQ(y.value().item(), 7.0);
  const auto g = tape.backward(y)[x];
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1], -1.0);
  EXPECT_EQ(g[2], 0.0);
}

TEST(Autodiff, ComplexModulusTriangle) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor(Shape{1, 2}, {3.0, 4.0}));
  const auto y = ad::sum(ad::complex_modulus(x));
  EXPECT_DOUBLE_EQ(y.value().item(), 5.0);
  const auto g = tape.backward(y)[x];
  EXPECT_DOUBLE_EQ(g[0], 0.6);
  EXPECT_DOUBLE_EQ(g[1], 0.8);
}

TEST(Autodiff, ComplexModulusAtOriginHasZeroGradient) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor(Shape{1, 2}, 0.0));
  const auto g = tape.backward(ad::sum(ad::complex_modulus(x)))[x];
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(Autodiff, ProductRule) {
  ad::Tape tape;
  const auto a = tape.leaf(Tensor::scalar(2.0));
  const auto b = tape.leaf(Tensor::scalar(3.0));
  const auto g = tape.backward(ad::mul(a, b));
  EXPECT_EQ(g[a].item(), 3.0);
  EXPECT_EQ(g[b].item(), 2.0);
}

TEST(Autodiff, SumTanhAtZeroIsOnes) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor(Shape{5}, 0.0));
  const auto g = tape.backward(ad::sum(ad::tanh(x)))[x];
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, NonScalarSeedIsContractError) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(ad::tanh(x)), contract_error);
}

TEST(Autodiff, LogOfNonPositiveIsDomainError) {
  ad::Tape tape;
  EXPECT_THROW(ad::log(tape.leaf(Tensor::vector({1.0, 0.0}))), domain_error);
  EXPECT_THROW(ad::log(tape.leaf(Tensor::vector({-1.0}))), domain_error);
}

TEST(Autodiff, ShapeMismatchIsDimensionError) {
  ad::Tape tape;
  const auto a = tape.leaf(Tensor(Shape{2}));
  const auto b = tape.leaf(Tensor(Shape{3}));
  EXPECT_THROW(ad::add(a, b), dimension_error);
  EXPECT_THROW(ad::matmul(tape.leaf(Tensor(Shape{2, 3})), tape.leaf(Tensor(Shape{2, 3}))), dimension_error);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  ad::Tape tape;
  const auto c = tape.constant(Tensor::vector({1.0, 2.0}));
  const auto x = tape.leaf(Tensor::vector({0.5, 0.5}));
  const auto g = tape.backward(ad::sum(ad::mul(c, x)));
  EXPECT_FALSE(g.has(c));
  EXPECT_EQ(g[x][1], 2.0);
}

TEST(Autodiff, UnusedLeafGetsZeros) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor::vector({1.0}));
  const auto y = tape.leaf(Tensor::vector({1.0, 2.0}));
  const auto g = tape.backward(ad::sum(x));
  EXPECT_EQ(g[y], Tensor(Shape{2}, 0.0));
}

class PrimitiveGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const auto prim = gradcheck::primitives()[GetParam()];
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(derive_seed(seed, GetParam()));
    const auto outcome = gradcheck::check(prim.build, prim.inputs(rng), seed, 1e-4);
    ASSERT_TRUE(outcome.ok) << prim.name << " seed " << seed << " worst relative error " << outcome.worst_rel;
  }
}

INSTANTIATE_TEST_SUITE_P(Engine, PrimitiveGradients, ::testing::Range<std::size_t>(0, gradcheck::primitives().size()),
                         [](const auto& info) { return gradcheck::primitives()[info.param].name; });

TEST(Autodiff, RandomCompositionMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> in{gradcheck::uniform({4}, rng, -1, 1), gradcheck::uniform({5, 4}, rng, -1, 1),
                           gradcheck::uniform({5}, rng, -1, 1), gradcheck::uniform({3, 5}, rng, -1, 1),
                           gradcheck::uniform({3}, rng, -1, 1)};
    const gradcheck::Builder net = [](ad::Tape&, const std::vector<ad::Var>& v) {
      const auto h1 = ad::tanh(ad::dense(v[0], v[1], v[2]));
      const auto h2 = ad::dense(h1, v[3], v[4]);
      return ad::l2_norm_sq(ad::tanh(h2));
    };
    const auto outcome = gradcheck::check(net, in, seed, 1e-4);
    EXPECT_TRUE(outcome.ok) << "seed " << seed << " worst " << outcome.worst_rel;
  }
}

TEST(Autodiff, GradientIsLinear) {
  const Tensor x0 = ts::random_tensor({6}, 3);
  const auto grad_of = [&](double alpha, double beta) {
    ad::Tape tape;
    const auto x = tape.leaf(x0);
    const auto f = ad::sum(ad::tanh(x));
    const auto g = ad::l2_norm_sq(x);
    return tape.backward(ad::add(ad::scale(f, alpha), ad::scale(g, beta)))[x];
  };
  const auto gf = grad_of(1.0, 0.0), gg = grad_of(0.0, 1.0), combo = grad_of(0.7, -1.3);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(combo[i], 0.7 * gf[i] - 1.3 * gg[i], 1e-14);
}

TEST(Autodiff, BackwardIsDeterministic) {
  const Tensor x0 = ts::random_tensor({2, 6, 6}, 9);
  const Tensor w0 = ts::random_tensor({3, 2, 3, 3}, 10);
  const auto run = [&] {
    ad::Tape tape;
    const auto x = tape.leaf(x0);
    const auto w = tape.leaf(w0);
    const auto b = tape.constant(Tensor(Shape{3}, 0.1));
    const auto y = ad::sum(ad::mean_pool2d(ad::relu(ad::conv2d(x, w, b, 1))));
    const auto g = tape.backward(y);
    return std::pair{g[x], g[w]};
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, NonFiniteValuesAreRejected) {
  ad::Tape tape;
  const auto x = tape.leaf(Tensor::scalar(1e300));
  EXPECT_THROW(ad::mul(x, x), numeric_error);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState state(Shape{1}, {0.1});
  Tensor w = Tensor::scalar(1.0);
  adam_step(state, w, Tensor::scalar(2.0 * w[0]));
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
  EXPECT_EQ(state.step_count(), 1);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  AdamState state(Shape{3}, {0.5});
  Tensor w = Tensor::vector({1.0, -2.0, 3.0});
  const Tensor before = w;
  adam_step(state, w, Tensor(Shape{3}, 0.0));
  EXPECT_EQ(w, before);
  EXPECT_EQ(state.step_count(), 1);
}

TEST(Adam, MatchesScalarRecurrence) {
  AdamState state(Shape{1}, {0.1});
  Tensor w = Tensor::scalar(0.0);
  double ref = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * (ref - 2.0);
    m = 0.9 * m + (1.0 - 0.9) * g;
    v = 0.999 * v + (1.0 - 0.999) * g * g;
    ref -= 0.1 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
    adam_step(state, w, Tensor::scalar(2.0 * (w[0] - 2.0)));
    ASSERT_NEAR(w[0], ref, 1e-12) << "step " << t;
  }
  EXPECT_LT(std::abs(w[0] - 2.0), 0.05);
  for (double vv : state.second_moment()) EXPECT_GE(vv, 0.0);
}

TEST(Adam, ShapeMismatch) {
  AdamState state(Shape{2});
  Tensor w(Shape{2});
  EXPECT_THROW(adam_step(state, w, Tensor(Shape{3})), dimension_error);
}

TEST(FiniteDiff, QuadraticAndConstant) {
  const auto g = finite_diff_grad([](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; }, Tensor::vector({1.0, 2.0}));
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  const auto c = finite_diff_grad([](const Tensor&) { return 3.0; }, Tensor::vector({1.0, 2.0}));
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);
}

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "sala/gradcheck.hpp"
#include "sala/ops.hpp"

using namespace sala;

namespace {

Tensor make(Shape s, std::vector<float> v) { return Tensor(std::move(s), std::move(v)); }

}  // namespace

TEST(Tensor, LengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  Tensor t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Linear, IdentityWeight) {
  Tape tape;
  auto y = ops::linear(tape.constant(make({1, 2}, {1, 2})), tape.constant(make({2, 2}, {1, 0, 0, 1})),
                       tape.constant(make({2}, {0, 0})));
  EXPECT_EQ(y.value(), make({1, 2}, {1, 2}));
}

TEST(Linear, ZeroWeightGivesBias) {
  Tape tape;
  auto y = ops::linear(tape.constant(make({1, 2}, {1, 2})), tape.constant(make({2, 2}, {0, 0, 0, 0})),
                       tape.constant(make({2}, {3, 4})));
  EXPECT_EQ(y.value(), make({1, 2}, {3, 4}));
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    ops::linear(tape.constant(Tensor(Shape{4, 3})), tape.constant(Tensor(Shape{2, 5})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(4,3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2,5)"), std::string::npos) << msg;
  }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto fn = [](TapeD&, std::span<const VarD> in) { return ops::linear(in[0], in[1], in[2]); };
    const auto r = gradcheck(fn, {random_tensor({6, 4}, seed), random_tensor({4, 3}, seed + 100),
                                  random_tensor({3}, seed + 200)},
                             {.eps = 1e-3, .seed = seed});
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_EQ(r.checked, 24u + 12u + 3u);
  }
}

TEST(Softmax, EqualLogitsAreUniform) {
  Tape tape;
  auto y = ops::softmax_lastdim(tape.constant(make({1, 2}, {0, 0})));
  EXPECT_EQ(y.value(), make({1, 2}, {0.5f, 0.5f}));
}

TEST(Softmax, SingleColumnIsOne) {
  Tape tape;
  auto y = ops::softmax_lastdim(tape.constant(make({3, 1}, {-7.5f, 0.0f, 123.0f})));
  for (float v : y.value().storage()) EXPECT_EQ(v, 1.0f);
}

TEST(Softmax, LargeLogitsStayFinite) {
  // exp(-1000) is about 5e-435, far below the smallest subnormal double.
  TapeD tape;
  auto y = ops::softmax_lastdim(tape.constant(TensorD({1, 2}, {1000.0, 0.0})));
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_EQ(y.value()[1], 0.0);
  Tape tf;
  auto yf = ops::softmax_lastdim(tf.constant(make({1, 2}, {1000.0f, 0.0f})));
  EXPECT_EQ(yf.value()[0], 1.0f);
  EXPECT_TRUE(yf.value().all_finite());
}

TEST(MaxReduce, PicksLargestAndReportsSlot) {
  Tape tape;
  const std::vector<std::uint8_t> mask{1, 1, 1};
  auto r = ops::max_reduce_neighbors(tape.constant(make({1, 3, 1}, {1, 3, 2})), mask);
  EXPECT_EQ(r.out.value(), make({1, 1}, {3}));
  ASSERT_EQ(r.argmax.size(), 1u);
  EXPECT_EQ(r.argmax[0], 1u);
}

TEST(MaxReduce, SingleNeighborIsIdentity) {
  Tape tape;
  const std::vector<std::uint8_t> mask{1, 1};
  auto r = ops::max_reduce_neighbors(tape.constant(make({2, 1, 3}, {1, -2, 3, 4, 5, -6})), mask);
  EXPECT_EQ(r.out.value(), make({2, 3}, {1, -2, 3, 4, 5, -6}));
}

TEST(MaxReduce, AllMaskedCenterThrowsWithIndex) {
  Tape tape;
  const std::vector<std::uint8_t> mask{1, 1, 0, 0};
  try {
    ops::max_reduce_neighbors(tape.constant(Tensor(Shape{2, 2, 1})), mask);
    FAIL() << "expected EmptyNeighborhoodError";
  } catch (const EmptyNeighborhoodError& e) {
    EXPECT_EQ(e.center(), 1u);
  }
}

TEST(MaxReduce, GradientIsOneHotScatter) {
  TapeD tape;
  const TensorD x = random_tensor({3, 4, 2}, 11);
  const std::vector<std::uint8_t> mask(12, 1);
  auto xv = tape.variable(x);
  auto r = ops::max_reduce_neighbors(xv, mask);
  const TensorD up = random_tensor({3, 2}, 12);
  tape.backward(r.out, up);
  const TensorD& g = *tape.grad(xv);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 4; ++j)
        if (x(n, j, c) > x(n, best, c)) best = j;
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g(n, j, c), j == best ? up(n, c) : 0.0);
    }
  auto fn = [&](TapeD&, std::span<const VarD> in) { return ops::max_reduce_neighbors(in[0], mask).out; };
  EXPECT_LT(gradcheck(fn, {x}).max_rel_error, 1e-6);
}

TEST(SumReduce, OrderFollowsKeys) {
  // Same multiset of slot values in different slot order: identical bits.
  Tape tape;
  const std::vector<std::uint8_t> mask{1, 1, 1};
  const std::vector<std::int32_t> k1{5, 9, 2}, k2{9, 2, 5};
  auto a = ops::sum_reduce_neighbors(tape.constant(make({1, 3, 1}, {0.1f, 1e8f, -1e8f})), mask, k1);
  auto b = ops::sum_reduce_neighbors(tape.constant(make({1, 3, 1}, {1e8f, -1e8f, 0.1f})), mask, k2);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Plumbing, ConcatGatherScatterGradients) {
  const std::vector<std::int32_t> idx{2, 0, 2, 1, 0};
  auto concat = [](TapeD&, std::span<const VarD> in) { return ops::concat_lastdim(in[0], in[1]); };
  EXPECT_LT(gradcheck(concat, {random_tensor({3, 2}, 1), random_tensor({3, 4}, 2)}).max_rel_error, 1e-8);
  auto gather = [&](TapeD&, std::span<const VarD> in) { return ops::gather_rows(in[0], idx, {5}); };
  EXPECT_LT(gradcheck(gather, {random_tensor({3, 2}, 3)}).max_rel_error, 1e-8);
  auto scatter = [&](TapeD&, std::span<const VarD> in) { return ops::scatter_mean(in[0], idx, 4); };
  EXPECT_LT(gradcheck(scatter, {random_tensor({5, 2}, 4)}).max_rel_error, 1e-8);
  TapeD tape;
  auto m = ops::scatter_mean(tape.constant(TensorD({3, 1}, {1.0, 2.0, 6.0})), std::vector<std::int32_t>{0, 0, 2}, 3);
  EXPECT_EQ(m.value(), TensorD({3, 1}, {1.5, 0.0, 6.0}));
}

TEST(Relu, ForwardAndGradient) {
  TapeD tape;
  auto x = tape.variable(TensorD({4}, {-1.0, 0.5, 2.0, -3.0}));
  auto y = ops::relu(x);
  EXPECT_EQ(y.value(), TensorD({4}, {0.0, 0.5, 2.0, 0.0}));
  tape.backward(ops::sum_all(y));
  EXPECT_EQ(*tape.grad(x), TensorD({4}, {0.0, 1.0, 1.0, 0.0}));
}

TEST(BatchNorm, TrainingUsesBatchStatsAndDefersUpdate) {
  TapeD tape(true);
  ops::RunningStats<double> stats(1);
  auto y = ops::batch_norm(tape.variable(TensorD({4, 1}, {1.0, 2.0, 3.0, 4.0})), tape.constant(TensorD({1}, {1.0})),
                           tape.constant(TensorD({1}, {0.0})), stats);
  double mean = 0.0, sq = 0.0;
  for (double v : y.value().storage()) mean += v / 4.0, sq += v * v / 4.0;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(sq, 1.0, 1e-4);
  EXPECT_EQ(stats.mean[0], 0.0);
  tape.commit();
  EXPECT_EQ(stats.mean[0], 2.5);  // first update is a plain average
  EXPECT_EQ(stats.updates, 1u);
}

TEST(BatchNorm, EvalUsesRunningStats) {
  TapeD tape(false);
  ops::RunningStats<double> stats(1);
  stats.mean[0] = 1.0;
  stats.var[0] = 4.0;
  auto y = ops::batch_norm(tape.constant(TensorD({2, 1}, {1.0, 3.0})), tape.constant(TensorD({1}, {2.0})),
                           tape.constant(TensorD({1}, {0.5})), stats, {.momentum = 0.99, .eps = 0.0});
  EXPECT_EQ(y.value(), TensorD({2, 1}, {0.5, 2.5}));
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Tape tape;
  const std::vector<std::uint32_t> labels{0, 3};
  auto l = ops::softmax_cross_entropy(tape.constant(Tensor(Shape{2, 4})), labels);
  EXPECT_NEAR(l.value()[0], std::log(4.0), 1e-6);
}

TEST(CrossEntropy, ConfidentCorrectLogitsNearZero) {
  TapeD tape;
  const std::vector<std::uint32_t> labels{1, 0};
  auto l = ops::softmax_cross_entropy(tape.constant(TensorD({2, 2}, {-20.0, 20.0, 20.0, -20.0})), labels);
  EXPECT_LT(l.value()[0], 1e-8);
}

TEST(CrossEntropy, EmptyBatchAndBadLabelThrow) {
  Tape tape;
  EXPECT_THROW(ops::softmax_cross_entropy(tape.constant(Tensor(Shape{0, 3})), {}), ValidationError);
  const std::vector<std::uint32_t> bad{3};
  EXPECT_THROW(ops::softmax_cross_entropy(tape.constant(Tensor(Shape{1, 3})), bad), ValidationError);
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape tape;
  auto x = tape.variable(Tensor(Shape{2}));
  EXPECT_THROW(tape.backward(x), DimensionError);
}

TEST(Tape, GradientsMatchShapesOfReachableLeaves) {
  TapeD tape;
  auto a = tape.variable(random_tensor({3, 2}, 1));
  auto w = tape.variable(random_tensor({2, 5}, 2));
  auto unused = tape.variable(random_tensor({7}, 3));
  auto loss = ops::sum_all(ops::relu(ops::linear(a, w)));
  tape.backward(loss);
  ASSERT_NE(tape.grad(a), nullptr);
  EXPECT_EQ(tape.grad(a)->shape(), a.shape());
  EXPECT_EQ(tape.grad(w)->shape(), w.shape());
  EXPECT_EQ(tape.grad(unused), nullptr);
}

TEST(Tape, ParameterGradientsAccumulate) {
  TapeD tape;
  Parameter<double> p("w", TensorD({2}, {1.0, 2.0}));
  auto v = tape.parameter(p);
  EXPECT_EQ(tape.parameter(p).id(), v.id());
  tape.backward(ops::squared_norm(v));
  tape.accumulate_parameter_grads();
  EXPECT_EQ(p.grad, TensorD({2}, {2.0, 4.0}));
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // A backward rule that is off by a factor of two must be caught.
  auto fn = [](TapeD& tape, std::span<const VarD> in) {
    TensorD v = in[0].value();
    for (auto& x : v.storage()) x = x * x;
    return tape.record(v, {in[0]}, [x = in[0]](TapeD& t, const TensorD& g) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 4.0 * x.value()[i] * g[i];
    });
  };
  EXPECT_GT(gradcheck(fn, {random_tensor({5}, 9)}).max_rel_error, 0.3);
}

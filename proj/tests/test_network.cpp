#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sala/checkpoint.hpp"
#include "sala/cost.hpp"
#include "sala/gradcheck_suite.hpp"
#include "sala/network.hpp"

using namespace sala;

namespace {

NetworkSpec small_spec(std::size_t width = 8, std::size_t classes = 3) {
  NetworkSpec s;
  s.width = width;
  s.stages = 3;
  s.blocks_per_stage = {1, 2, 1};
  s.num_classes = classes;
  return s;
}

GeometrySpec small_geo() { return {.base_grid = 0.1, .base_radius = 0.25, .k_max = 8}; }

PointCloud scene(std::size_t n, std::uint64_t seed) { return oracle::random_cloud(n, seed, 1.5, 5); }

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("sala_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(NetworkSpec, WidthsDoublePerStage) {
  NetworkSpec s;
  for (std::size_t l = 0; l < 5; ++l) EXPECT_EQ(s.stage_width(l), 36u << l);
  std::size_t last_level = 0;
  for (const auto& [level, block] : s.encoder_blocks()) {
    EXPECT_EQ(block.out_ch, s.stage_width(level));
    EXPECT_EQ(block.kind == BlockKind::StridedResidual, level != last_level);
    last_level = level;
  }
  s.width = 7;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(ResidualBlock, ZeroAggregationIsIdentity) {
  NetworkSpec net = small_spec();
  ParameterSet<double> params;
  std::mt19937_64 rng(1);
  ResidualBlock<double> block(params, "b", {BlockKind::Residual, 8, 8, 2}, net, AggregatorConfig{}, rng);
  block.aggregator().weights().feat_group->value.fill(0.0);
  block.aggregator().weights().pos_group->value.fill(0.0);
  auto c = scene(60, 2);
  auto nbr = ball_query(c, c, 0.3, {.k_max = 8});
  auto rel = relative_positions<double>(c, c, nbr);
  TapeD tape(false);
  const TensorD x = random_tensor({60, 8}, 3);
  auto y = block(tape.constant(x), nbr, rel);
  EXPECT_EQ(y.value(), x);
}

TEST(ResidualBlock, ShapesAndLevelMismatch) {
  NetworkSpec net = small_spec();
  ParameterSet<float> params;
  std::mt19937_64 rng(1);
  ResidualBlock<float> block(params, "b", {BlockKind::Residual, 8, 16, 2}, net, AggregatorConfig{}, rng);
  auto c = scene(40, 4);
  auto nbr = ball_query(c, c, 0.3, {.k_max = 8});
  auto rel = relative_positions<float>(c, c, nbr);
  Tape tape(false);
  EXPECT_EQ(block(tape.constant(Tensor(Shape{40, 8})), nbr, rel).shape(), (Shape{40, 16}));
  EXPECT_THROW(block(tape.constant(Tensor(Shape{39, 8})), nbr, rel), DimensionError);
}

TEST(StridedBlock, SelfOnlyNeighborhoodsMatchResidualBlock) {
  NetworkSpec net = small_spec();
  ParameterSet<double> pa, pb;
  std::mt19937_64 ra(5), rb(5);
  ResidualBlock<double> plain(pa, "b", {BlockKind::Residual, 8, 8, 2}, net, AggregatorConfig{}, ra);
  ResidualBlock<double> strided(pb, "b", {BlockKind::StridedResidual, 8, 8, 2}, net, AggregatorConfig{}, rb);
  auto c = scene(30, 6);
  auto nbr = ball_query(c, c, 1e-4, {.k_max = 4});
  auto rel = relative_positions<double>(c, c, nbr);
  TapeD tape(false);
  const TensorD x = random_tensor({30, 8}, 7);
  EXPECT_EQ(plain(tape.constant(x), nbr, rel).value(), strided(tape.constant(x), nbr, rel).value());
}

TEST(StridedBlock, OutputRowsFollowCoarseLevel) {
  NetworkSpec net = small_spec();
  ParameterSet<float> params;
  std::mt19937_64 rng(1);
  ResidualBlock<float> block(params, "b", {BlockKind::StridedResidual, 8, 16, 2}, net, AggregatorConfig{}, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = scene(300, seed);
    auto pyr = build_pyramid(c, 0.1, 0.25, 2);
    auto coarse_ref = oracle::grid_subsample(oracle::grid_subsample(c, 0.1), 0.2);
    auto nbr = ball_query(pyr[1].cloud, pyr[0].cloud, 0.5, {.k_max = 8});
    auto rel = relative_positions<float>(pyr[1].cloud, pyr[0].cloud, nbr);
    Tape tape(false);
    auto y = block(tape.constant(Tensor(Shape{pyr[0].cloud.size(), 8}, 0.5f)), nbr, rel);
    EXPECT_EQ(y.value().rows(), coarse_ref.size());
  }
  PointCloud one;
  one.positions = {{0.5f, 0.5f, 0.5f}};
  auto fine = scene(20, 9);
  auto nbr = ball_query(one, fine, 5.0, {.k_max = 8});
  Tape tape(false);
  auto y = block(tape.constant(Tensor(Shape{20, 8}, 1.0f)), nbr, relative_positions<float>(one, fine, nbr));
  EXPECT_EQ(y.shape(), (Shape{1, 16}));
}

TEST(Blocks, GradientsMatchFiniteDifferences) {
  SuiteOptions o;
  o.seeds = 3;
  o.only = {"residual-block", "strided-block"};
  for (const auto& r : run_gradcheck_suite(o)) EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
}

TEST(SalaNet, OneLogitRowPerInputPoint) {
  NetworkSpec s = small_spec(8, 1);
  SalaNet<float> net(s, AggregatorConfig{}, 1);
  auto c = scene(400, 1);
  Tape tape(false);
  auto logits = net.forward(tape, prepare_input(c, small_geo(), s.stages));
  EXPECT_EQ(logits.shape(), (Shape{400, 1}));
}

TEST(SalaNet, SingleLevelDecodeIsOneUnary) {
  NetworkSpec s = small_spec();
  s.stages = 1;
  s.blocks_per_stage = {1};
  SalaNet<float> net(s, AggregatorConfig{}, 1);
  auto in = prepare_input(scene(100, 2), small_geo(), 1);
  Tape tape(false);
  auto enc = net.encode(tape, in);
  ASSERT_EQ(enc.size(), 1u);
  auto dec = net.decode(enc, in);
  EXPECT_EQ(dec.shape(), (Shape{in.levels[0].cloud.size(), 8}));
  // The last stats entry belongs to the final unary.
  auto& P = net.parameters();
  auto direct = ops::leaky_relu(
      ops::batch_norm(ops::linear(enc[0], tape.parameter(P.at("final.weight"))), tape.parameter(P.at("final.bn.gamma")),
                      tape.parameter(P.at("final.bn.beta")), *P.all_stats().back()),
      0.1f);
  EXPECT_EQ(dec.value(), direct.value());
}

TEST(SalaNet, GradientReachesEveryParameter) {
  NetworkSpec s = small_spec();
  SalaNet<double> net(s, AggregatorConfig{}, 3);
  auto c = scene(500, 3);
  TapeD tape(true);
  auto logits = net.forward(tape, prepare_input(c, small_geo(), s.stages));
  tape.backward(ops::softmax_cross_entropy(logits, *c.labels));
  tape.accumulate_parameter_grads();
  for (auto* p : net.parameters().parameters()) {
    double norm = 0.0;
    for (double g : p->grad.storage()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(SalaNet, InputPermutationPermutesLogits) {
  NetworkSpec s = small_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 4);
  auto c = scene(600, 5);
  std::vector<std::int32_t> perm(c.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(6));
  auto shuffled = c.subset(perm);
  Tape ta(false), tb(false);
  auto a = net.forward(ta, prepare_input(c, small_geo(), s.stages)).value();
  auto b = net.forward(tb, prepare_input(shuffled, small_geo(), s.stages)).value();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b(i, k), a(std::size_t(perm[i]), k), 1e-4);
}

TEST(SalaNet, FeatureWidthMismatchIsConfigError) {
  NetworkSpec s = small_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 1);
  auto c = oracle::random_cloud(100, 1, 1.5, 4);
  Tape tape(false);
  EXPECT_THROW(net.forward(tape, prepare_input(c, small_geo(), s.stages)), ConfigError);
}

TEST(SalaNet, UniformPredictionWithZeroWeights) {
  NetworkSpec s = small_spec(8, 4);
  SalaNet<double> net(s, AggregatorConfig{}, 1);
  for (auto* p : net.parameters().parameters())
    if (p->name.find(".bn.") == std::string::npos) p->value.fill(0.0);
  net.parameters().at("head.bias").value = TensorD({4}, {0.3, 0.3, 0.3, 0.3});
  auto c = scene(200, 7);
  TapeD tape(true);
  auto logits = net.forward(tape, prepare_input(c, small_geo(), s.stages));
  auto ce = ops::softmax_cross_entropy(logits, std::vector<std::uint32_t>(200, 2));
  EXPECT_NEAR(ce.value()[0], std::log(4.0), 1e-5);
}

TEST(SalaNet, FullSizeBuildsAndRuns) {
  NetworkSpec s;
  AggregatorConfig agg;
  SalaNet<float> net(s, agg, 1);
  EXPECT_EQ(net.parameters().scalar_count(), count_params(s, agg).params);
  auto c = scene(1000, 8);
  Tape tape(false);
  auto logits = net.forward(tape, prepare_input(c, GeometrySpec{}, s.stages));
  EXPECT_EQ(logits.shape(), (Shape{1000, 13}));
  EXPECT_TRUE(logits.value().all_finite());
}

TEST(SalaNet, PerPointHeadsMatchSingleHeadPasses) {
  NetworkSpec s = small_spec();
  s.num_heads = 3;
  SalaNet<float> net(s, AggregatorConfig{}, 2);
  auto in = prepare_input(scene(300, 9), small_geo(), s.stages);
  std::vector<std::size_t> heads(in.input_map.size());
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i] = i % 3;
  Tape t(false);
  auto mixed = net.forward(t, in, heads).value();
  for (std::size_t h = 0; h < 3; ++h) {
    Tape th(false);
    auto one = net.forward(th, in, h).value();
    for (std::size_t i = h; i < heads.size(); i += 3)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(mixed(i, k), one(i, k));
  }
  Tape bad(false);
  EXPECT_THROW(net.forward(bad, in, 3), ConfigError);
}

TEST(SalaNet, StackedInputsMatchSeparatePasses) {
  NetworkSpec s = small_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 3);
  std::vector<PreparedInput> parts{prepare_input(scene(250, 10), small_geo(), 3),
                                   prepare_input(scene(310, 11), small_geo(), 3)};
  Tape t(false);
  auto stacked = net.forward(t, stack_inputs(parts)).value();
  std::size_t row = 0;
  for (const auto& p : parts) {
    Tape tp(false);
    auto one = net.forward(tp, p).value();
    for (std::size_t i = 0; i < one.rows(); ++i, ++row)
      for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(stacked(row, k), one(i, k));
  }
  EXPECT_EQ(row, stacked.rows());
}

TEST(SalaNet, CheckpointRoundTrip) {
  const auto dir = temp_dir("ckpt");
  NetworkSpec s = small_spec();
  SalaNet<float> a(s, AggregatorConfig{}, 1), b(s, AggregatorConfig{}, 2);
  auto in = prepare_input(scene(200, 12), small_geo(), 3);
  {
    Tape warm(true);  // move the running statistics off their defaults
    a.forward(warm, in);
    warm.commit();
  }
  a.save(dir / "m.salaw");
  b.load(dir / "m.salaw");
  Tape ta(false), tb(false);
  EXPECT_EQ(a.forward(ta, in).value(), b.forward(tb, in).value());
  std::size_t serialized = 0;
  for (const auto& t : read_checkpoint(dir / "m.salaw")) serialized += t.tensor.size();
  EXPECT_EQ(serialized, count_params(s, AggregatorConfig{}).params);
  SalaNet<float> other(small_spec(16), AggregatorConfig{}, 1);
  EXPECT_ANY_THROW(other.load(dir / "m.salaw"));
  std::filesystem::remove_all(dir);
}

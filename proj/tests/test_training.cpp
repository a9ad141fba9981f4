#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sala/gradcheck_suite.hpp"
#include "sala/synthetic.hpp"
#include "sala/training.hpp"

using namespace sala;

namespace {

NetworkSpec tiny_spec(std::size_t classes = 3) {
  NetworkSpec s;
  s.width = 8;
  s.stages = 3;
  s.blocks_per_stage = {1, 1, 1};
  s.num_classes = classes;
  return s;
}

GeometrySpec tiny_geo() { return {.base_grid = 0.1, .base_radius = 0.25, .k_max = 8}; }

PointCloud lifted(std::size_t n, std::uint64_t seed, double extent = 1.5) {
  return lift_features(oracle::random_cloud(n, seed, extent, 3), FeatureRecipe::ZRGB1);
}

double pair_dist(const PointCloud& c, std::size_t a, std::size_t b) { return std::sqrt(oracle::dist2(c.positions[a], c.positions[b])); }

// Two slabs of points on a 0.25 m lattice, class = which slab. Every
// point is alone in its cell at all three pyramid levels of lattice_geo(),
// and recentering on a lattice point is exact, so each training step sees
// the same input.
Sample slab_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  PointCloud c;
  c.feat_dim = 3;
  std::vector<std::uint32_t> labels;
  for (std::uint32_t cls = 0; cls < 2; ++cls)
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y) {
        c.positions.push_back({0.25f * float(x), 0.25f * float(y), cls ? 1.0f : 0.0f});
        c.features.insert(c.features.end(), {float(0.5 + 0.4 * cls + u(rng)), 0.5f, float(0.9 - 0.4 * cls + u(rng))});
        labels.push_back(cls);
      }
  c.labels = labels;
  return {lift_features(c, FeatureRecipe::ZRGB1), 0};
}

GeometrySpec lattice_geo() { return {.base_grid = 0.0625, .base_radius = 0.3, .k_max = 8}; }

TrainConfig quiet_config() {
  TrainConfig cfg;
  cfg.aug = {.rot_z = false, .scale_lo = 1.0, .scale_hi = 1.0, .jitter_sigma = 0.0, .color_drop_p = 0.0};
  cfg.sphere_radius = 100.0;
  cfg.batch_size = 1;
  cfg.steps_per_epoch = 1;
  cfg.min_sphere_points = 1;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(Recipes, FeatureWidthsAndColumns) {
  EXPECT_EQ(recipe_dims(FeatureRecipe::ZRGB1), 5u);
  EXPECT_EQ(recipe_dims(FeatureRecipe::RGB1), 4u);
  EXPECT_EQ(recipe_dims(FeatureRecipe::XYZ1), 4u);
  auto raw = oracle::random_cloud(3, 1, 1.0, 3);
  auto z = lift_features(raw, FeatureRecipe::ZRGB1);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(z.feature_row(i)[0], raw.positions[i][2]);
    EXPECT_EQ(z.feature_row(i)[1], raw.feature_row(i)[0]);
    EXPECT_EQ(z.feature_row(i)[4], 1.0f);
  }
  EXPECT_EQ(parse_recipe(recipe_name(FeatureRecipe::RGB1)), FeatureRecipe::RGB1);
}

TEST(Loss, UniformLogitsGiveLogClasses) {
  ParameterSet<double> none;
  TapeD tape;
  auto l = training_loss(tape.constant(TensorD({3, 4})), std::vector<std::uint32_t>{0, 1, 3}, none, 0.0);
  EXPECT_NEAR(l.value()[0], std::log(4.0), 1e-12);
}

TEST(Loss, WeightDecayAddsSquaredNorm) {
  ParameterSet<double> params;
  params.add("w", TensorD({2}, {1.0, 2.0}));
  params.add("bn.gamma", TensorD({1}, {3.0}), false);
  TapeD tape;
  auto l = training_loss(tape.constant(TensorD({1, 2}, {20.0, -20.0})), std::vector<std::uint32_t>{0}, params, 0.1);
  EXPECT_NEAR(l.value()[0], 0.5, 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  SuiteOptions o;
  o.seeds = 5;
  o.only = {"loss"};
  const auto r = run_gradcheck_suite(o);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_TRUE(r[0].passed) << r[0].max_rel_error;
}

TEST(Augment, DisabledIsIdentity) {
  auto c = lifted(50, 2);
  std::mt19937_64 rng(1);
  auto a = augment(c, quiet_config().aug, recipe_colors(FeatureRecipe::ZRGB1), rng);
  EXPECT_EQ(a.positions, c.positions);
  EXPECT_EQ(a.features, c.features);
}

TEST(Augment, RotationIsAnIsometryAboutZ) {
  auto c = lifted(40, 3);
  AugmentConfig cfg{.rot_z = true, .scale_lo = 1.0, .scale_hi = 1.0, .jitter_sigma = 0.0, .color_drop_p = 0.0};
  std::mt19937_64 rng(2);
  auto a = augment(c, cfg, recipe_colors(FeatureRecipe::ZRGB1), rng);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(a.positions[i][2], c.positions[i][2]);
    for (std::size_t j = i + 1; j < c.size(); ++j) {
      const double d0 = std::hypot(c.positions[i][0] - c.positions[j][0], c.positions[i][1] - c.positions[j][1]);
      const double d1 = std::hypot(a.positions[i][0] - a.positions[j][0], a.positions[i][1] - a.positions[j][1]);
      EXPECT_NEAR(d0, d1, 1e-6);
    }
  }
}

TEST(Augment, ScalingScalesDistances) {
  auto c = lifted(30, 4);
  AugmentConfig cfg{.rot_z = false, .scale_lo = 1.25, .scale_hi = 1.25, .jitter_sigma = 0.0, .color_drop_p = 0.0};
  std::mt19937_64 rng(3);
  auto a = augment(c, cfg, recipe_colors(FeatureRecipe::ZRGB1), rng);
  for (std::size_t i = 0; i + 1 < c.size(); ++i) EXPECT_NEAR(pair_dist(a, i, i + 1), 1.25 * pair_dist(c, i, i + 1), 1e-6);
}

TEST(Augment, ColorDropZeroesColorsOnly) {
  auto c = lifted(20, 5);
  AugmentConfig cfg{.rot_z = false, .scale_lo = 1.0, .scale_hi = 1.0, .jitter_sigma = 0.0, .color_drop_p = 1.0};
  std::mt19937_64 rng(4);
  auto a = augment(c, cfg, recipe_colors(FeatureRecipe::ZRGB1), rng);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(a.feature_row(i)[0], c.feature_row(i)[0]);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(a.feature_row(i)[k], 0.0f);
    EXPECT_EQ(a.feature_row(i)[4], 1.0f);
  }
}

TEST(TrainingSphere, LargeRadiusKeepsWholeScene) {
  auto c = lifted(100, 6);
  std::mt19937_64 rng(5);
  auto s = sample_training_sphere(c, 10.0, rng);
  EXPECT_EQ(s.size(), c.size());
}

TEST(TrainingSphere, MembersMatchScanAroundAnchor) {
  auto c = lifted(500, 7, 3.0);
  std::mt19937_64 rng(6);
  auto s = sample_training_sphere(c, 0.8, rng, 10);
  // Recentered on the anchor: every member lies within the radius of the origin.
  for (const auto& p : s.positions) EXPECT_LE(std::hypot(p[0], p[1], p[2]), 0.8 + 1e-6);
  // The anchor lands exactly on the origin; its feature row identifies it in the scene.
  std::size_t origin = s.size();
  for (std::size_t m = 0; m < s.size(); ++m)
    if (s.positions[m] == Point3{0, 0, 0}) origin = m;
  ASSERT_LT(origin, s.size());
  std::size_t anchor = c.size();
  for (std::size_t i = 0; i < c.size(); ++i)
    if (std::equal(c.feature_row(i).begin(), c.feature_row(i).end(), s.feature_row(origin).begin())) anchor = i;
  ASSERT_LT(anchor, c.size());
  std::size_t inside = 0;
  for (std::size_t j = 0; j < c.size(); ++j) inside += oracle::dist2(c.positions[anchor], c.positions[j]) <= 0.8 * 0.8;
  EXPECT_EQ(inside, s.size());
}

TEST(TrainingSphere, TooFewPointsThrows) {
  auto c = lifted(10, 8, 100.0);
  std::mt19937_64 rng(7);
  EXPECT_THROW(sample_training_sphere(c, 0.01, rng, 5), ValidationError);
}

TEST(Miou, PerfectDiagonal) {
  ConfusionMatrix cm(3);
  for (std::uint32_t c = 0; c < 3; ++c) cm.add(c, c, 5);
  const auto r = miou(cm);
  for (double v : r.per_class) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.mean, 1.0);
}

TEST(Miou, UniformTwoByTwoIsOneThird) {
  ConfusionMatrix cm(2);
  cm.add(0, 0), cm.add(0, 1), cm.add(1, 0), cm.add(1, 1);
  const auto r = miou(cm);
  EXPECT_EQ(r.per_class[0], 1.0 / 3.0);
  EXPECT_EQ(r.per_class[1], 1.0 / 3.0);
  EXPECT_EQ(r.mean, 1.0 / 3.0);
}

TEST(Miou, AllPredictedClassZeroOnBalancedData) {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 10);
  cm.add(1, 0, 10);
  const auto r = miou(cm);
  EXPECT_EQ(r.per_class[0], 0.5);
  EXPECT_EQ(r.per_class[1], 0.0);
  EXPECT_EQ(r.mean, 0.25);
}

TEST(Miou, AbsentClassesSkippedAndEmptyThrows) {
  ConfusionMatrix cm(3);
  cm.add(std::vector<std::uint32_t>{0, 0, 1}, std::vector<std::uint32_t>{0, 0, 1});
  const auto r = miou(cm);
  EXPECT_FALSE(r.valid[2]);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_THROW(miou(ConfusionMatrix(3)), ValidationError);
}

TEST(Miou, PerCategoryMean) {
  ConfusionMatrix a(2), b(2);
  a.add(0, 0), a.add(1, 1);
  b.add(0, 0), b.add(0, 1), b.add(1, 0), b.add(1, 1);
  std::vector<ConfusionMatrix> cats{a, b};
  EXPECT_DOUBLE_EQ(mpiou(cats), (1.0 + 1.0 / 3.0) / 2.0);
  a.merge(b);
  EXPECT_EQ(a.at(0, 1), 1u);
  EXPECT_EQ(a.total(), 6u);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 100), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 50, 100), 0.05, 1e-12);
  EXPECT_NEAR(cosine_lr(0.1, 100, 100), 0.0, 1e-12);
}

TEST(Sgd, MomentumUpdate) {
  ParameterSet<float> params;
  auto& p = params.add("w", Tensor(Shape{1}, {1.0f}));
  Sgd sgd(params, 0.5);
  p.grad = Tensor(Shape{1}, {2.0f});
  sgd.step(0.1);  // v = 2, w = 0.8
  EXPECT_FLOAT_EQ(p.value[0], 0.8f);
  sgd.step(0.1);  // v = 3, w = 0.5
  EXPECT_FLOAT_EQ(p.value[0], 0.5f);
}

TEST(Voting, SphereCoveringSceneEqualsArgmax) {
  NetworkSpec s = tiny_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 1);
  auto c = lifted(400, 9);
  const auto direct = argmax_inference(c, net, tiny_geo());
  const auto voted = vote_inference(c, net, tiny_geo(), {.radius = 10.0});
  EXPECT_EQ(voted.labels, direct);
}

TEST(Voting, StrideEqualRadiusCoversTwice) {
  NetworkSpec s = tiny_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 2);
  auto c = lifted(800, 10, 3.0);
  const auto r = vote_inference(c, net, tiny_geo(), {.radius = 1.0, .stride = 1.0});
  for (auto n : r.coverage) EXPECT_GE(n, 2u);
  const auto again = vote_inference(c, net, tiny_geo(), {.radius = 1.0, .stride = 1.0});
  EXPECT_EQ(r.labels, again.labels);
  EXPECT_EQ(r.mean_logits, again.mean_logits);
}

TEST(Voting, AveragesLogitsOverCoveringSpheres) {
  NetworkSpec s = tiny_spec();
  SalaNet<float> net(s, AggregatorConfig{}, 3);
  auto c = lifted(600, 11, 3.0);
  std::vector<std::vector<std::vector<float>>> seen(c.size());
  auto observer = [&](std::span<const std::int32_t> members, const Tensor& logits) {
    for (std::size_t m = 0; m < members.size(); ++m) {
      auto row = logits.row(m);
      seen[std::size_t(members[m])].emplace_back(row.begin(), row.end());
    }
  };
  const auto r = vote_inference(c, net, tiny_geo(), {.radius = 1.0, .stride = 1.0}, observer);
  std::size_t twice = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    ASSERT_EQ(seen[i].size(), r.coverage[i]);
    twice += seen[i].size() == 2;
    for (std::size_t k = 0; k < 3; ++k) {
      double sum = 0.0;
      for (const auto& row : seen[i]) sum += row[k];
      EXPECT_NEAR(r.mean_logits(i, k), sum / double(seen[i].size()), 1e-6);
    }
  }
  EXPECT_GT(twice, 0u);
}

TEST(Voting, CentersSpanBoundingBox) {
  auto c = lifted(200, 12, 2.0);
  const auto centers = vote_centers(c, 1.0, 0.5);
  EXPECT_GE(centers.size(), 8u);
  EXPECT_TRUE(fits_one_sphere(c, 2.0));
  EXPECT_FALSE(fits_one_sphere(c, 0.5));
}

TEST(Train, ZeroLearningRateLeavesWeights) {
  NetworkSpec s = tiny_spec(2);
  SalaNet<float> net(s, AggregatorConfig{}, 1);
  std::vector<Tensor> before;
  for (auto* p : net.parameters().parameters()) before.push_back(p->value);
  std::vector<Sample> data{slab_scene(1)};
  TrainConfig cfg = quiet_config();
  cfg.lr = 0.0;
  cfg.epochs = 3;
  train(net, data, {}, lattice_geo(), cfg);
  std::size_t i = 0;
  for (auto* p : net.parameters().parameters()) EXPECT_EQ(p->value, before[i++]) << p->name;
}

TEST(Train, LossDecreasesOnSeparableScene) {
  NetworkSpec s = tiny_spec(2);
  SalaNet<float> net(s, AggregatorConfig{}, 2);
  std::vector<Sample> data{slab_scene(2)};
  TrainConfig cfg = quiet_config();
  cfg.lr = 0.0005;
  cfg.weight_decay = 0.0;
  cfg.momentum = 0.0;
  cfg.epochs = 50;
  const auto r = train(net, data, {}, lattice_geo(), cfg);
  ASSERT_EQ(r.log.size(), 50u);
  for (std::size_t e = 1; e < r.log.size(); ++e) EXPECT_LE(r.log[e].loss, r.log[e - 1].loss + 1e-6) << "epoch " << e;
  EXPECT_LT(r.log.back().loss, r.log.front().loss - 0.05);
}

TEST(Train, DeterministicAcrossWorkerCounts) {
  std::vector<Sample> data{slab_scene(3), slab_scene(4)};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 2;
  cfg.batch_size = 3;
  cfg.sphere_radius = 0.8;
  cfg.min_sphere_points = 8;
  cfg.seed = 9;
  std::vector<std::vector<Tensor>> weights;
  for (std::size_t workers : {1, 1, 3}) {
    SalaNet<float> net(tiny_spec(2), AggregatorConfig{}, 5);
    cfg.workers = workers;
    train(net, data, data, lattice_geo(), cfg);
    std::vector<Tensor> w;
    for (auto* p : net.parameters().parameters()) w.push_back(p->value);
    weights.push_back(w);
  }
  EXPECT_EQ(weights[0], weights[1]);
  EXPECT_EQ(weights[0], weights[2]);
}

TEST(Train, WritesMetricsAndCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "sala_test_train";
  std::filesystem::remove_all(dir);
  SalaNet<float> net(tiny_spec(2), AggregatorConfig{}, 1);
  std::vector<Sample> data{slab_scene(5)};
  TrainConfig cfg = quiet_config();
  cfg.epochs = 2;
  train(net, data, data, lattice_geo(), cfg, {.dir = dir});
  std::ifstream csv(dir / "metrics.csv");
  std::string header, row;
  std::getline(csv, header);
  EXPECT_EQ(header, "epoch,step,loss,val_miou");
  std::size_t rows = 0;
  while (std::getline(csv, row)) ++rows;
  EXPECT_EQ(rows, 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.salaw"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.salaw"));
  std::filesystem::remove_all(dir);
}

TEST(Train, DivergenceIsReported) {
  SalaNet<float> net(tiny_spec(2), AggregatorConfig{}, 1);
  std::vector<Sample> data{slab_scene(6)};
  TrainConfig cfg = quiet_config();
  cfg.lr = 1e12;
  cfg.epochs = 10;
  EXPECT_THROW(train(net, data, {}, lattice_geo(), cfg), DivergenceError);
}

TEST(Synthetic, TwoClassRoomHasTwoLabels) {
  SyntheticSceneSpec spec;
  spec.num_rooms = 1;
  spec.classes = 2;
  const auto rooms = generate_synthetic(spec);
  ASSERT_EQ(rooms.size(), 1u);
  for (auto l : *rooms[0].labels) EXPECT_LE(l, 1u);
}

TEST(Synthetic, ClassPriorsFollowSurfaceArea) {
  SyntheticSceneSpec spec;
  for (std::size_t room = 0; room < 3; ++room) {
    RoomLayout layout;
    const auto c = generate_room(spec, room, &layout);
    double total_area = 0.0;
    for (double a : layout.class_area) total_area += a;
    std::map<std::uint32_t, double> counts;
    for (auto l : *c.labels) counts[l] += 1.0;
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const double prior = counts[std::uint32_t(k)] / double(c.size());
      const double area = layout.class_area[k] / total_area;
      EXPECT_NEAR(prior / area, 1.0, 0.1) << "room " << room << " class " << k;
    }
  }
}

TEST(Synthetic, SameSeedSameBytes) {
  const auto a = std::filesystem::temp_directory_path() / "sala_syn_a";
  const auto b = std::filesystem::temp_directory_path() / "sala_syn_b";
  SyntheticSceneSpec spec;
  spec.num_rooms = 2;
  const auto pa = write_synthetic(spec, a);
  const auto pb = write_synthetic(spec, b);
  ASSERT_EQ(pa.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    std::ifstream fa(pa[i], std::ios::binary), fb(pb[i], std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(sa, sb);
    EXPECT_FALSE(sa.empty());
  }
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Synthetic, DefaultRoomsHaveAboutTwentyThousandPoints) {
  SyntheticSceneSpec spec;
  const auto c = generate_room(spec, 0);
  EXPECT_GT(c.size(), 15000u);
  EXPECT_LT(c.size(), 25000u);
  EXPECT_THROW((SyntheticSceneSpec{.classes = 1}.validate()), ConfigError);
}

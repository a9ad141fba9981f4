#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "sala/network.hpp"

namespace sala {

/// Input feature recipes: ZRGB1 = (z, r, g, b, 1), RGB1 = (r, g, b, 1),
/// XYZ1 = (x, y, z, 1). Heights and coordinates are taken before any
/// recentering.
enum class FeatureRecipe { ZRGB1, RGB1, XYZ1 };

std::string_view recipe_name(FeatureRecipe recipe);
FeatureRecipe parse_recipe(std::string_view name);
std::size_t recipe_dims(FeatureRecipe recipe);

/// Feature columns holding colors, as [first, first + count).
struct ColorChannels {
  std::size_t first = 0;
  std::size_t count = 0;
};
ColorChannels recipe_colors(FeatureRecipe recipe);

/// Replaces the raw features (RGB, or none for XYZ1) with the recipe's.
PointCloud lift_features(const PointCloud& scene, FeatureRecipe recipe);

struct AugmentConfig {
  bool rot_z = true;
  double scale_lo = 0.7;
  double scale_hi = 1.3;
  double jitter_sigma = 0.001;
  double color_drop_p = 0.2;

  void validate() const;

  bool operator==(const AugmentConfig&) const = default;
};

/// Rotation about z, isotropic scaling, per-point Gaussian jitter, and with
/// probability color_drop_p zeroed colors for the whole sample.
PointCloud augment(PointCloud cloud, const AugmentConfig& aug, ColorChannels colors, std::mt19937_64& rng);

/// Points within `radius` of a uniformly drawn anchor point, recentered on
/// the anchor. Redraws up to 10 times while fewer than `min_points` fall
/// inside, then throws ValidationError.
PointCloud sample_training_sphere(const PointCloud& scene, double radius, std::mt19937_64& rng,
                                  std::size_t min_points = 64);

/// Mean cross-entropy plus lambda * sum of squared weights over the
/// parameters flagged for decay.
template <class Real>
BasicVar<Real> training_loss(BasicVar<Real> logits, std::span<const std::uint32_t> labels, ParameterSet<Real>& params,
                             double lambda);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : n_(classes), counts_(classes * classes, 0) {}

  void add(std::uint32_t truth, std::uint32_t predicted, std::uint64_t count = 1);
  void add(std::span<const std::uint32_t> truth, std::span<const std::uint32_t> predicted);
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return n_; }
  /// Rows are ground truth.
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::uint64_t total() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<double> per_class;  // NaN where the class never occurs or is predicted
  std::vector<bool> valid;
  double mean = 0.0;
};

/// IoU_c = TP / (TP + FP + FN); the mean skips classes with a zero
/// denominator. Throws ValidationError for an empty matrix.
IouResult miou(const ConfusionMatrix& cm);

/// Mean over categories of each category's mIoU.
double mpiou(std::span<const ConfusionMatrix> per_category);

struct VoteOptions {
  double radius = 2.0;
  double stride = 0.0;  // 0 means radius
  std::size_t head = 0;

  bool operator==(const VoteOptions&) const = default;
};

struct VoteResult {
  std::vector<std::uint32_t> labels;
  Tensor mean_logits;                  // (N, classes)
  std::vector<std::uint32_t> coverage;  // spheres per point
  std::size_t spheres = 0;
};

/// Sees each sphere's member indices and logits as they are produced.
using VoteObserver = std::function<void(std::span<const std::int32_t> members, const Tensor& logits)>;

/// Sphere centers on a regular lattice with spacing `stride`, centered on
/// the bounding box and spanning it.
std::vector<std::array<double, 3>> vote_centers(const PointCloud& scene, double radius, double stride);

/// Whether a sphere of `radius` at the bounding-box center holds every point.
bool fits_one_sphere(const PointCloud& scene, double radius);

/// Averages each point's logits over every sphere containing it, then takes
/// the argmax (ties to the lower class). Spheres are not recentered.
VoteResult vote_inference(const PointCloud& scene, const SalaNet<float>& model, const GeometrySpec& geo,
                          const VoteOptions& opts, const VoteObserver& observer = {});

/// One forward pass over the whole scene.
std::vector<std::uint32_t> argmax_inference(const PointCloud& scene, const SalaNet<float>& model,
                                            const GeometrySpec& geo, std::size_t head = 0);

std::vector<std::uint32_t> argmax_rows(const Tensor& logits);

/// A scene with recipe features and labels, and its shape category.
struct Sample {
  PointCloud cloud;
  std::size_t category = 0;
};

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 20;
  std::size_t batch_size = 4;
  double sphere_radius = 2.0;
  std::size_t min_sphere_points = 64;
  AugmentConfig aug;
  FeatureRecipe recipe = FeatureRecipe::ZRGB1;
  double val_radius = 2.0;
  double val_stride = 0.0;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double val_miou = 0.0;  // NaN without a validation set
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val_miou = 0.0;
  std::size_t best_epoch = 0;
};

struct TrainOutputs {
  // metrics.csv, best.salaw and last.salaw are written here when set.
  std::filesystem::path dir;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Learning rate at `step` of `total` under cosine decay.
double cosine_lr(double base, std::size_t step, std::size_t total);

/// SGD with momentum: v = mu * v + g; w -= lr * v.
class Sgd {
 public:
  Sgd(ParameterSet<float>& params, double momentum);
  void step(double lr);

 private:
  ParameterSet<float>& params_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

/// Confusion matrix over labeled samples. Scenes that fit in one sphere of
/// the voting radius take a single forward pass, the rest are voted.
ConfusionMatrix evaluate(const SalaNet<float>& model, std::span<const Sample> samples, const GeometrySpec& geo,
                         const VoteOptions& opts);

/// Sphere-sampling SGD training. Workers draw, augment and index the batch's
/// spheres from per-slot seeds; the batch then runs as one stacked forward
/// pass, so results do not depend on the worker count. Throws
/// DivergenceError on a non-finite loss.
TrainResult train(SalaNet<float>& model, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const GeometrySpec& geo, const TrainConfig& cfg, const TrainOutputs& out = {});

}  // namespace sala

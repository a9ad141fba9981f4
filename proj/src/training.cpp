#include "sala/training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <thread>

#include "sala/errors.hpp"

namespace sala {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + kGolden * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double dist2(const Point3& p, const std::array<double, 3>& c) {
  const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
  return dx * dx + dy * dy + dz * dz;
}

Tensor forward_logits(const PointCloud& cloud, const SalaNet<float>& model, const GeometrySpec& geo,
                      std::size_t head) {
  const PreparedInput in = prepare_input(cloud, geo, model.spec().stages);
  Tape tape(false);
  return model.forward(tape, in, head).value();
}

void write_csv_row(std::ofstream& csv, const EpochLog& e) {
  csv << e.epoch << ',' << e.step << ',' << e.loss << ',';
  if (std::isnan(e.val_miou)) csv << "nan";
  else csv << e.val_miou;
  csv << '\n';
  csv.flush();
}

}  // namespace

std::string_view recipe_name(FeatureRecipe recipe) {
  switch (recipe) {
    case FeatureRecipe::ZRGB1: return "zrgb1";
    case FeatureRecipe::RGB1: return "rgb1";
    case FeatureRecipe::XYZ1: return "xyz1";
  }
  return "unknown";
}

FeatureRecipe parse_recipe(std::string_view name) {
  for (auto r : {FeatureRecipe::ZRGB1, FeatureRecipe::RGB1, FeatureRecipe::XYZ1})
    if (recipe_name(r) == name) return r;
  throw ConfigError("unknown feature recipe '" + std::string(name) + "' (expected zrgb1, rgb1 or xyz1)");
}

std::size_t recipe_dims(FeatureRecipe recipe) { return recipe == FeatureRecipe::ZRGB1 ? 5 : 4; }

ColorChannels recipe_colors(FeatureRecipe recipe) {
  switch (recipe) {
    case FeatureRecipe::ZRGB1: return {1, 3};
    case FeatureRecipe::RGB1: return {0, 3};
    case FeatureRecipe::XYZ1: return {0, 0};
  }
  return {};
}

PointCloud lift_features(const PointCloud& scene, FeatureRecipe recipe) {
  const bool needs_rgb = recipe != FeatureRecipe::XYZ1;
  if (needs_rgb && scene.feat_dim < 3) {
    throw ConfigError("feature recipe " + std::string(recipe_name(recipe)) + " needs RGB, scene has " +
                      std::to_string(scene.feat_dim) + " feature columns");
  }
  PointCloud out;
  out.positions = scene.positions;
  out.labels = scene.labels;
  out.feat_dim = recipe_dims(recipe);
  out.features.reserve(scene.size() * out.feat_dim);
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const auto& p = scene.positions[i];
    if (recipe == FeatureRecipe::ZRGB1) out.features.push_back(p[2]);
    if (recipe == FeatureRecipe::XYZ1) out.features.insert(out.features.end(), p.begin(), p.end());
    if (needs_rgb) {
      auto row = scene.feature_row(i);
      out.features.insert(out.features.end(), row.begin(), row.begin() + 3);
    }
    out.features.push_back(1.0f);
  }
  return out;
}

void AugmentConfig::validate() const {
  if (!(scale_lo > 0.0) || scale_lo > scale_hi) throw ConfigError("augment scale range must satisfy 0 < lo <= hi");
  if (jitter_sigma < 0.0) throw ConfigError("augment jitter_sigma must be non-negative");
  if (color_drop_p < 0.0 || color_drop_p > 1.0) throw ConfigError("augment color_drop_p must lie in [0, 1]");
}

PointCloud augment(PointCloud cloud, const AugmentConfig& aug, ColorChannels colors, std::mt19937_64& rng) {
  aug.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double theta = aug.rot_z ? 2.0 * std::numbers::pi * unit(rng) : 0.0;
  const double scale = aug.scale_lo == aug.scale_hi ? aug.scale_lo : std::uniform_real_distribution<double>(aug.scale_lo, aug.scale_hi)(rng);
  const double c = std::cos(theta), s = std::sin(theta);
  std::normal_distribution<double> jitter(0.0, aug.jitter_sigma > 0 ? aug.jitter_sigma : 1.0);
  for (auto& p : cloud.positions) {
    double x = p[0], y = p[1], z = p[2];
    if (aug.rot_z) {
      const double rx = c * x - s * y, ry = s * x + c * y;
      x = rx;
      y = ry;
    }
    x *= scale;
    y *= scale;
    z *= scale;
    if (aug.jitter_sigma > 0) {
      x += jitter(rng);
      y += jitter(rng);
      z += jitter(rng);
    }
    p = {float(x), float(y), float(z)};
  }
  if (colors.count && aug.color_drop_p > 0 && unit(rng) < aug.color_drop_p) {
    for (std::size_t i = 0; i < cloud.size(); ++i)
      for (std::size_t j = 0; j < colors.count; ++j) cloud.features[i * cloud.feat_dim + colors.first + j] = 0.0f;
  }
  return cloud;
}

PointCloud sample_training_sphere(const PointCloud& scene, double radius, std::mt19937_64& rng, std::size_t min_points) {
  if (scene.size() == 0) throw ValidationError("cannot sample a sphere from an empty scene");
  std::uniform_int_distribution<std::size_t> pick(0, scene.size() - 1);
  const double r2 = radius * radius;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const auto& a = scene.positions[pick(rng)];
    const std::array<double, 3> anchor{a[0], a[1], a[2]};
    std::vector<std::int32_t> members;
    for (std::size_t i = 0; i < scene.size(); ++i)
      if (dist2(scene.positions[i], anchor) <= r2) members.push_back(std::int32_t(i));
    if (members.size() < min_points) continue;
    return translated(scene.subset(members), {-anchor[0], -anchor[1], -anchor[2]});
  }
  throw ValidationError("no sphere of radius " + std::to_string(radius) + " holds " + std::to_string(min_points) +
                        " points after 10 draws");
}

template <class Real>
BasicVar<Real> training_loss(BasicVar<Real> logits, std::span<const std::uint32_t> labels, ParameterSet<Real>& params,
                             double lambda) {
  auto& tape = logits.tape();
  BasicVar<Real> loss = ops::softmax_cross_entropy(logits, labels);
  if (lambda == 0.0) return loss;
  BasicVar<Real> reg;
  for (auto* p : params.parameters()) {
    if (!p->decay) continue;
    auto term = ops::squared_norm(tape.parameter(*p));
    reg = reg.valid() ? ops::add(reg, term) : term;
  }
  if (!reg.valid()) return loss;
  return ops::add(loss, ops::scale(reg, Real(lambda)));
}

template BasicVar<float> training_loss<float>(BasicVar<float>, std::span<const std::uint32_t>, ParameterSet<float>&,
                                              double);
template BasicVar<double> training_loss<double>(BasicVar<double>, std::span<const std::uint32_t>,
                                                ParameterSet<double>&, double);

void ConfusionMatrix::add(std::uint32_t truth, std::uint32_t predicted, std::uint64_t count) {
  if (truth >= n_ || predicted >= n_) {
    throw ValidationError("confusion entry (" + std::to_string(truth) + "," + std::to_string(predicted) +
                          ") outside " + std::to_string(n_) + " classes");
  }
  counts_[truth * n_ + predicted] += count;
}

void ConfusionMatrix::add(std::span<const std::uint32_t> truth, std::span<const std::uint32_t> predicted) {
  if (truth.size() != predicted.size()) throw DimensionError("confusion: label counts differ");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

IouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ValidationError("mIoU of an empty confusion matrix");
  const std::size_t n = cm.classes();
  IouResult r;
  r.per_class.assign(n, std::numeric_limits<double>::quiet_NaN());
  r.valid.assign(n, false);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = double(tp) / double(denom);
    r.valid[c] = true;
    sum += r.per_class[c];
    ++used;
  }
  r.mean = sum / double(used);
  return r;
}

double mpiou(std::span<const ConfusionMatrix> per_category) {
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& cm : per_category) {
    if (cm.total() == 0) continue;
    sum += miou(cm).mean;
    ++used;
  }
  if (used == 0) throw ValidationError("mpIoU without any evaluated category");
  return sum / double(used);
}

bool fits_one_sphere(const PointCloud& scene, double radius) {
  const auto [lo, hi] = bounding_box(scene);
  std::array<double, 3> mid{};
  for (int a = 0; a < 3; ++a) mid[a] = 0.5 * (double(lo[a]) + double(hi[a]));
  const double r2 = radius * radius;
  return std::all_of(scene.positions.begin(), scene.positions.end(),
                     [&](const Point3& p) { return dist2(p, mid) <= r2; });
}

std::vector<std::array<double, 3>> vote_centers(const PointCloud& scene, double radius, double stride) {
  if (!(radius > 0.0)) throw ConfigError("voting radius must be positive");
  if (stride == 0.0) stride = radius;
  if (!(stride > 0.0) || !(stride < 2.0 * radius)) {
    throw ConfigError("voting stride must lie in (0, 2 * radius) so spheres overlap");
  }
  const auto [lo, hi] = bounding_box(scene);
  std::array<double, 3> mid{};
  for (int a = 0; a < 3; ++a) mid[a] = 0.5 * (double(lo[a]) + double(hi[a]));
  std::array<std::size_t, 3> n{};
  for (int a = 0; a < 3; ++a) n[a] = std::size_t(std::ceil((double(hi[a]) - double(lo[a])) / stride)) + 1;
  std::vector<std::array<double, 3>> centers;
  for (std::size_t i = 0; i < n[0]; ++i)
    for (std::size_t j = 0; j < n[1]; ++j)
      for (std::size_t k = 0; k < n[2]; ++k) {
        centers.push_back({mid[0] + (double(i) - 0.5 * double(n[0] - 1)) * stride,
                           mid[1] + (double(j) - 0.5 * double(n[1] - 1)) * stride,
                           mid[2] + (double(k) - 0.5 * double(n[2] - 1)) * stride});
      }
  return centers;
}

std::vector<std::uint32_t> argmax_rows(const Tensor& logits) {
  const std::size_t c = logits.cols();
  std::vector<std::uint32_t> out(logits.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    std::uint32_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[r * c + j] > logits[r * c + best]) best = std::uint32_t(j);
    out[r] = best;
  }
  return out;
}

VoteResult vote_inference(const PointCloud& scene, const SalaNet<float>& model, const GeometrySpec& geo,
                          const VoteOptions& opts, const VoteObserver& observer) {
  const auto centers = vote_centers(scene, opts.radius, opts.stride);
  const std::size_t n = scene.size(), classes = model.spec().num_classes;
  std::vector<double> sum(n * classes, 0.0);
  VoteResult res;
  res.coverage.assign(n, 0);
  const double r2 = opts.radius * opts.radius * (1.0 + 1e-9);
  Tensor whole;
  for (const auto& c : centers) {
    std::vector<std::int32_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (dist2(scene.positions[i], c) <= r2) members.push_back(std::int32_t(i));
    if (members.empty()) continue;
    // Spheres holding the whole scene all see the same input.
    Tensor logits;
    if (members.size() == n) {
      if (whole.empty()) whole = forward_logits(scene, model, geo, opts.head);
      logits = whole;
    } else {
      logits = forward_logits(scene.subset(members), model, geo, opts.head);
    }
    if (observer) observer(members, logits);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const std::size_t i = std::size_t(members[m]);
      ++res.coverage[i];
      for (std::size_t j = 0; j < classes; ++j) sum[i * classes + j] += logits[m * classes + j];
    }
    ++res.spheres;
  }
  res.mean_logits = Tensor(Shape{n, classes});
  for (std::size_t i = 0; i < n; ++i) {
    if (res.coverage[i] == 0) {
      throw CoverageError("point " + std::to_string(i) + " lies in no voting sphere; reduce the stride");
    }
    for (std::size_t j = 0; j < classes; ++j)
      res.mean_logits[i * classes + j] = float(sum[i * classes + j] / double(res.coverage[i]));
  }
  res.labels = argmax_rows(res.mean_logits);
  return res;
}

std::vector<std::uint32_t> argmax_inference(const PointCloud& scene, const SalaNet<float>& model,
                                            const GeometrySpec& geo, std::size_t head) {
  return argmax_rows(forward_logits(scene, model, geo, head));
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("training.lr must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("training.momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("training.weight_decay must be non-negative");
  if (epochs == 0 || steps_per_epoch == 0 || batch_size == 0) {
    throw ConfigError("training epochs, steps_per_epoch and batch_size must be positive");
  }
  if (!(sphere_radius > 0.0)) throw ConfigError("training.sphere_radius must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
  aug.validate();
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

Sgd::Sgd(ParameterSet<float>& params, double momentum) : params_(params), momentum_(momentum) {
  for (auto* p : params_.parameters()) velocity_.emplace_back(p->value.shape());
}

void Sgd::step(double lr) {
  auto ps = params_.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& v = velocity_[i];
    auto& p = *ps[i];
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = float(momentum_ * v[j] + p.grad[j]);
      p.value[j] = float(p.value[j] - lr * v[j]);
    }
  }
}

ConfusionMatrix evaluate(const SalaNet<float>& model, std::span<const Sample> samples, const GeometrySpec& geo,
                         const VoteOptions& opts) {
  ConfusionMatrix cm(model.spec().num_classes);
  for (const auto& s : samples) {
    if (!s.cloud.labels) throw ValidationError("evaluation sample without labels");
    VoteOptions o = opts;
    if (model.spec().num_heads > 1) o.head = s.category;
    if (fits_one_sphere(s.cloud, o.radius)) cm.add(*s.cloud.labels, argmax_inference(s.cloud, model, geo, o.head));
    else cm.add(*s.cloud.labels, vote_inference(s.cloud, model, geo, o).labels);
  }
  return cm;
}

TrainResult train(SalaNet<float>& model, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const GeometrySpec& geo, const TrainConfig& cfg, const TrainOutputs& out) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  for (const auto& s : train_set) {
    s.cloud.validate(std::uint32_t(model.spec().num_classes));
    if (!s.cloud.labels) throw ValidationError("training sample without labels");
  }
  auto& params = model.parameters();
  const auto plist = params.parameters();
  Sgd sgd(params, cfg.momentum);
  const ColorChannels colors = recipe_colors(cfg.recipe);
  const std::size_t total_steps = cfg.epochs * cfg.steps_per_epoch;
  const VoteOptions vote{cfg.val_radius, cfg.val_stride, 0};

  std::ofstream csv;
  if (!out.dir.empty()) {
    std::filesystem::create_directories(out.dir);
    csv.open(out.dir / "metrics.csv");
    csv << "epoch,step,loss,val_miou\n";
  }

  struct Prepared {
    PreparedInput input;
    std::vector<std::uint32_t> labels;
    std::size_t category = 0;
  };

  // Sampling, augmentation and neighborhood search for one batch slot. Every
  // slot has its own seed, so the batch does not depend on the worker count.
  auto prepare_sample = [&](std::size_t step, std::size_t b) {
    std::mt19937_64 rng(mix_seed(cfg.seed, step * cfg.batch_size + b));
    const auto& sample = train_set[std::uniform_int_distribution<std::size_t>(0, train_set.size() - 1)(rng)];
    PointCloud sphere = sample_training_sphere(sample.cloud, cfg.sphere_radius, rng, cfg.min_sphere_points);
    sphere = augment(std::move(sphere), cfg.aug, colors, rng);
    GeometrySpec g = geo;
    g.select_seed = mix_seed(geo.select_seed, step * cfg.batch_size + b);
    Prepared p{prepare_input(sphere, g, model.spec().stages), std::move(*sphere.labels), sample.category};
    return p;
  };

  TrainResult result;
  result.best_val_miou = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      std::vector<Prepared> batch(cfg.batch_size);
      const std::size_t workers = std::min(cfg.workers, cfg.batch_size);
      if (workers <= 1) {
        for (std::size_t b = 0; b < cfg.batch_size; ++b) batch[b] = prepare_sample(step, b);
      } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            try {
              for (std::size_t b = next++; b < cfg.batch_size; b = next++) batch[b] = prepare_sample(step, b);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }
      std::vector<PreparedInput> inputs;
      std::vector<std::uint32_t> labels;
      std::vector<std::size_t> heads;
      for (auto& p : batch) {
        labels.insert(labels.end(), p.labels.begin(), p.labels.end());
        heads.insert(heads.end(), p.labels.size(), model.spec().num_heads > 1 ? p.category : 0);
        inputs.push_back(std::move(p.input));
      }
      const PreparedInput in = stack_inputs(inputs);

      Tape tape(true);
      auto loss = training_loss(model.forward(tape, in, heads), labels, params, cfg.weight_decay);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("loss became " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + "; lower training.lr");
      }
      params.zero_grad();
      tape.backward(loss);
      tape.accumulate_parameter_grads();
      tape.commit();
      sgd.step(cosine_lr(cfg.lr, step, total_steps));
      epoch_loss += value;
    }
    EpochLog e{epoch + 1, step, epoch_loss / double(cfg.steps_per_epoch), std::numeric_limits<double>::quiet_NaN()};
    if (!val_set.empty()) e.val_miou = miou(evaluate(model, val_set, geo, vote)).mean;
    result.log.push_back(e);
    if (csv.is_open()) write_csv_row(csv, e);
    const double score = std::isnan(e.val_miou) ? double(epoch) : e.val_miou;
    if (score > result.best_val_miou || result.best_epoch == 0) {
      result.best_val_miou = score;
      result.best_epoch = e.epoch;
      if (!out.dir.empty()) model.save(out.dir / "best.salaw");
    }
    if (out.on_epoch) out.on_epoch(e);
  }
  if (val_set.empty()) result.best_val_miou = std::numeric_limits<double>::quiet_NaN();
  if (!out.dir.empty()) model.save(out.dir / "last.salaw");
  return result;
}

}  // namespace sala

#include "sala/experiment.hpp"

#include "sala/checkpoint.hpp"
#include "sala/errors.hpp"

namespace sala {

namespace {

std::vector<Sample> read_samples(const std::vector<std::filesystem::path>& paths,
                                 const std::vector<std::size_t>& categories, FeatureRecipe recipe) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    out.push_back({lift_features(read_sptc(paths[i]), recipe), categories.empty() ? 0 : categories[i]});
  }
  return out;
}

}  // namespace

Datasets load_datasets(const ExperimentConfig& cfg) {
  Datasets d;
  const FeatureRecipe recipe = cfg.training.recipe;
  if (cfg.data.source == "synthetic") {
    const auto rooms = generate_synthetic(cfg.data.synthetic);
    const std::size_t n_train = rooms.size() - cfg.data.val_rooms;
    for (std::size_t i = 0; i < rooms.size(); ++i) {
      (i < n_train ? d.train : d.val).push_back({lift_features(rooms[i], recipe), 0});
    }
  } else {
    d.train = read_samples(cfg.data.train, cfg.data.train_categories, recipe);
    d.val = read_samples(cfg.data.val, cfg.data.val_categories, recipe);
  }
  return d;
}

std::unique_ptr<SalaNet<float>> build_model(const ExperimentConfig& cfg) {
  return std::make_unique<SalaNet<float>>(cfg.network, cfg.aggregator, cfg.seed);
}

std::filesystem::path eval_checkpoint(const ExperimentConfig& cfg) {
  return cfg.checkpoint.empty() ? cfg.output_dir / "best.salaw" : cfg.checkpoint;
}

ProfilePyramid profile_pyramid(const ExperimentConfig& cfg) {
  const std::size_t levels = cfg.network.stages;
  if (!cfg.profile.cloud.empty()) {
    return {pyramid_point_counts(read_sptc(cfg.profile.cloud), cfg.geometry, levels),
            "cloud " + cfg.profile.cloud.string()};
  }
  return {pyramid_point_counts(benchmark_cloud(cfg.profile.points), cfg.geometry, levels),
          "benchmark room, " + std::to_string(cfg.profile.points) + " points"};
}

CostReport profile_model(const ExperimentConfig& cfg, const std::filesystem::path& weights_path) {
  const ProfilePyramid pyr = profile_pyramid(cfg);
  CostReport r = count_macs(cfg.network, cfg.aggregator, pyr.counts, cfg.geometry.k_max);
  r.source = pyr.source;
  if (!weights_path.empty()) {
    const SalaNet<float> model(cfg.network, cfg.aggregator, cfg.seed);
    write_checkpoint(weights_path, model.parameters().export_parameters());
    r.weight_bytes = weight_footprint(weights_path);
  }
  return r;
}

}  // namespace sala

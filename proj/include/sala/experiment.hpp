#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "sala/config.hpp"
#include "sala/cost.hpp"
#include "sala/training.hpp"

namespace sala {

struct Datasets {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Training and validation samples with recipe features. Synthetic data
/// holds out the last data.val_rooms rooms for validation.
Datasets load_datasets(const ExperimentConfig& cfg);

/// A freshly initialized model, seeded from run.seed.
std::unique_ptr<SalaNet<float>> build_model(const ExperimentConfig& cfg);

/// Where eval reads weights: eval.checkpoint, or best.salaw in output_dir.
std::filesystem::path eval_checkpoint(const ExperimentConfig& cfg);

/// Point counts of the profiled pyramid and a note saying where they came from.
struct ProfilePyramid {
  std::vector<std::size_t> counts;
  std::string source;
};
ProfilePyramid profile_pyramid(const ExperimentConfig& cfg);

/// Parameter and MAC counts for the configured network. When
/// `weights_path` is set a freshly initialized checkpoint is written there
/// and its size recorded.
CostReport profile_model(const ExperimentConfig& cfg, const std::filesystem::path& weights_path = {});

}  // namespace sala

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sala/synthetic.hpp"
#include "sala/training.hpp"

namespace sala {

struct DataConfig {
  // "synthetic" generates rooms from `synthetic`; "files" reads SPTC1 paths.
  std::string source = "synthetic";
  std::vector<std::filesystem::path> train;
  std::vector<std::filesystem::path> val;
  // Shape category of each file, for per-category heads. Empty means all 0.
  std::vector<std::size_t> train_categories;
  std::vector<std::size_t> val_categories;
  SyntheticSceneSpec synthetic;
  std::size_t val_rooms = 2;  // last rooms of the synthetic set

  bool operator==(const DataConfig&) const = default;
};

struct ProfileConfig {
  // SPTC1 cloud to count MACs on; empty uses the seeded benchmark scene.
  std::filesystem::path cloud;
  std::size_t points = 15000;

  bool operator==(const ProfileConfig&) const = default;
};

struct GradcheckConfig {
  std::size_t seeds = 100;
  double eps = 1e-3;
  double tolerance = 1e-3;

  bool operator==(const GradcheckConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::size_t workers = 0;  // 0 means logical cores
  NetworkSpec network;
  AggregatorConfig aggregator;
  GeometrySpec geometry;
  TrainConfig training;
  VoteOptions eval;
  std::filesystem::path checkpoint;  // eval input; empty means output_dir/best.salaw
  DataConfig data;
  ProfileConfig profile;
  GradcheckConfig gradcheck;

  bool operator==(const ExperimentConfig&) const = default;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// Fills the settings that follow from other keys (input features from the
/// recipe, the training and neighbor-selection seeds from run.seed, the
/// worker count). Call again after changing those keys.
void derive_settings(ExperimentConfig& cfg);

/// Parses `section.key = value` lines. Blank lines and `#` comments are
/// skipped; lists are written `[a, b]`, strings may be double-quoted.
/// `run.seed` is required. Unknown keys, malformed values and duplicates
/// throw ConfigError naming `origin` and the line.
ExperimentConfig parse_config_text(std::string_view text, std::string_view origin = "config");

/// As above, and every referenced data file must exist.
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Every key with its value, in a form parse_config_text reads back to an
/// equal config.
std::string emit_config(const ExperimentConfig& cfg);

/// The known keys, in emission order.
std::vector<std::string> config_keys();

}  // namespace sala

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sala/aggregation.hpp"
#include "sala/network.hpp"

namespace sala {

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  // Normalization, softmax, max and other non-MAC element operations.
  std::uint64_t other_ops = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t other_ops = 0;
  // Size of the parameter checkpoint file, and 4 bytes per parameter.
  std::uint64_t weight_bytes = 0;
  std::uint64_t raw_f32_bytes = 0;
  std::vector<std::size_t> point_counts;
  std::size_t k = 0;
  std::string source;  // how the point counts were obtained
  std::vector<CostRow> breakdown;

  std::string to_json() const;
  std::string to_table() const;
};

/// Parameters of one aggregation layer.
std::uint64_t aggregator_params(const AggregatorConfig& cfg, bool batch_norm);

/// Analytic parameter count, computed from the specs alone. Biases and
/// normalization parameters are included.
CostReport count_params(const NetworkSpec& spec, const AggregatorConfig& agg);

/// Multiply-accumulates of one forward pass. A linear layer on M rows costs
/// M * Cin * Cout; an aggregation layer costs N * k * (Cin + pos_hidden) *
/// Cout * S for the group encoding, N * k * pos_hidden * S for the
/// assignment and N * k * 3 * pos_hidden for the position encoding.
/// `point_counts` has one entry per level.
CostReport count_macs(const NetworkSpec& spec, const AggregatorConfig& agg, const std::vector<std::size_t>& point_counts,
                      std::size_t k);

/// The seeded benchmark scene: a 4 m room with six boxes and six spheres,
/// subsampled at 4 cm and cropped to the `points` points nearest its
/// center. Throws ValidationError when the room holds fewer points.
PointCloud benchmark_cloud(std::size_t points = 15000);

/// Points per level of the pyramid `geo` builds from `cloud`.
std::vector<std::size_t> pyramid_point_counts(const PointCloud& cloud, const GeometrySpec& geo, std::size_t levels);

/// File size of a checkpoint; throws FormatError when it does not parse.
std::uint64_t weight_footprint(const std::filesystem::path& checkpoint);

}  // namespace sala

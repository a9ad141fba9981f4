#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "sala/tensor.hpp"

namespace sala {

using Point3 = std::array<float, 3>;

/// Positions in meters, a row-major N x feat_dim feature block and optional
/// per-point class labels.
struct PointCloud {
  std::vector<Point3> positions;
  std::size_t feat_dim = 0;
  std::vector<float> features;
  std::optional<std::vector<std::uint32_t>> labels;

  std::size_t size() const noexcept { return positions.size(); }
  std::span<const float> feature_row(std::size_t i) const {
    return std::span<const float>(features).subspan(i * feat_dim, feat_dim);
  }

  /// Throws ValidationError when the cloud is empty, has non-finite
  /// positions, a feature block of the wrong size, or labels >= num_classes.
  void validate(std::optional<std::uint32_t> num_classes = std::nullopt) const;

  /// The points at `index`, in that order.
  PointCloud subset(std::span<const std::int32_t> index) const;
};

/// Fixed-width neighbor lists: centers x k slots, slot validity in `mask`.
/// Masked slots repeat the first neighbor's index so they are always safe to
/// gather from.
struct NeighborIndex {
  std::size_t centers = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> indices;
  std::vector<std::uint8_t> mask;
  double radius = 0.0;

  std::size_t valid_count(std::size_t center) const;
};

enum class NeighborSelect { Nearest, Random };

struct BallQueryOptions {
  std::size_t k_max = 32;
  NeighborSelect select = NeighborSelect::Nearest;
  std::uint64_t seed = 0;
};

/// One resolution of the encoder pyramid. `upsample_map` sends every point
/// of this level to its nearest point on the next coarser level (empty on
/// the coarsest level).
struct ResolutionLevel {
  PointCloud cloud;
  double grid_size = 0.0;
  double ball_radius = 0.0;
  std::vector<std::int32_t> upsample_map;
};

/// Voxel cell of a position: floor(p / grid_size) per axis, origin at zero.
std::array<std::int64_t, 3> voxel_cell(const Point3& p, double grid_size);

/// One point per occupied voxel cell, in order of first appearance. The
/// position is the barycenter of the members, the features their mean and
/// the label their majority (ties to the smaller id).
PointCloud grid_subsample(const PointCloud& cloud, double grid_size);

/// Up to k_max support points within `radius` of each center, nearest first
/// (ties to the lower index). When `centers` and `support` are the same
/// object, every center is its own first neighbor. Throws
/// EmptyNeighborhoodError for a center without neighbors.
NeighborIndex ball_query(const PointCloud& centers, const PointCloud& support, double radius,
                         const BallQueryOptions& opts = {});

/// (N, k, 3) offsets p_neighbor - p_center; masked slots are zero.
template <class Real>
BasicTensor<Real> relative_positions(const PointCloud& centers, const PointCloud& support,
                                     const NeighborIndex& nbr);

/// Index of the nearest coarse point for each fine point (ties to the lower index).
std::vector<std::int32_t> nn_interpolate_map(const PointCloud& fine, const PointCloud& coarse);

/// Level l uses grid base_grid * 2^l and radius base_radius * 2^l. Level 0
/// is the input subsampled at base_grid; each further level subsamples the
/// previous one.
std::vector<ResolutionLevel> build_pyramid(const PointCloud& cloud, double base_grid, double base_radius,
                                           std::size_t levels);

std::array<Point3, 2> bounding_box(const PointCloud& cloud);
PointCloud translated(PointCloud cloud, const std::array<double, 3>& offset);

// SPTC1 files: the text header "SPTC1\n", "points N\n", "feat_dim d\n",
// "has_labels 0|1\n", then N little-endian f32 rows (x, y, z, features...)
// and, when labeled, N little-endian u32 labels.
void write_sptc(std::ostream& out, const PointCloud& cloud);
void write_sptc(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_sptc(std::istream& in);
PointCloud read_sptc(const std::filesystem::path& path);

}  // namespace sala

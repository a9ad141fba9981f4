#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sala/geometry.hpp"

namespace sala {

/// Rooms built from labeled primitives: floor and wall planes (class 0),
/// open-bottomed boxes (class 1) and spheres resting on the floor (class 2).
/// Points carry RGB features drawn around a per-class base color.
struct SyntheticSceneSpec {
  std::size_t num_rooms = 22;
  double room_size = 3.0;    // floor edge, meters
  double wall_height = 1.5;
  std::size_t classes = 3;   // 2 drops the spheres
  double density = 650.0;    // points per square meter of surface
  std::size_t boxes = 4;
  std::size_t spheres = 5;
  double noise_sigma = 0.005;  // Gaussian surface noise, meters
  // Spread of the per-object color around its class color, and per point.
  double object_color_sigma = 0.15;
  double point_color_sigma = 0.05;
  std::uint64_t seed = 1;

  void validate() const;

  bool operator==(const SyntheticSceneSpec&) const = default;
};

/// Surface area per class of one room, matching the point counts the
/// generator draws.
struct RoomLayout {
  std::vector<double> class_area;
};

PointCloud generate_room(const SyntheticSceneSpec& spec, std::size_t room, RoomLayout* layout = nullptr);
std::vector<PointCloud> generate_synthetic(const SyntheticSceneSpec& spec);

/// Writes room_000.sptc, room_001.sptc, ... and returns the paths.
std::vector<std::filesystem::path> write_synthetic(const SyntheticSceneSpec& spec, const std::filesystem::path& dir);

}  // namespace sala

#include "sala/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "sala/errors.hpp"

namespace sala {

namespace {

using Vec3 = std::array<double, 3>;

constexpr Vec3 kClassColor[] = {{0.62, 0.62, 0.60}, {0.58, 0.38, 0.22}, {0.22, 0.42, 0.70}};

struct Builder {
  const SyntheticSceneSpec& spec;
  std::mt19937_64 rng;
  PointCloud cloud;
  std::vector<double> area;

  Builder(const SyntheticSceneSpec& s, std::uint64_t seed) : spec(s), rng(seed), area(s.classes, 0.0) {
    cloud.feat_dim = 3;
    cloud.labels.emplace();
  }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal(double sigma) { return sigma > 0 ? std::normal_distribution<double>(0.0, sigma)(rng) : 0.0; }

  Vec3 object_color(std::uint32_t label) {
    Vec3 c = kClassColor[label];
    for (auto& v : c) v += normal(spec.object_color_sigma);
    return c;
  }

  void emit(const Vec3& p, const Vec3& color, std::uint32_t label) {
    cloud.positions.push_back({float(p[0] + normal(spec.noise_sigma)), float(p[1] + normal(spec.noise_sigma)),
                               float(p[2] + normal(spec.noise_sigma))});
    for (double c : color) cloud.features.push_back(float(std::clamp(c + normal(spec.point_color_sigma), 0.0, 1.0)));
    cloud.labels->push_back(label);
  }

  std::size_t count(double a) const { return std::size_t(std::llround(a * spec.density)); }

  // Parallelogram origin + s*u + t*v, s, t in [0, 1].
  void patch(const Vec3& origin, const Vec3& u, const Vec3& v, const Vec3& color, std::uint32_t label) {
    const Vec3 n{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
    const double a = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    area[label] += a;
    for (std::size_t i = count(a); i > 0; --i) {
      const double s = uniform(0.0, 1.0), t = uniform(0.0, 1.0);
      emit({origin[0] + s * u[0] + t * v[0], origin[1] + s * u[1] + t * v[1], origin[2] + s * u[2] + t * v[2]}, color,
           label);
    }
  }

  void sphere(const Vec3& c, double r, const Vec3& color, std::uint32_t label) {
    const double a = 4.0 * std::numbers::pi * r * r;
    area[label] += a;
    for (std::size_t i = count(a); i > 0; --i) {
      Vec3 d{normal(1.0), normal(1.0), normal(1.0)};
      const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      if (len < 1e-12) d = {0.0, 0.0, 1.0};
      const double s = len < 1e-12 ? 1.0 : r / len;
      emit({c[0] + d[0] * s, c[1] + d[1] * s, c[2] + d[2] * s}, color, label);
    }
  }
};

struct Footprint {
  double x, y, radius;
};

}  // namespace

void SyntheticSceneSpec::validate() const {
  if (classes < 2 || classes > 3) throw ConfigError("synthetic scenes support 2 or 3 classes");
  if (!(density > 0.0)) throw ConfigError("synthetic density must be positive");
  if (!(room_size > 1.0) || !(wall_height > 0.0)) throw ConfigError("synthetic room too small");
  if (num_rooms == 0) throw ConfigError("synthetic dataset needs at least one room");
  if (noise_sigma < 0 || object_color_sigma < 0 || point_color_sigma < 0) {
    throw ConfigError("synthetic noise levels must be non-negative");
  }
}

PointCloud generate_room(const SyntheticSceneSpec& spec, std::size_t room, RoomLayout* layout) {
  spec.validate();
  Builder b(spec, spec.seed * 0x9E3779B97F4A7C15ULL + room + 1);
  const double s = spec.room_size, h = spec.wall_height;
  const Vec3 surface = b.object_color(0);
  b.patch({0, 0, 0}, {s, 0, 0}, {0, s, 0}, surface, 0);
  b.patch({0, 0, 0}, {s, 0, 0}, {0, 0, h}, surface, 0);
  b.patch({0, 0, 0}, {0, s, 0}, {0, 0, h}, surface, 0);

  std::vector<Footprint> placed;
  auto place = [&](double radius, Footprint& out) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const Footprint f{b.uniform(radius + 0.1, s - radius - 0.05), b.uniform(radius + 0.1, s - radius - 0.05), radius};
      const bool clear = std::none_of(placed.begin(), placed.end(), [&](const Footprint& o) {
        return std::hypot(o.x - f.x, o.y - f.y) < o.radius + f.radius + 0.05;
      });
      if (clear) {
        placed.push_back(f);
        out = f;
        return true;
      }
    }
    return false;
  };

  for (std::size_t i = 0; i < spec.boxes; ++i) {
    const double w = b.uniform(0.4, 0.9), d = b.uniform(0.4, 0.9), ht = b.uniform(0.3, 0.8);
    const double yaw = b.uniform(0.0, std::numbers::pi);
    Footprint f{};
    if (!place(0.5 * std::hypot(w, d), f)) continue;
    const Vec3 ux{w * std::cos(yaw), w * std::sin(yaw), 0}, uy{-d * std::sin(yaw), d * std::cos(yaw), 0};
    const Vec3 up{0, 0, ht};
    const Vec3 o{f.x - 0.5 * (ux[0] + uy[0]), f.y - 0.5 * (ux[1] + uy[1]), 0};
    const Vec3 color = b.object_color(1);
    const Vec3 ox{o[0] + ux[0], o[1] + ux[1], 0}, oy{o[0] + uy[0], o[1] + uy[1], 0};
    b.patch({o[0], o[1], ht}, ux, uy, color, 1);
    b.patch(o, ux, up, color, 1);
    b.patch(o, uy, up, color, 1);
    b.patch(ox, uy, up, color, 1);
    b.patch(oy, ux, up, color, 1);
  }
  if (spec.classes > 2) {
    for (std::size_t i = 0; i < spec.spheres; ++i) {
      const double r = b.uniform(0.15, 0.35);
      Footprint f{};
      if (!place(r, f)) continue;
      b.sphere({f.x, f.y, r}, r, b.object_color(2), 2);
    }
  }
  if (layout) layout->class_area = b.area;
  return std::move(b.cloud);
}

std::vector<PointCloud> generate_synthetic(const SyntheticSceneSpec& spec) {
  std::vector<PointCloud> rooms;
  for (std::size_t r = 0; r < spec.num_rooms; ++r) rooms.push_back(generate_room(spec, r));
  return rooms;
}

std::vector<std::filesystem::path> write_synthetic(const SyntheticSceneSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t r = 0; r < spec.num_rooms; ++r) {
    char name[32];
    std::snprintf(name, sizeof name, "room_%03zu.sptc", r);
    paths.push_back(dir / name);
    write_sptc(paths.back(), generate_room(spec, r));
  }
  return paths;
}

}  // namespace sala

#pragma once

// Brute-force reference implementations for the tests. Each one is written
// from the definition with plain loops and shares no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <tuple>
#include <vector>

#include "sala/geometry.hpp"

namespace oracle {

inline sala::PointCloud random_cloud(std::size_t n, std::uint64_t seed, double extent = 1.0, std::size_t feat_dim = 2,
                                     std::uint32_t classes = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, extent);
  std::uniform_real_distribution<double> f(-1.0, 1.0);
  sala::PointCloud c;
  c.feat_dim = feat_dim;
  std::vector<std::uint32_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    c.positions.push_back({float(u(rng)), float(u(rng)), float(u(rng))});
    for (std::size_t d = 0; d < feat_dim; ++d) c.features.push_back(float(f(rng)));
    labels.push_back(std::uint32_t(rng() % classes));
  }
  c.labels = labels;
  return c;
}

inline double dist2(const sala::Point3& a, const sala::Point3& b) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s;
}

struct GridCell {
  std::vector<std::size_t> members;
};

/// Hash-bucketing by floor(p / g); cells in order of first appearance.
inline sala::PointCloud grid_subsample(const sala::PointCloud& c, double g) {
  std::map<std::tuple<long, long, long>, std::size_t> slot;
  std::vector<GridCell> cells;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.positions[i];
    const auto key = std::make_tuple(long(std::floor(p[0] / g)), long(std::floor(p[1] / g)), long(std::floor(p[2] / g)));
    auto [it, fresh] = slot.emplace(key, cells.size());
    if (fresh) cells.emplace_back();
    cells[it->second].members.push_back(i);
  }
  sala::PointCloud out;
  out.feat_dim = c.feat_dim;
  std::vector<std::uint32_t> labels;
  for (const auto& cell : cells) {
    std::array<double, 3> pos{};
    std::vector<double> feat(c.feat_dim, 0.0);
    std::map<std::uint32_t, std::size_t> votes;
    for (auto i : cell.members) {
      for (int a = 0; a < 3; ++a) pos[a] += c.positions[i][a];
      for (std::size_t d = 0; d < c.feat_dim; ++d) feat[d] += c.features[i * c.feat_dim + d];
      if (c.labels) ++votes[(*c.labels)[i]];
    }
    const double n = double(cell.members.size());
    out.positions.push_back({float(pos[0] / n), float(pos[1] / n), float(pos[2] / n)});
    for (double v : feat) out.features.push_back(float(v / n));
    if (c.labels) {
      std::uint32_t best = 0;
      std::size_t best_n = 0;
      for (auto [label, count] : votes)  // ascending label, so ties keep the smaller
        if (count > best_n) best = label, best_n = count;
      labels.push_back(best);
    }
  }
  if (c.labels) out.labels = labels;
  return out;
}

/// Exhaustive scan: neighbors within r sorted by (distance, index), first k.
inline std::vector<std::vector<std::int32_t>> ball_query(const sala::PointCloud& centers,
                                                         const sala::PointCloud& support, double r, std::size_t k) {
  std::vector<std::vector<std::int32_t>> out(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    std::vector<std::pair<double, std::int32_t>> hits;
    for (std::size_t j = 0; j < support.size(); ++j) {
      const double d = dist2(centers.positions[i], support.positions[j]);
      if (d <= r * r) hits.emplace_back(d, std::int32_t(j));
    }
    std::sort(hits.begin(), hits.end());
    for (std::size_t s = 0; s < std::min(k, hits.size()); ++s) out[i].push_back(hits[s].second);
  }
  return out;
}

inline std::vector<std::int32_t> nearest(const sala::PointCloud& fine, const sala::PointCloud& coarse) {
  std::vector<std::int32_t> out;
  for (const auto& p : fine.positions) {
    std::int32_t best = 0;
    double best_d = dist2(p, coarse.positions[0]);
    for (std::size_t j = 1; j < coarse.size(); ++j) {
      const double d = dist2(p, coarse.positions[j]);
      if (d < best_d) best = std::int32_t(j), best_d = d;
    }
    out.push_back(best);
  }
  return out;
}

/// Linear kernel-point influence max(0, 1 - |r - x| / sigma).
inline double influence(const std::array<double, 3>& r, const std::array<double, 3>& x, double sigma) {
  const double d = std::sqrt((r[0] - x[0]) * (r[0] - x[0]) + (r[1] - x[1]) * (r[1] - x[1]) + (r[2] - x[2]) * (r[2] - x[2]));
  return std::max(0.0, 1.0 - d / sigma);
}

}  // namespace oracle

#include "sala/geometry.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>

#include "sala/errors.hpp"

namespace sala {
namespace {

constexpr std::size_t kBruteForceBelow = 256;
constexpr std::int64_t kCellBias = std::int64_t(1) << 20;

double sq_dist(const Point3& a, const Point3& b) {
  const double dx = double(a[0]) - double(b[0]);
  const double dy = double(a[1]) - double(b[1]);
  const double dz = double(a[2]) - double(b[2]);
  return dx * dx + dy * dy + dz * dz;
}

bool packable(const std::array<std::int64_t, 3>& c) {
  return std::all_of(c.begin(), c.end(), [](std::int64_t v) { return v > -kCellBias && v < kCellBias - 1; });
}

std::uint64_t pack(const std::array<std::int64_t, 3>& c) {
  return (std::uint64_t(c[0] + kCellBias) << 42) | (std::uint64_t(c[1] + kCellBias) << 21) |
         std::uint64_t(c[2] + kCellBias);
}

// Uniform hash grid over a fixed point set; read-only after construction.
class SpatialGrid {
 public:
  SpatialGrid(const std::vector<Point3>& pts, double cell) : cell_(cell) {
    std::vector<std::uint64_t> keys(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto c = voxel_cell(pts[i], cell);
      if (!packable(c)) {
        ok_ = false;
        return;
      }
      keys[i] = pack(c);
    }
    order_.resize(pts.size());
    std::iota(order_.begin(), order_.end(), 0);
    std::stable_sort(order_.begin(), order_.end(), [&](std::int32_t a, std::int32_t b) { return keys[a] < keys[b]; });
    for (std::size_t s = 0; s < order_.size();) {
      std::size_t e = s;
      while (e < order_.size() && keys[order_[e]] == keys[order_[s]]) ++e;
      ranges_.emplace(keys[order_[s]], std::make_pair(std::uint32_t(s), std::uint32_t(e)));
      s = e;
    }
  }

  bool ok() const { return ok_; }
  double cell() const { return cell_; }

  // Calls fn(index) for every point in cells whose Chebyshev distance to the
  // query's cell equals `ring`.
  template <class Fn>
  void visit_ring(const Point3& q, std::int64_t ring, Fn&& fn) const {
    const auto c = voxel_cell(q, cell_);
    for (std::int64_t dx = -ring; dx <= ring; ++dx)
      for (std::int64_t dy = -ring; dy <= ring; ++dy)
        for (std::int64_t dz = -ring; dz <= ring; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          const std::array<std::int64_t, 3> n{c[0] + dx, c[1] + dy, c[2] + dz};
          if (!packable(n)) continue;
          auto it = ranges_.find(pack(n));
          if (it == ranges_.end()) continue;
          for (auto s = it->second.first; s < it->second.second; ++s) fn(order_[s]);
        }
  }

 private:
  double cell_;
  bool ok_ = true;
  std::vector<std::int32_t> order_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, std::uint32_t>> ranges_;
};

struct Candidate {
  double d2;
  std::int32_t index;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace

void PointCloud::validate(std::optional<std::uint32_t> num_classes) const {
  if (positions.empty()) throw ValidationError("point cloud is empty");
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (float v : positions[i])
      if (!std::isfinite(v)) throw ValidationError("non-finite position at point " + std::to_string(i));
  if (features.size() != positions.size() * feat_dim) {
    throw ValidationError("feature block has " + std::to_string(features.size()) + " values, expected " +
                          std::to_string(positions.size() * feat_dim));
  }
  if (labels) {
    if (labels->size() != positions.size()) throw ValidationError("label count differs from point count");
    if (num_classes)
      for (std::size_t i = 0; i < labels->size(); ++i)
        if ((*labels)[i] >= *num_classes) {
          throw ValidationError("label " + std::to_string((*labels)[i]) + " at point " + std::to_string(i) +
                                " exceeds class count " + std::to_string(*num_classes));
        }
  }
}

PointCloud PointCloud::subset(std::span<const std::int32_t> index) const {
  PointCloud out;
  out.feat_dim = feat_dim;
  out.positions.reserve(index.size());
  out.features.reserve(index.size() * feat_dim);
  if (labels) out.labels.emplace().reserve(index.size());
  for (auto i : index) {
    out.positions.push_back(positions.at(std::size_t(i)));
    auto row = feature_row(std::size_t(i));
    out.features.insert(out.features.end(), row.begin(), row.end());
    if (labels) out.labels->push_back((*labels)[std::size_t(i)]);
  }
  return out;
}

std::size_t NeighborIndex::valid_count(std::size_t center) const {
  return std::size_t(std::count(mask.begin() + std::ptrdiff_t(center * k), mask.begin() + std::ptrdiff_t((center + 1) * k),
                                std::uint8_t(1)));
}

std::array<std::int64_t, 3> voxel_cell(const Point3& p, double grid_size) {
  return {std::int64_t(std::floor(double(p[0]) / grid_size)), std::int64_t(std::floor(double(p[1]) / grid_size)),
          std::int64_t(std::floor(double(p[2]) / grid_size))};
}

PointCloud grid_subsample(const PointCloud& cloud, double grid_size) {
  if (!(grid_size > 0.0)) throw ValidationError("grid_size must be positive");
  cloud.validate();
  std::map<std::array<std::int64_t, 3>, std::size_t> cell_of;
  std::vector<std::vector<std::int32_t>> members;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    auto [it, inserted] = cell_of.try_emplace(voxel_cell(cloud.positions[i], grid_size), members.size());
    if (inserted) members.emplace_back();
    members[it->second].push_back(std::int32_t(i));
  }
  PointCloud out;
  out.feat_dim = cloud.feat_dim;
  out.positions.reserve(members.size());
  out.features.reserve(members.size() * cloud.feat_dim);
  if (cloud.labels) out.labels.emplace().reserve(members.size());
  std::vector<double> acc(cloud.feat_dim);
  for (const auto& m : members) {
    double sx = 0, sy = 0, sz = 0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (auto i : m) {
      const auto& p = cloud.positions[std::size_t(i)];
      sx += p[0];
      sy += p[1];
      sz += p[2];
      auto row = cloud.feature_row(std::size_t(i));
      for (std::size_t f = 0; f < cloud.feat_dim; ++f) acc[f] += row[f];
    }
    const double n = double(m.size());
    out.positions.push_back({float(sx / n), float(sy / n), float(sz / n)});
    for (double a : acc) out.features.push_back(float(a / n));
    if (cloud.labels) {
      std::map<std::uint32_t, std::size_t> votes;
      for (auto i : m) ++votes[(*cloud.labels)[std::size_t(i)]];
      std::uint32_t best = votes.begin()->first;
      std::size_t best_n = 0;
      for (auto [label, count] : votes)
        if (count > best_n) {
          best = label;
          best_n = count;
        }
      out.labels->push_back(best);
    }
  }
  return out;
}

NeighborIndex ball_query(const PointCloud& centers, const PointCloud& support, double radius,
                         const BallQueryOptions& opts) {
  if (!(radius > 0.0)) throw ValidationError("ball_query radius must be positive");
  if (opts.k_max < 1) throw ValidationError("ball_query k_max must be at least 1");
  if (support.size() == 0) throw ValidationError("ball_query support is empty");
  const bool self = &centers == &support;
  const double r2 = radius * radius;
  const std::size_t k = opts.k_max;

  std::optional<SpatialGrid> grid;
  if (support.size() >= kBruteForceBelow) {
    grid.emplace(support.positions, radius);
    if (!grid->ok()) grid.reset();
  }

  NeighborIndex out;
  out.centers = centers.size();
  out.k = k;
  out.radius = radius;
  out.indices.assign(centers.size() * k, 0);
  out.mask.assign(centers.size() * k, 0);

  std::vector<Candidate> cand;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    cand.clear();
    const Point3& c = centers.positions[i];
    auto consider = [&](std::int32_t j) {
      if (self && std::size_t(j) == i) return;
      const double d2 = sq_dist(c, support.positions[std::size_t(j)]);
      if (d2 <= r2) cand.push_back({d2, j});
    };
    if (grid) {
      grid->visit_ring(c, 0, consider);
      grid->visit_ring(c, 1, consider);
    } else {
      for (std::size_t j = 0; j < support.size(); ++j) consider(std::int32_t(j));
    }
    const std::size_t room = self ? k - 1 : k;
    if (opts.select == NeighborSelect::Random && cand.size() > room) {
      std::mt19937_64 rng(opts.seed ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
      std::sort(cand.begin(), cand.end());
      std::shuffle(cand.begin(), cand.end(), rng);
      cand.resize(room);
    }
    std::sort(cand.begin(), cand.end());
    if (cand.size() > room) cand.resize(room);

    std::int32_t* idx = out.indices.data() + i * k;
    std::uint8_t* msk = out.mask.data() + i * k;
    std::size_t slot = 0;
    if (self) {
      idx[slot] = std::int32_t(i);
      msk[slot++] = 1;
    }
    for (const auto& cd : cand) {
      idx[slot] = cd.index;
      msk[slot++] = 1;
    }
    if (slot == 0) throw EmptyNeighborhoodError(i);
    for (std::size_t s = slot; s < k; ++s) idx[s] = idx[0];
  }
  return out;
}

template <class Real>
BasicTensor<Real> relative_positions(const PointCloud& centers, const PointCloud& support, const NeighborIndex& nbr) {
  if (nbr.centers != centers.size() || nbr.indices.size() != nbr.centers * nbr.k) {
    throw DimensionError("relative_positions: neighbor index built for " + std::to_string(nbr.centers) +
                         " centers, got " + std::to_string(centers.size()));
  }
  BasicTensor<Real> rel(Shape{nbr.centers, nbr.k, 3});
  for (std::size_t i = 0; i < nbr.centers; ++i)
    for (std::size_t s = 0; s < nbr.k; ++s) {
      if (!nbr.mask[i * nbr.k + s]) continue;
      const auto j = nbr.indices[i * nbr.k + s];
      if (j < 0 || std::size_t(j) >= support.size()) {
        throw DimensionError("relative_positions: neighbor index " + std::to_string(j) + " outside support");
      }
      for (std::size_t a = 0; a < 3; ++a) {
        rel(i, s, a) = Real(double(support.positions[std::size_t(j)][a]) - double(centers.positions[i][a]));
      }
    }
  return rel;
}

template BasicTensor<float> relative_positions<float>(const PointCloud&, const PointCloud&, const NeighborIndex&);
template BasicTensor<double> relative_positions<double>(const PointCloud&, const PointCloud&, const NeighborIndex&);

std::vector<std::int32_t> nn_interpolate_map(const PointCloud& fine, const PointCloud& coarse) {
  if (coarse.size() == 0) throw ValidationError("nn_interpolate_map: coarse cloud is empty");
  std::vector<std::int32_t> map(fine.size(), 0);
  auto brute = [&](std::size_t i) {
    Candidate best{std::numeric_limits<double>::infinity(), 0};
    for (std::size_t j = 0; j < coarse.size(); ++j) {
      Candidate c{sq_dist(fine.positions[i], coarse.positions[j]), std::int32_t(j)};
      if (c < best) best = c;
    }
    return best.index;
  };
  if (coarse.size() < kBruteForceBelow) {
    for (std::size_t i = 0; i < fine.size(); ++i) map[i] = brute(i);
    return map;
  }
  const auto box = bounding_box(coarse);
  double extent = 0.0;
  for (std::size_t a = 0; a < 3; ++a) extent = std::max(extent, double(box[1][a]) - double(box[0][a]));
  // Roughly a handful of coarse points per occupied cell on surface-like data.
  const double cell = std::max(extent / std::sqrt(double(coarse.size())), 1e-6);
  SpatialGrid grid(coarse.positions, cell);
  if (!grid.ok()) {
    for (std::size_t i = 0; i < fine.size(); ++i) map[i] = brute(i);
    return map;
  }
  for (std::size_t i = 0; i < fine.size(); ++i) {
    Candidate best{std::numeric_limits<double>::infinity(), 0};
    const Point3& p = fine.positions[i];
    for (std::int64_t ring = 0;; ++ring) {
      grid.visit_ring(p, ring, [&](std::int32_t j) {
        Candidate c{sq_dist(p, coarse.positions[std::size_t(j)]), j};
        if (c < best) best = c;
      });
      // Unvisited points lie at least ring * cell away.
      const double reach = double(ring) * cell;
      if (std::isfinite(best.d2) && reach * reach > best.d2) break;
    }
    map[i] = best.index;
  }
  return map;
}

std::vector<ResolutionLevel> build_pyramid(const PointCloud& cloud, double base_grid, double base_radius,
                                           std::size_t levels) {
  if (levels < 1) throw ValidationError("build_pyramid needs at least one level");
  if (!(base_grid > 0.0) || !(base_radius > 0.0)) throw ValidationError("build_pyramid: grid and radius must be positive");
  std::vector<ResolutionLevel> out;
  out.reserve(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    ResolutionLevel level;
    level.grid_size = base_grid * std::ldexp(1.0, int(l));
    level.ball_radius = base_radius * std::ldexp(1.0, int(l));
    level.cloud = grid_subsample(l == 0 ? cloud : out.back().cloud, level.grid_size);
    if (level.cloud.size() == 0) {
      throw DegeneratePyramidError("pyramid level " + std::to_string(l) + " has no points");
    }
    out.push_back(std::move(level));
  }
  for (std::size_t l = 0; l + 1 < levels; ++l) out[l].upsample_map = nn_interpolate_map(out[l].cloud, out[l + 1].cloud);
  return out;
}

std::array<Point3, 2> bounding_box(const PointCloud& cloud) {
  if (cloud.size() == 0) throw ValidationError("bounding_box of an empty cloud");
  Point3 lo = cloud.positions[0], hi = cloud.positions[0];
  for (const auto& p : cloud.positions)
    for (std::size_t a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  return {lo, hi};
}

PointCloud translated(PointCloud cloud, const std::array<double, 3>& offset) {
  for (auto& p : cloud.positions)
    for (std::size_t a = 0; a < 3; ++a) p[a] = float(double(p[a]) + offset[a]);
  return cloud;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("SPTC1 payload truncated");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

std::uint64_t header_field(std::istream& in, const std::string& key) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("SPTC1 header truncated before '" + key + "'");
  std::istringstream ls(line);
  std::string k;
  std::int64_t v = -1;
  if (!(ls >> k >> v) || k != key || v < 0) throw FormatError("SPTC1 header: expected '" + key + " <n>', got '" + line + "'");
  return std::uint64_t(v);
}

}  // namespace

void write_sptc(std::ostream& out, const PointCloud& cloud) {
  out << "SPTC1\n"
      << "points " << cloud.size() << "\n"
      << "feat_dim " << cloud.feat_dim << "\n"
      << "has_labels " << (cloud.labels ? 1 : 0) << "\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (float v : cloud.positions[i]) put_f32(out, v);
    for (float v : cloud.feature_row(i)) put_f32(out, v);
  }
  if (cloud.labels)
    for (auto l : *cloud.labels) put_u32(out, l);
  if (!out) throw FormatError("SPTC1 write failed");
}

void write_sptc(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_sptc(out, cloud);
}

PointCloud read_sptc(std::istream& in) {
  std::string magic;
  if (!std::getline(in, magic) || magic != "SPTC1") throw FormatError("not an SPTC1 file");
  const auto n = header_field(in, "points");
  const auto d = header_field(in, "feat_dim");
  const auto has_labels = header_field(in, "has_labels");
  if (has_labels > 1) throw FormatError("SPTC1 has_labels must be 0 or 1");
  PointCloud cloud;
  cloud.feat_dim = std::size_t(d);
  cloud.positions.resize(n);
  cloud.features.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : cloud.positions[i]) v = get_f32(in);
    for (std::size_t f = 0; f < d; ++f) cloud.features[i * d + f] = get_f32(in);
  }
  if (has_labels) {
    cloud.labels.emplace(n);
    for (auto& l : *cloud.labels) l = get_u32(in);
  }
  return cloud;
}

PointCloud read_sptc(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open point cloud " + path.string());
  return read_sptc(in);
}

}  // namespace sala

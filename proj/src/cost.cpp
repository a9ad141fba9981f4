#include "sala/cost.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sala/checkpoint.hpp"
#include "sala/errors.hpp"
#include "sala/synthetic.hpp"

namespace sala {

namespace {

using u64 = std::uint64_t;

u64 unary_params(std::size_t in, std::size_t out, bool bn) { return u64(in) * out + (bn ? 2 * u64(out) : 0); }

struct AggMacs {
  u64 macs = 0;
  u64 other = 0;
};

AggMacs aggregator_macs(const AggregatorConfig& cfg, std::size_t centers, std::size_t k) {
  const u64 nk = u64(centers) * k;
  const u64 s = cfg.effective_groups(), ph = cfg.effective_pos_hidden();
  AggMacs m;
  if (cfg.family == AggregatorFamily::KpconvRigid) {
    m.macs = nk * cfg.c_in * cfg.c_out * s;
    m.other = nk * s * 4 + nk * cfg.c_out * s;  // influence distances, neighbor sum
  } else {
    const u64 feat_in = cfg.c_in + (cfg.concat_position() ? ph : 0);
    m.macs = nk * feat_in * cfg.c_out * s + nk * 3 * ph;
    if (cfg.learned_assignment()) {
      m.macs += nk * ph * s;
      m.other += nk * s;  // softmax exponentials
    }
    m.other += nk * ph + nk * cfg.c_out * s;  // ReLU, neighbor reduction
  }
  m.other += 2 * u64(centers) * cfg.c_out;  // normalization and ReLU
  return m;
}

AggregatorConfig layer_config(const AggregatorConfig& agg, std::size_t width) {
  AggregatorConfig cfg = agg;
  if (cfg.family == AggregatorFamily::Pointwise) cfg.groups = 1;
  cfg.c_in = cfg.c_out = width;
  return cfg;
}

void add_row(CostReport& r, CostRow row) {
  r.params += row.params;
  r.macs += row.macs;
  r.other_ops += row.other_ops;
  r.breakdown.push_back(std::move(row));
}

// Shared walk over the network; `counts` empty means parameters only.
CostReport walk(const NetworkSpec& spec, const AggregatorConfig& agg, const std::vector<std::size_t>& counts,
                std::size_t k) {
  spec.validate();
  const bool bn = spec.batch_norm;
  const bool with_macs = !counts.empty();
  if (with_macs && counts.size() != spec.stages) {
    throw DimensionError("count_macs: " + std::to_string(counts.size()) + " point counts for " +
                         std::to_string(spec.stages) + " levels");
  }
  auto n = [&](std::size_t l) -> u64 { return with_macs ? counts[l] : 0; };
  auto norm_ops = [&](u64 rows, std::size_t ch) -> u64 { return bn ? 2 * rows * ch : rows * ch; };
  CostReport r;
  add_row(r, {"lift", unary_params(spec.in_features, spec.width, bn), n(0) * spec.in_features * spec.width,
              norm_ops(n(0), spec.width)});
  std::vector<std::size_t> counter(spec.stages, 0);
  for (const auto& [level, block] : spec.encoder_blocks()) {
    const bool strided = block.kind == BlockKind::StridedResidual;
    const std::size_t mid = block.bottleneck_width();
    const u64 centers = n(level), support = strided ? n(level - 1) : n(level);
    const AggregatorConfig cfg = layer_config(agg, mid);
    CostRow row;
    row.name = "enc" + std::to_string(level) + "." + std::to_string(counter[level]++) + (strided ? " (strided)" : "");
    row.params = unary_params(block.in_ch, mid, bn) + aggregator_params(cfg, bn) + unary_params(mid, block.out_ch, bn);
    const AggMacs am = aggregator_macs(cfg, std::size_t(centers), k);
    row.macs = support * block.in_ch * mid + am.macs + centers * mid * block.out_ch;
    row.other_ops = norm_ops(support, mid) + am.other + norm_ops(centers, block.out_ch) + centers * block.out_ch;
    if (block.in_ch != block.out_ch) {
      row.params += unary_params(block.in_ch, block.out_ch, bn);
      row.macs += centers * block.in_ch * block.out_ch;
      row.other_ops += (bn ? 2 : 0) * centers * block.out_ch;
    }
    if (strided) row.other_ops += centers * k * block.in_ch;  // max-pool shortcut
    add_row(r, std::move(row));
  }
  for (std::size_t l = spec.stages - 1; l-- > 0;) {
    const std::size_t in = spec.stage_width(l + 1) + spec.stage_width(l), out = spec.stage_width(l);
    add_row(r, {"dec" + std::to_string(l), unary_params(in, out, bn), n(l) * in * out, norm_ops(n(l), out)});
  }
  add_row(r, {"final", unary_params(spec.width, spec.width, bn), n(0) * spec.width * spec.width,
              norm_ops(n(0), spec.width)});
  for (std::size_t h = 0; h < spec.num_heads; ++h) {
    // Only one head runs per forward pass.
    const u64 rows = h == 0 ? n(0) : 0;
    add_row(r, {spec.num_heads == 1 ? "head" : "head" + std::to_string(h),
                u64(spec.width) * spec.num_classes + spec.num_classes, rows * spec.width * spec.num_classes,
                rows * spec.num_classes});
  }
  r.raw_f32_bytes = 4 * r.params;
  r.point_counts = counts;
  r.k = k;
  return r;
}

}  // namespace

std::uint64_t aggregator_params(const AggregatorConfig& cfg, bool batch_norm) {
  const u64 s = cfg.effective_groups(), ph = cfg.effective_pos_hidden();
  u64 p = batch_norm ? 2 * u64(cfg.c_out) : 0;
  if (cfg.family == AggregatorFamily::KpconvRigid) return p + u64(cfg.c_in) * s * cfg.c_out;
  p += 3 * ph + ph;
  if (cfg.learned_assignment()) p += ph * s + s;
  p += (u64(cfg.c_in) + (cfg.concat_position() ? ph : 0)) * s * cfg.c_out;
  return p;
}

CostReport count_params(const NetworkSpec& spec, const AggregatorConfig& agg) { return walk(spec, agg, {}, 0); }

CostReport count_macs(const NetworkSpec& spec, const AggregatorConfig& agg, const std::vector<std::size_t>& point_counts,
                      std::size_t k) {
  if (point_counts.empty()) throw DimensionError("count_macs needs point counts");
  return walk(spec, agg, point_counts, k);
}

std::uint64_t weight_footprint(const std::filesystem::path& checkpoint) {
  read_checkpoint(checkpoint);
  return std::filesystem::file_size(checkpoint);
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["params"] = params;
  j["macs"] = macs;
  j["gmacs"] = double(macs) / 1e9;
  j["other_ops"] = other_ops;
  j["weight_bytes"] = weight_bytes;
  j["raw_f32_bytes"] = raw_f32_bytes;
  j["k"] = k;
  j["point_counts"] = point_counts;
  j["source"] = source;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : breakdown) {
    rows.push_back({{"name", row.name}, {"params", row.params}, {"macs", row.macs}, {"other_ops", row.other_ops}});
  }
  j["breakdown"] = rows;
  return j.dump(2) + "\n";
}

std::string CostReport::to_table() const {
  std::size_t name_w = 6;
  for (const auto& row : breakdown) name_w = std::max(name_w, row.name.size());
  std::ostringstream os;
  os << std::left << std::setw(int(name_w)) << "module" << std::right << std::setw(12) << "params" << std::setw(16)
     << "MACs" << std::setw(16) << "other ops" << "\n";
  os << std::string(name_w + 44, '-') << "\n";
  for (const auto& row : breakdown) {
    os << std::left << std::setw(int(name_w)) << row.name << std::right << std::setw(12) << row.params
       << std::setw(16) << row.macs << std::setw(16) << row.other_ops << "\n";
  }
  os << std::string(name_w + 44, '-') << "\n";
  os << std::left << std::setw(int(name_w)) << "total" << std::right << std::setw(12) << params << std::setw(16)
     << macs << std::setw(16) << other_ops << "\n\n";
  os << std::fixed << std::setprecision(3);
  os << "params       " << double(params) / 1e6 << " M\n";
  if (!point_counts.empty()) {
    os << "GMACs        " << double(macs) / 1e9 << " (k = " << k << ", points per level:";
    for (auto c : point_counts) os << " " << c;
    os << ")\n";
  }
  os << "checkpoint   " << weight_bytes << " bytes (" << double(weight_bytes) / 1e6 << " MB)\n";
  os << "raw f32      " << raw_f32_bytes << " bytes\n";
  if (!source.empty()) os << "points from  " << source << "\n";
  return os.str();
}

PointCloud benchmark_cloud(std::size_t points) {
  SyntheticSceneSpec spec;
  spec.room_size = 4.0;
  spec.wall_height = 2.5;
  spec.density = 2000.0;
  spec.boxes = 6;
  spec.spheres = 6;
  const PointCloud sub = grid_subsample(generate_room(spec, 0), 0.04);
  if (sub.size() < points) {
    throw ValidationError("benchmark_cloud: the room has " + std::to_string(sub.size()) + " points, " +
                          std::to_string(points) + " requested");
  }
  const double c[3] = {2.0, 2.0, 0.8};
  std::vector<double> d2(sub.size());
  for (std::size_t i = 0; i < sub.size(); ++i) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += (sub.positions[i][a] - c[a]) * (sub.positions[i][a] - c[a]);
    d2[i] = s;
  }
  std::vector<std::int32_t> idx(sub.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) { return d2[a] < d2[b]; });
  idx.resize(points);
  return sub.subset(idx);
}

std::vector<std::size_t> pyramid_point_counts(const PointCloud& cloud, const GeometrySpec& geo, std::size_t levels) {
  std::vector<std::size_t> counts;
  for (const auto& level : build_pyramid(cloud, geo.base_grid, geo.base_radius, levels)) {
    counts.push_back(level.cloud.size());
  }
  return counts;
}

}  // namespace sala

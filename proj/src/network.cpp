#include "sala/network.hpp"

#include <algorithm>

#include "sala/checkpoint.hpp"
#include "sala/errors.hpp"

namespace sala {

namespace {

template <class Real>
BasicTensor<Real> to_real(const Tensor& t) {
  if constexpr (std::is_same_v<Real, float>) return t;
  else return t.template cast<Real>();
}

Tensor scaled_offsets(const PointCloud& centers, const PointCloud& support, const NeighborIndex& nbr) {
  Tensor rel = relative_positions<float>(centers, support, nbr);
  const float inv = float(1.0 / nbr.radius);
  for (auto& v : rel.storage()) v *= inv;
  return rel;
}

}  // namespace

std::vector<std::pair<std::size_t, BlockSpec>> NetworkSpec::encoder_blocks() const {
  std::vector<std::pair<std::size_t, BlockSpec>> out;
  for (std::size_t l = 0; l < stages; ++l) {
    const std::size_t w = stage_width(l);
    for (std::size_t b = 0; b < blocks_per_stage[l]; ++b) {
      if (l > 0 && b == 0) out.push_back({l, {BlockKind::StridedResidual, stage_width(l - 1), w, bottleneck}});
      else out.push_back({l, {BlockKind::Residual, w, w, bottleneck}});
    }
  }
  return out;
}

void NetworkSpec::validate() const {
  if (width == 0) throw ConfigError("network width must be positive");
  if (stages < 1) throw ConfigError("network needs at least one stage");
  if (blocks_per_stage.size() != stages) {
    throw ConfigError("blocks_per_stage lists " + std::to_string(blocks_per_stage.size()) + " stages, network has " +
                      std::to_string(stages));
  }
  for (std::size_t l = 0; l < stages; ++l) {
    if (blocks_per_stage[l] == 0 && l > 0) throw ConfigError("every stage after the first needs a strided block");
  }
  if (bottleneck == 0 || width % bottleneck != 0) {
    throw ConfigError("width " + std::to_string(width) + " not divisible by bottleneck ratio " +
                      std::to_string(bottleneck));
  }
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (num_heads == 0) throw ConfigError("num_heads must be positive");
  if (in_features == 0) throw ConfigError("in_features must be positive");
}

std::vector<std::size_t> PreparedInput::level_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& l : levels) out.push_back(l.cloud.size());
  return out;
}

PreparedInput prepare_input(const PointCloud& cloud, const GeometrySpec& geo, std::size_t stages) {
  PreparedInput in;
  in.input_points = cloud.size();
  in.levels = build_pyramid(cloud, geo.base_grid, geo.base_radius, stages);
  BallQueryOptions opts{geo.k_max, geo.select, geo.select_seed};
  for (std::size_t l = 0; l < stages; ++l) {
    const auto& lvl = in.levels[l];
    in.self_nbr.push_back(ball_query(lvl.cloud, lvl.cloud, lvl.ball_radius, opts));
    in.self_rel.push_back(scaled_offsets(lvl.cloud, lvl.cloud, in.self_nbr.back()));
    if (l == 0) {
      in.cross_nbr.emplace_back();
      in.cross_rel.emplace_back();
      continue;
    }
    const auto& fine = in.levels[l - 1];
    in.cross_nbr.push_back(ball_query(lvl.cloud, fine.cloud, fine.ball_radius, opts));
    in.cross_rel.push_back(scaled_offsets(lvl.cloud, fine.cloud, in.cross_nbr.back()));
  }
  in.input_map = nn_interpolate_map(cloud, in.levels[0].cloud);
  return in;
}

namespace {

void append_cloud(PointCloud& dst, const PointCloud& src) {
  if (dst.positions.empty() && dst.features.empty()) {
    dst.feat_dim = src.feat_dim;
    if (src.labels) dst.labels.emplace();
  }
  if (dst.feat_dim != src.feat_dim || dst.labels.has_value() != src.labels.has_value()) {
    throw DimensionError("stack_inputs: clouds differ in features or labels");
  }
  dst.positions.insert(dst.positions.end(), src.positions.begin(), src.positions.end());
  dst.features.insert(dst.features.end(), src.features.begin(), src.features.end());
  if (src.labels) dst.labels->insert(dst.labels->end(), src.labels->begin(), src.labels->end());
}

void append_shifted(std::vector<std::int32_t>& dst, const std::vector<std::int32_t>& src, std::size_t shift) {
  for (auto v : src) dst.push_back(v + std::int32_t(shift));
}

void append_neighbors(NeighborIndex& dst, const NeighborIndex& src, std::size_t shift) {
  if (dst.centers == 0 && dst.indices.empty()) {
    dst.k = src.k;
    dst.radius = src.radius;
  }
  if (dst.k != src.k) throw DimensionError("stack_inputs: neighbor widths differ");
  dst.centers += src.centers;
  append_shifted(dst.indices, src.indices, shift);
  dst.mask.insert(dst.mask.end(), src.mask.begin(), src.mask.end());
}

void append_rows(Tensor& dst, const Tensor& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
    return;
  }
  Shape shape = dst.shape();
  shape[0] += src.extent(0);
  std::vector<float> data = dst.storage();
  data.insert(data.end(), src.storage().begin(), src.storage().end());
  dst = Tensor(std::move(shape), std::move(data));
}

}  // namespace

PreparedInput stack_inputs(std::span<const PreparedInput> parts) {
  if (parts.empty()) throw ValidationError("stack_inputs: nothing to stack");
  if (parts.size() == 1) return parts[0];
  const std::size_t stages = parts[0].levels.size();
  PreparedInput out;
  out.levels.resize(stages);
  out.self_nbr.resize(stages);
  out.cross_nbr.resize(stages);
  out.self_rel.resize(stages);
  out.cross_rel.resize(stages);
  std::vector<std::size_t> offset(stages, 0);
  for (const auto& p : parts) {
    if (p.levels.size() != stages) throw DimensionError("stack_inputs: pyramids differ in depth");
    for (std::size_t l = 0; l < stages; ++l) {
      auto& lvl = out.levels[l];
      lvl.grid_size = p.levels[l].grid_size;
      lvl.ball_radius = p.levels[l].ball_radius;
      append_cloud(lvl.cloud, p.levels[l].cloud);
      if (l + 1 < stages) append_shifted(lvl.upsample_map, p.levels[l].upsample_map, offset[l + 1]);
      append_neighbors(out.self_nbr[l], p.self_nbr[l], offset[l]);
      append_rows(out.self_rel[l], p.self_rel[l]);
      if (l > 0) {
        append_neighbors(out.cross_nbr[l], p.cross_nbr[l], offset[l - 1]);
        append_rows(out.cross_rel[l], p.cross_rel[l]);
      }
    }
    append_shifted(out.input_map, p.input_map, offset[0]);
    out.input_points += p.input_points;
    for (std::size_t l = 0; l < stages; ++l) offset[l] += p.levels[l].cloud.size();
  }
  return out;
}

template <class Real>
ResidualBlock<Real>::ResidualBlock(ParameterSet<Real>& params, const std::string& name, const BlockSpec& spec,
                                   const NetworkSpec& net, const AggregatorConfig& agg, std::mt19937_64& rng)
    : spec_(spec) {
  const std::size_t mid = spec.bottleneck_width();
  if (mid == 0 || spec.out_ch % spec.bottleneck != 0) {
    throw ConfigError(name + ": width " + std::to_string(spec.out_ch) + " not divisible by bottleneck ratio");
  }
  const Real slope = Real(net.leaky_slope);
  reduce_ = Unary<Real>(params, name + ".reduce", spec.in_ch, mid, net.batch_norm, slope, rng);
  AggregatorConfig cfg = agg;
  cfg.c_in = mid;
  cfg.c_out = mid;
  agg_ = Aggregator<Real>(params, name + ".agg", cfg, net.batch_norm, rng);
  expand_ = Unary<Real>(params, name + ".expand", mid, spec.out_ch, net.batch_norm, slope, rng);
  project_ = spec.in_ch != spec.out_ch;
  if (project_) {
    shortcut_ = Unary<Real>(params, name + ".shortcut", spec.in_ch, spec.out_ch, net.batch_norm, std::nullopt, rng);
  }
}

template <class Real>
BasicVar<Real> ResidualBlock<Real>::operator()(BasicVar<Real> x, const NeighborIndex& nbr,
                                               const BasicTensor<Real>& rel) const {
  if (x.value().cols() != spec_.in_ch) {
    throw DimensionError("block expects " + std::to_string(spec_.in_ch) + " channels, got " +
                         shape_string(x.shape()));
  }
  const NeighborSlots slots = NeighborSlots::from(nbr);
  const bool strided = spec_.kind == BlockKind::StridedResidual;
  if (!strided && x.value().rows() != nbr.centers) {
    throw DimensionError("residual block: " + std::to_string(x.value().rows()) + " rows at a level of " +
                         std::to_string(nbr.centers) + " points");
  }
  auto y = expand_(agg_(reduce_(x), slots, rel));
  BasicVar<Real> sc = x;
  if (strided) {
    auto pooled = ops::gather_rows(x, slots.indices, Shape{slots.centers, slots.k});
    sc = ops::max_reduce_neighbors(pooled, slots.mask, slots.indices).out;
  }
  if (project_) sc = shortcut_(sc);
  return ops::add(sc, y);
}

template <class Real>
SalaNet<Real>::SalaNet(const NetworkSpec& spec, const AggregatorConfig& agg, std::uint64_t seed)
    : spec_(spec), agg_(agg) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const Real slope = Real(spec_.leaky_slope);
  lift_ = Unary<Real>(params_, "lift", spec_.in_features, spec_.width, spec_.batch_norm, slope, rng);
  std::vector<std::size_t> counter(spec_.stages, 0);
  for (const auto& [level, block] : spec_.encoder_blocks()) {
    const std::string name = "enc" + std::to_string(level) + "." + std::to_string(counter[level]++);
    blocks_.emplace_back(level, ResidualBlock<Real>(params_, name, block, spec_, agg_, rng));
  }
  for (std::size_t l = 0; l + 1 < spec_.stages; ++l) {
    const std::size_t in = spec_.stage_width(l + 1) + spec_.stage_width(l);
    decoder_.emplace_back(params_, "dec" + std::to_string(l), in, spec_.stage_width(l), spec_.batch_norm, slope, rng);
  }
  final_ = Unary<Real>(params_, "final", spec_.width, spec_.width, spec_.batch_norm, slope, rng);
  for (std::size_t h = 0; h < spec_.num_heads; ++h) {
    const std::string name = spec_.num_heads == 1 ? "head" : "head" + std::to_string(h);
    auto* w = &params_.add(name + ".weight", kaiming_uniform<Real>(spec_.width, spec_.num_classes, rng));
    auto* b = &params_.add(name + ".bias", BasicTensor<Real>(Shape{spec_.num_classes}), false);
    heads_.emplace_back(w, b);
  }
}

template <class Real>
std::vector<BasicVar<Real>> SalaNet<Real>::encode(BasicTape<Real>& tape, const PreparedInput& in) const {
  if (in.levels.size() != spec_.stages) {
    throw DimensionError("input prepared with " + std::to_string(in.levels.size()) + " levels, network has " +
                         std::to_string(spec_.stages) + " stages");
  }
  const PointCloud& base = in.levels[0].cloud;
  if (base.feat_dim != spec_.in_features) {
    throw ConfigError("input has " + std::to_string(base.feat_dim) + " features per point, network expects " +
                      std::to_string(spec_.in_features));
  }
  auto x = lift_(tape.constant(BasicTensor<Real>(Shape{base.size(), base.feat_dim},
                                                 std::vector<Real>(base.features.begin(), base.features.end()))));
  std::vector<BasicVar<Real>> out(spec_.stages);
  std::size_t current = 0;
  for (const auto& [level, block] : blocks_) {
    if (level != current) {
      out[current] = x;
      current = level;
    }
    const bool strided = block.spec().kind == BlockKind::StridedResidual;
    const auto& nbr = strided ? in.cross_nbr[level] : in.self_nbr[level];
    x = block(x, nbr, to_real<Real>(strided ? in.cross_rel[level] : in.self_rel[level]));
  }
  out[current] = x;
  return out;
}

template <class Real>
BasicVar<Real> SalaNet<Real>::decode(const std::vector<BasicVar<Real>>& encoded, const PreparedInput& in) const {
  if (encoded.size() != spec_.stages) throw DimensionError("decode needs features for every level");
  BasicVar<Real> x = encoded.back();
  for (std::size_t l = spec_.stages - 1; l-- > 0;) {
    const auto& map = in.levels[l].upsample_map;
    auto up = ops::gather_rows(x, map, Shape{map.size()});
    x = decoder_[l](ops::concat_lastdim(up, encoded[l]));
  }
  return final_(x);
}

template <class Real>
BasicVar<Real> SalaNet<Real>::forward(BasicTape<Real>& tape, const PreparedInput& in, std::size_t head) const {
  if (head >= heads_.size()) {
    throw ConfigError("head " + std::to_string(head) + " requested, network has " + std::to_string(heads_.size()));
  }
  return forward_head(tape, decode(encode(tape, in), in), in, head);
}

template <class Real>
BasicVar<Real> SalaNet<Real>::forward(BasicTape<Real>& tape, const PreparedInput& in,
                                      std::span<const std::size_t> point_heads) const {
  if (point_heads.size() != in.input_map.size()) {
    throw DimensionError("forward: " + std::to_string(point_heads.size()) + " head ids for " +
                         std::to_string(in.input_map.size()) + " points");
  }
  const std::size_t h = heads_.size();
  for (auto id : point_heads)
    if (id >= h) throw ConfigError("head " + std::to_string(id) + " requested, network has " + std::to_string(h));
  auto features = decode(encode(tape, in), in);
  if (h == 1) return forward_head(tape, features, in, 0);
  // Every head on every row, then each point picks its own head's row.
  BasicVar<Real> all;
  for (const auto& [w, b] : heads_) {
    auto logits = ops::linear(features, tape.parameter(*w), tape.parameter(*b));
    all = all.valid() ? ops::concat_lastdim(all, logits) : logits;
  }
  const std::size_t rows = features.value().rows();
  all = ops::reshape(all, Shape{rows * h, spec_.num_classes});
  std::vector<std::int32_t> pick(point_heads.size());
  for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = in.input_map[i] * std::int32_t(h) + std::int32_t(point_heads[i]);
  return ops::gather_rows(all, pick, Shape{pick.size()});
}

template <class Real>
BasicVar<Real> SalaNet<Real>::forward_head(BasicTape<Real>& tape, BasicVar<Real> features, const PreparedInput& in,
                                           std::size_t head) const {
  auto logits = ops::linear(features, tape.parameter(*heads_[head].first), tape.parameter(*heads_[head].second));
  return ops::gather_rows(logits, in.input_map, Shape{in.input_map.size()});
}

template <class Real>
void SalaNet<Real>::save(const std::filesystem::path& path) const {
  write_checkpoint(path, params_.export_parameters());
  write_checkpoint(buffers_path(path), params_.export_buffers());
}

template <class Real>
void SalaNet<Real>::load(const std::filesystem::path& path) {
  params_.import_parameters(read_checkpoint(path));
  const auto buffers = buffers_path(path);
  if (std::filesystem::exists(buffers)) params_.import_buffers(read_checkpoint(buffers));
}

std::filesystem::path buffers_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".stats";
  return p;
}

template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class SalaNet<float>;
template class SalaNet<double>;

}  // namespace sala

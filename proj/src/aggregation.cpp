#include "sala/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sala/errors.hpp"

namespace sala {

namespace {

struct FamilyName {
  AggregatorFamily family;
  std::string_view name;
};

constexpr FamilyName kFamilies[] = {
    {AggregatorFamily::Sala, "sala"},           {AggregatorFamily::SalaSum, "sala-sum"},
    {AggregatorFamily::SalaNoPos, "sala-nopos"}, {AggregatorFamily::SalaHard, "sala-hard"},
    {AggregatorFamily::SalaNoAssign, "sala-ones"}, {AggregatorFamily::Pointwise, "pointwise"},
    {AggregatorFamily::KpconvRigid, "kpconv-rigid"},
};

void check_slots(const NeighborSlots& slots) {
  if (slots.indices.size() != slots.centers * slots.k || slots.mask.size() != slots.centers * slots.k) {
    throw DimensionError("neighbor slots: " + std::to_string(slots.indices.size()) + " indices and " +
                         std::to_string(slots.mask.size()) + " mask entries for " + std::to_string(slots.centers) +
                         "x" + std::to_string(slots.k));
  }
}

template <class Real>
void check_simplex(const BasicTensor<Real>& q, std::span<const std::uint8_t> mask) {
  const std::size_t s = q.cols();
  for (std::size_t r = 0; r < q.rows(); ++r) {
    if (!mask[r]) continue;
    double total = 0.0;
    for (std::size_t g = 0; g < s; ++g) {
      const double v = q[r * s + g];
      if (v < -1e-4 || v > 1.0 + 1e-4) throw ValidationError("assignment entry outside [0,1] in row " + std::to_string(r));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-4) throw ValidationError("assignment row " + std::to_string(r) + " sums to " + std::to_string(total));
  }
}

// Encodes, scales, reduces and sums groups once the per-slot feature half is
// available as (N, k, S * c_out).
template <class Real>
BasicVar<Real> finish_sala(BasicVar<Real> zf, BasicVar<Real> r, BasicVar<Real> q, BasicVar<Real> pos_group,
                           const NeighborSlots& slots, const SalaForwardOptions& opts) {
  const std::size_t s = opts.groups;
  if (q.value().cols() != s || q.value().rows() != slots.centers * slots.k) {
    throw DimensionError("sala_forward: assignment " + shape_string(q.shape()) + " for " + std::to_string(s) +
                         " groups");
  }
  if (opts.check_simplex) check_simplex(q.value(), slots.mask);
  BasicVar<Real> z = zf;
  if (r.valid()) z = ops::add(z, ops::linear(r, pos_group));
  z = ops::group_scale(z, q);
  BasicVar<Real> reduced = opts.reduce == Reduction::Max ? ops::max_reduce_neighbors(z, slots.mask, slots.indices).out
                                                         : ops::sum_reduce_neighbors(z, slots.mask, slots.indices);
  return ops::sum_groups(reduced, s);
}

}  // namespace

std::string_view family_name(AggregatorFamily family) {
  for (const auto& f : kFamilies)
    if (f.family == family) return f.name;
  return "unknown";
}

AggregatorFamily parse_family(std::string_view name) {
  for (const auto& f : kFamilies)
    if (f.name == name) return f.family;
  std::string known;
  for (const auto& f : kFamilies) known += (known.empty() ? "" : ", ") + std::string(f.name);
  throw ConfigError("unknown aggregator family '" + std::string(name) + "' (expected one of " + known + ")");
}

std::size_t AggregatorConfig::effective_pos_hidden() const {
  if (pos_hidden) return pos_hidden;
  return std::max<std::size_t>(8, c_out / 4);
}

bool AggregatorConfig::concat_position() const {
  return family != AggregatorFamily::SalaNoPos && family != AggregatorFamily::KpconvRigid;
}

bool AggregatorConfig::learned_assignment() const {
  switch (family) {
    case AggregatorFamily::Sala:
    case AggregatorFamily::SalaSum:
    case AggregatorFamily::SalaHard:
    case AggregatorFamily::SalaNoPos:
      return true;
    default:
      return false;
  }
}

void AggregatorConfig::validate() const {
  if (groups < 1) throw ConfigError("aggregator groups must be >= 1");
  if (c_in == 0 || c_out == 0) throw ConfigError("aggregator channel widths must be positive");
  if (family == AggregatorFamily::SalaHard && groups != 2) {
    throw UnsupportedConfigError("sala-hard thresholds binary assignments and needs groups = 2, got " +
                                 std::to_string(groups));
  }
  if (family == AggregatorFamily::KpconvRigid) {
    if (!(sigma > 0.0)) throw ConfigError("kpconv-rigid needs sigma > 0");
    if (groups > 32) throw UnsupportedConfigError("kpconv-rigid supports at most 32 kernel points");
    if (!kernel_points.empty()) {
      if (kernel_points.size() != groups) {
        throw ConfigError("kpconv-rigid: " + std::to_string(kernel_points.size()) + " kernel points for " +
                          std::to_string(groups) + " groups");
      }
      for (const auto& p : kernel_points) {
        if (std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) > 1.0 + 1e-12) {
          throw ConfigError("kpconv-rigid: kernel point outside the unit ball");
        }
      }
    }
  }
}

template <class Real>
SalaWeights<Real> SalaWeights<Real>::create(ParameterSet<Real>& params, const std::string& prefix,
                                            const AggregatorConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  SalaWeights w;
  const std::size_t s = cfg.effective_groups(), ph = cfg.effective_pos_hidden();
  if (cfg.family == AggregatorFamily::KpconvRigid) {
    w.feat_group = &params.add(prefix + ".kernel", kaiming_uniform<Real>(cfg.c_in, s * cfg.c_out, rng));
    return w;
  }
  w.pos_w = &params.add(prefix + ".pos.weight", kaiming_uniform<Real>(3, ph, rng));
  w.pos_b = &params.add(prefix + ".pos.bias", BasicTensor<Real>(Shape{ph}), false);
  if (cfg.learned_assignment()) {
    w.sa_w = &params.add(prefix + ".assign.weight", BasicTensor<Real>(Shape{ph, s}));
    w.sa_b = &params.add(prefix + ".assign.bias", BasicTensor<Real>(Shape{s}), false);
  }
  const std::size_t fan_in = cfg.c_in + (cfg.concat_position() ? ph : 0);
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  if (cfg.concat_position()) {
    BasicTensor<Real> wp(Shape{ph, s * cfg.c_out});
    for (auto& v : wp.storage()) v = Real(dist(rng));
    w.pos_group = &params.add(prefix + ".group.pos", std::move(wp));
  }
  BasicTensor<Real> wf(Shape{cfg.c_in, s * cfg.c_out});
  for (auto& v : wf.storage()) v = Real(dist(rng));
  w.feat_group = &params.add(prefix + ".group.feat", std::move(wf));
  return w;
}

template <class Real>
void SalaWeights<Real>::set_group_weight(const AggregatorConfig& cfg, std::size_t g, const BasicTensor<Real>& w) {
  const std::size_t s = cfg.effective_groups(), co = cfg.c_out;
  const std::size_t ph = pos_group ? pos_group->value.extent(0) : 0;
  if (g >= s || w.rank() != 2 || w.extent(0) != ph + cfg.c_in || w.extent(1) != co) {
    throw DimensionError("set_group_weight: group " + std::to_string(g) + " block " + shape_string(w.shape()));
  }
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t c = 0; c < co; ++c) pos_group->value[i * s * co + g * co + c] = w[i * co + c];
  for (std::size_t i = 0; i < cfg.c_in; ++i)
    for (std::size_t c = 0; c < co; ++c) feat_group->value[i * s * co + g * co + c] = w[(ph + i) * co + c];
}

template <class Real>
BasicVar<Real> positional_encode(BasicVar<Real> rel, BasicVar<Real> w, BasicVar<Real> b,
                                 std::span<const std::uint8_t> mask) {
  if (rel.value().rank() != 3 || rel.value().cols() != 3) {
    throw DimensionError("positional_encode: expected (N,k,3), got " + shape_string(rel.shape()));
  }
  return ops::apply_mask(ops::relu(ops::linear(rel, w, b)), mask);
}

template <class Real>
BasicVar<Real> soft_assign(BasicVar<Real> r, BasicVar<Real> w, BasicVar<Real> b, std::span<const std::uint8_t> mask) {
  return ops::apply_mask(ops::softmax_lastdim(ops::linear(r, w, b)), mask);
}

template <class Real>
BasicVar<Real> hard_assign(BasicVar<Real> q) {
  if (q.value().cols() != 2) {
    throw UnsupportedConfigError("hard assignment needs 2 groups, got " + std::to_string(q.value().cols()));
  }
  return ops::threshold_straight_through(q, Real(0.5));
}

template <class Real>
BasicVar<Real> ones_assign(BasicTape<Real>& tape, std::size_t centers, std::size_t k, std::size_t groups,
                           std::span<const std::uint8_t> mask) {
  if (mask.size() != centers * k) throw DimensionError("ones_assign: mask size");
  BasicTensor<Real> q(Shape{centers, k, groups});
  for (std::size_t s = 0; s < mask.size(); ++s)
    if (mask[s]) std::fill_n(q.data().data() + s * groups, groups, Real(1));
  return tape.constant(std::move(q));
}

template <class Real>
BasicVar<Real> sala_forward(BasicVar<Real> f_nbr, BasicVar<Real> r, BasicVar<Real> q, BasicVar<Real> pos_group,
                            BasicVar<Real> feat_group, const NeighborSlots& slots, const SalaForwardOptions& opts) {
  check_slots(slots);
  const Shape& fs = f_nbr.shape();
  if (fs.size() != 3 || fs[0] != slots.centers || fs[1] != slots.k) {
    throw DimensionError("sala_forward: neighbor features " + shape_string(fs));
  }
  return finish_sala(ops::linear(f_nbr, feat_group), r, q, pos_group, slots, opts);
}

template <class Real>
BasicVar<Real> sala_forward_support(BasicVar<Real> f_support, BasicVar<Real> r, BasicVar<Real> q,
                                    BasicVar<Real> pos_group, BasicVar<Real> feat_group, const NeighborSlots& slots,
                                    const SalaForwardOptions& opts) {
  check_slots(slots);
  auto zf = ops::gather_rows(ops::linear(f_support, feat_group), slots.indices, Shape{slots.centers, slots.k});
  return finish_sala(zf, r, q, pos_group, slots, opts);
}

template <class Real>
BasicTensor<Real> kpconv_influence(const BasicTensor<Real>& rel, std::span<const std::array<double, 3>> kernel_points,
                                   double sigma, std::span<const std::uint8_t> mask) {
  if (!(sigma > 0.0)) throw ConfigError("kpconv_influence: sigma must be positive");
  if (rel.rank() != 3 || rel.cols() != 3) throw DimensionError("kpconv_influence: rel " + shape_string(rel.shape()));
  const std::size_t slots = rel.rows(), s = kernel_points.size();
  if (!mask.empty() && mask.size() != slots) throw DimensionError("kpconv_influence: mask size");
  BasicTensor<Real> h(Shape{rel.extent(0), rel.extent(1), s});
  for (std::size_t j = 0; j < slots; ++j) {
    if (!mask.empty() && !mask[j]) continue;
    for (std::size_t g = 0; g < s; ++g) {
      const double dx = double(rel[j * 3]) - kernel_points[g][0];
      const double dy = double(rel[j * 3 + 1]) - kernel_points[g][1];
      const double dz = double(rel[j * 3 + 2]) - kernel_points[g][2];
      h[j * s + g] = Real(std::max(0.0, 1.0 - std::sqrt(dx * dx + dy * dy + dz * dz) / sigma));
    }
  }
  return h;
}

template <class Real>
BasicVar<Real> kpconv_rigid_forward(BasicVar<Real> f_support, const BasicTensor<Real>& influence,
                                    BasicVar<Real> weight, const NeighborSlots& slots) {
  check_slots(slots);
  const std::size_t s = influence.cols();
  if (influence.rows() != slots.centers * slots.k || s == 0 || weight.value().cols() % s != 0) {
    throw DimensionError("kpconv_rigid_forward: influence " + shape_string(influence.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  auto& tape = f_support.tape();
  auto z = ops::gather_rows(ops::linear(f_support, weight), slots.indices, Shape{slots.centers, slots.k});
  z = ops::group_scale(z, tape.constant(influence));
  return ops::sum_groups(ops::sum_reduce_neighbors(z, slots.mask, slots.indices), s);
}

std::vector<std::array<double, 3>> make_kernel_points(std::size_t groups, double radius) {
  if (groups < 1 || groups > 32) throw UnsupportedConfigError("kernel point count must be in [1, 32]");
  std::vector<std::array<double, 3>> pts{{0.0, 0.0, 0.0}};
  const std::size_t n = groups - 1;
  const double shell = 0.66 * radius;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double y = 1.0 - (double(i) + 0.5) * 2.0 / double(n);
    const double ring = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double theta = golden * double(i);
    pts.push_back({shell * ring * std::cos(theta), shell * y, shell * ring * std::sin(theta)});
  }
  return pts;
}

template <class Real>
Aggregator<Real>::Aggregator(ParameterSet<Real>& params, const std::string& prefix, AggregatorConfig cfg,
                             bool batch_norm, std::mt19937_64& rng)
    : cfg_(std::move(cfg)) {
  if (cfg_.family == AggregatorFamily::Pointwise) cfg_.groups = 1;
  if (cfg_.family == AggregatorFamily::KpconvRigid && cfg_.kernel_points.empty()) {
    cfg_.kernel_points = make_kernel_points(cfg_.groups, 1.0);
  }
  w_ = SalaWeights<Real>::create(params, prefix, cfg_, rng);
  if (batch_norm) {
    gamma_ = &params.add(prefix + ".bn.gamma", BasicTensor<Real>(Shape{cfg_.c_out}, Real(1)), false);
    beta_ = &params.add(prefix + ".bn.beta", BasicTensor<Real>(Shape{cfg_.c_out}), false);
    stats_ = &params.add_stats(prefix + ".bn", cfg_.c_out);
  }
}

template <class Real>
BasicVar<Real> Aggregator<Real>::assignment(BasicTape<Real>& tape, const NeighborSlots& slots,
                                            const BasicTensor<Real>& rel) const {
  const std::size_t s = cfg_.effective_groups();
  if (cfg_.family == AggregatorFamily::KpconvRigid) {
    return tape.constant(kpconv_influence(rel, std::span(cfg_.kernel_points), cfg_.sigma, slots.mask));
  }
  if (!cfg_.learned_assignment()) return ones_assign(tape, slots.centers, slots.k, s, slots.mask);
  auto r = positional_encode(tape.constant(rel), tape.parameter(*w_.pos_w), tape.parameter(*w_.pos_b), slots.mask);
  auto q = soft_assign(r, tape.parameter(*w_.sa_w), tape.parameter(*w_.sa_b), slots.mask);
  return cfg_.family == AggregatorFamily::SalaHard ? hard_assign(q) : q;
}

template <class Real>
BasicVar<Real> Aggregator<Real>::operator()(BasicVar<Real> support, const NeighborSlots& slots,
                                            const BasicTensor<Real>& rel) const {
  auto& tape = support.tape();
  const std::size_t s = cfg_.effective_groups();
  BasicVar<Real> out;
  if (cfg_.family == AggregatorFamily::KpconvRigid) {
    auto h = kpconv_influence(rel, std::span(cfg_.kernel_points), cfg_.sigma, slots.mask);
    out = kpconv_rigid_forward(support, h, tape.parameter(*w_.feat_group), slots);
  } else {
    auto r = positional_encode(tape.constant(rel), tape.parameter(*w_.pos_w), tape.parameter(*w_.pos_b), slots.mask);
    BasicVar<Real> q;
    if (cfg_.learned_assignment()) {
      q = soft_assign(r, tape.parameter(*w_.sa_w), tape.parameter(*w_.sa_b), slots.mask);
      if (cfg_.family == AggregatorFamily::SalaHard) q = hard_assign(q);
    } else {
      q = ones_assign(tape, slots.centers, slots.k, s, slots.mask);
    }
    SalaForwardOptions opts{cfg_.reduction(), s, false};
    BasicVar<Real> pos_group = w_.pos_group ? tape.parameter(*w_.pos_group) : BasicVar<Real>();
    out = sala_forward_support(support, cfg_.concat_position() ? r : BasicVar<Real>(), q, pos_group,
                               tape.parameter(*w_.feat_group), slots, opts);
  }
  if (gamma_) out = ops::batch_norm(out, tape.parameter(*gamma_), tape.parameter(*beta_), *stats_);
  return ops::relu(out);
}

#define SALA_INSTANTIATE_AGG(R)                                                                                  \
  template struct SalaWeights<R>;                                                                                \
  template class Aggregator<R>;                                                                                  \
  template BasicVar<R> positional_encode<R>(BasicVar<R>, BasicVar<R>, BasicVar<R>, std::span<const std::uint8_t>); \
  template BasicVar<R> soft_assign<R>(BasicVar<R>, BasicVar<R>, BasicVar<R>, std::span<const std::uint8_t>);     \
  template BasicVar<R> hard_assign<R>(BasicVar<R>);                                                              \
  template BasicVar<R> ones_assign<R>(BasicTape<R>&, std::size_t, std::size_t, std::size_t,                      \
                                      std::span<const std::uint8_t>);                                            \
  template BasicVar<R> sala_forward<R>(BasicVar<R>, BasicVar<R>, BasicVar<R>, BasicVar<R>, BasicVar<R>,          \
                                       const NeighborSlots&, const SalaForwardOptions&);                         \
  template BasicVar<R> sala_forward_support<R>(BasicVar<R>, BasicVar<R>, BasicVar<R>, BasicVar<R>, BasicVar<R>,  \
                                               const NeighborSlots&, const SalaForwardOptions&);                 \
  template BasicTensor<R> kpconv_influence<R>(const BasicTensor<R>&, std::span<const std::array<double, 3>>,     \
                                              double, std::span<const std::uint8_t>);                            \
  template BasicVar<R> kpconv_rigid_forward<R>(BasicVar<R>, const BasicTensor<R>&, BasicVar<R>,                  \
                                               const NeighborSlots&);

SALA_INSTANTIATE_AGG(float)
SALA_INSTANTIATE_AGG(double)

}  // namespace sala

#include "sala/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "sala/aggregation.hpp"
#include "sala/network.hpp"
#include "sala/training.hpp"

namespace sala {

namespace {

constexpr std::size_t kCenters = 16, kSupport = 20, kSlots = 4;
constexpr double kSpread = 4.0;

struct Neighborhoods {
  NeighborIndex nbr;
  TensorD rel;  // (centers, k, 3), zero on masked slots
};

// Random fixed-width neighbor lists; slot 0 is always valid and masked
// slots repeat it.
Neighborhoods random_neighborhoods(std::size_t centers, std::size_t support, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> pick(0, std::int32_t(support) - 1);
  std::uniform_real_distribution<double> coord(-0.6, 0.6);
  Neighborhoods n;
  n.nbr.centers = centers;
  n.nbr.k = kSlots;
  n.nbr.radius = 1.0;
  n.rel = TensorD(Shape{centers, kSlots, 3});
  for (std::size_t c = 0; c < centers; ++c) {
    const std::int32_t first = pick(rng);
    for (std::size_t j = 0; j < kSlots; ++j) {
      const bool valid = j == 0 || std::bernoulli_distribution(0.75)(rng);
      n.nbr.indices.push_back(valid ? pick(rng) : first);
      n.nbr.mask.push_back(valid ? 1 : 0);
      for (std::size_t a = 0; a < 3; ++a) n.rel[(c * kSlots + j) * 3 + a] = valid ? coord(rng) : 0.0;
    }
    n.nbr.indices[c * kSlots] = first;
  }
  return n;
}

// Moves every parameter off its initializer so zero biases and uniform
// assignments do not sit on kinks. Weights feeding normalization are drawn
// wide: it is scale-invariant, and a wide spread before it keeps the eps
// step small next to the batch deviation. The position and assignment
// layers stay narrow so the softmax does not saturate.
void randomize(ParameterSet<double>& params, std::uint64_t seed) {
  std::uint64_t s = seed * 7919;
  for (auto* p : params.parameters()) {
    const TensorD r = random_tensor(p->value.shape(), ++s);
    const bool gamma = p->name.ends_with(".gamma");
    const bool narrow = p->name.ends_with(".beta") || p->name.find(".pos.") != std::string::npos ||
                        p->name.find(".assign.") != std::string::npos;
    for (std::size_t i = 0; i < r.size(); ++i) {
      p->value[i] = gamma ? 1.0 + 0.5 * r[i] : narrow ? r[i] : kSpread * r[i];
    }
  }
}

TensorD wide_tensor(const Shape& shape, std::uint64_t seed) {
  TensorD t = random_tensor(shape, seed);
  for (auto& v : t.storage()) v *= kSpread;
  return t;
}

std::vector<Parameter<double>*> all_except(ParameterSet<double>& params, std::initializer_list<std::string_view> skip) {
  std::vector<Parameter<double>*> out;
  for (auto* p : params.parameters()) {
    const bool drop = std::any_of(skip.begin(), skip.end(),
                                  [&](std::string_view s) { return p->name.find(s) != std::string::npos; });
    if (!drop) out.push_back(p);
  }
  return out;
}

GradcheckOptions options(const SuiteOptions& o, std::uint64_t seed) {
  GradcheckOptions g;
  g.eps = o.eps;
  g.seed = seed;
  return g;
}

GradcheckResult check_linear(const SuiteOptions& o, std::uint64_t seed) {
  return gradcheck([](TapeD&, std::span<const VarD> v) { return ops::linear(v[0], v[1], v[2]); },
                   {random_tensor({5, 4}, seed), random_tensor({4, 3}, seed + 1), random_tensor({3}, seed + 2)},
                   options(o, seed));
}

GradcheckResult check_softmax(const SuiteOptions& o, std::uint64_t seed) {
  TensorD x = random_tensor({3, 4, 5}, seed);
  for (auto& v : x.storage()) v *= 3.0;
  return gradcheck([](TapeD&, std::span<const VarD> v) { return ops::softmax_lastdim(v[0]); }, {x}, options(o, seed));
}

GradcheckResult check_batch_norm(const SuiteOptions& o, std::uint64_t seed) {
  ops::RunningStats<double> stats(3);
  TensorD gamma = random_tensor({3}, seed + 1);
  for (auto& g : gamma.storage()) g = 1.0 + 0.5 * g;
  return gradcheck(
      [&](TapeD&, std::span<const VarD> v) { return ops::batch_norm(v[0], v[1], v[2], stats); },
      {random_tensor({7, 3}, seed), gamma, random_tensor({3}, seed + 2)}, options(o, seed));
}

GradcheckResult check_aggregator(AggregatorFamily family, const SuiteOptions& o, std::uint64_t seed) {
  AggregatorConfig cfg;
  cfg.family = family;
  cfg.c_in = 3;
  cfg.c_out = 2;
  cfg.pos_hidden = 4;
  ParameterSet<double> params;
  std::mt19937_64 rng(seed);
  const Aggregator<double> agg(params, "agg", cfg, true, rng);
  randomize(params, seed);
  const Neighborhoods n = random_neighborhoods(kCenters, kSupport, seed);
  const NeighborSlots slots = NeighborSlots::from(n.nbr);
  const auto checked = family == AggregatorFamily::SalaHard ? all_except(params, {".pos.", ".assign."})
                                                              : params.parameters();
  return gradcheck([&](TapeD&, std::span<const VarD> v) { return agg(v[0], slots, n.rel); },
                   {wide_tensor({kSupport, 3}, seed + 11)}, checked, options(o, seed));
}

// The threshold passes the downstream gradient through unchanged: the
// gradient reaching the soft scores equals the one reaching the thresholded
// scores, and the latter matches finite differences.
GradcheckResult check_straight_through(const SuiteOptions& o, std::uint64_t seed) {
  const Neighborhoods n = random_neighborhoods(kCenters, kSupport, seed);
  const NeighborSlots slots = NeighborSlots::from(n.nbr);
  const TensorD f = random_tensor({kSupport, 3}, seed + 1);
  const TensorD r = random_tensor({kCenters, kSlots, 4}, seed + 2);
  const TensorD wp = random_tensor({4, 4}, seed + 3), wf = random_tensor({3, 4}, seed + 4);
  TensorD q(Shape{kCenters, kSlots, 2});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const double a = std::uniform_real_distribution<double>(0.05, 0.45)(rng);
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    q[2 * i] = flip ? 1.0 - a : a;
    q[2 * i + 1] = 1.0 - q[2 * i];
  }
  const SalaForwardOptions fwd{Reduction::Max, 2, false};
  auto downstream = [&](TapeD& tape, VarD scores) {
    return sala_forward_support(tape.constant(f), tape.constant(r), scores, tape.constant(wp), tape.constant(wf),
                                slots, fwd);
  };
  const TensorD proj = random_tensor({kCenters, 2}, seed ^ 0x5eedULL);

  TapeD soft(true);
  VarD qs = soft.variable(q);
  soft.backward(downstream(soft, hard_assign(qs)), proj);
  TapeD hard(true);
  VarD qh = hard.variable(hard_assign(soft.constant(q)).value());
  hard.backward(downstream(hard, qh), proj);
  const TensorD* gs = soft.grad(qs);
  const TensorD* gh = hard.grad(qh);
  for (std::size_t i = 0; i < q.size(); ++i) {
    if ((gs ? (*gs)[i] : 0.0) != (gh ? (*gh)[i] : 0.0)) {
      return {std::numeric_limits<double>::infinity(), 1, 0};
    }
  }
  return gradcheck([&](TapeD& tape, std::span<const VarD> v) { return downstream(tape, v[0]); },
                   {hard_assign(soft.constant(q)).value()}, options(o, seed));
}

GradcheckResult check_block(BlockKind kind, const SuiteOptions& o, std::uint64_t seed) {
  NetworkSpec net;
  net.width = 4;
  AggregatorConfig agg;
  agg.pos_hidden = 4;
  const bool strided = kind == BlockKind::StridedResidual;
  const BlockSpec spec{kind, 4, strided ? 8u : 4u, 2};
  ParameterSet<double> params;
  std::mt19937_64 rng(seed);
  const ResidualBlock<double> block(params, "block", spec, net, agg, rng);
  randomize(params, seed);
  // Three normalizations in a row; more rows keep every batch deviation
  // well away from zero.
  const std::size_t centers = 2 * kCenters, support = strided ? 2 * kSupport : centers;
  const Neighborhoods n = random_neighborhoods(centers, support, seed);
  return gradcheck([&](TapeD&, std::span<const VarD> v) { return block(v[0], n.nbr, n.rel); },
                   {wide_tensor({support, 4}, seed + 11)}, params.parameters(), options(o, seed));
}

GradcheckResult check_loss(const SuiteOptions& o, std::uint64_t seed) {
  ParameterSet<double> params;
  params.add("w", random_tensor({4, 3}, seed + 1));
  params.add("b", random_tensor({3}, seed + 2), false);
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> labels(6);
  for (auto& l : labels) l = std::uniform_int_distribution<std::uint32_t>(0, 2)(rng);
  auto& w = params.at("w");
  auto& b = params.at("b");
  return gradcheck(
      [&](TapeD& tape, std::span<const VarD> v) {
        return training_loss(ops::linear(v[0], tape.parameter(w), tape.parameter(b)), labels, params, 0.1);
      },
      {random_tensor({6, 4}, seed)}, params.parameters(), options(o, seed));
}

using Check = std::function<GradcheckResult(const SuiteOptions&, std::uint64_t)>;

std::vector<std::pair<std::string, Check>> registry() {
  std::vector<std::pair<std::string, Check>> r;
  r.emplace_back("linear", check_linear);
  r.emplace_back("softmax", check_softmax);
  r.emplace_back("batch-norm", check_batch_norm);
  for (auto f : {AggregatorFamily::Sala, AggregatorFamily::SalaSum, AggregatorFamily::SalaHard,
                 AggregatorFamily::SalaNoAssign, AggregatorFamily::SalaNoPos, AggregatorFamily::Pointwise,
                 AggregatorFamily::KpconvRigid}) {
    if (f == AggregatorFamily::SalaHard) {
      r.emplace_back(std::string(family_name(f)), [](const SuiteOptions& o, std::uint64_t seed) {
        GradcheckResult a = check_aggregator(AggregatorFamily::SalaHard, o, seed);
        const GradcheckResult b = check_straight_through(o, seed);
        a.max_rel_error = std::max(a.max_rel_error, b.max_rel_error);
        a.checked += b.checked;
        a.skipped += b.skipped;
        return a;
      });
    } else {
      r.emplace_back(std::string(family_name(f)),
                     [f](const SuiteOptions& o, std::uint64_t seed) { return check_aggregator(f, o, seed); });
    }
  }
  r.emplace_back("residual-block",
                 [](const SuiteOptions& o, std::uint64_t s) { return check_block(BlockKind::Residual, o, s); });
  r.emplace_back("strided-block",
                 [](const SuiteOptions& o, std::uint64_t s) { return check_block(BlockKind::StridedResidual, o, s); });
  r.emplace_back("loss", check_loss);
  return r;
}

}  // namespace

std::vector<std::string> gradcheck_operators() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : registry()) names.push_back(name);
  return names;
}

std::vector<OperatorCheck> run_gradcheck_suite(const SuiteOptions& opts,
                                               const std::function<void(const OperatorCheck&)>& on_done) {
  for (const auto& name : opts.only) {
    const auto names = gradcheck_operators();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw ConfigError("unknown gradcheck operator '" + name + "'");
    }
  }
  std::vector<OperatorCheck> out;
  for (const auto& [name, fn] : registry()) {
    if (!opts.only.empty() && std::find(opts.only.begin(), opts.only.end(), name) == opts.only.end()) continue;
    OperatorCheck c;
    c.name = name;
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      const GradcheckResult r = fn(opts, s + 1);
      c.max_rel_error = std::max(c.max_rel_error, r.max_rel_error);
      c.checked += r.checked;
      c.skipped += r.skipped;
      ++c.seeds;
    }
    c.passed = c.checked > 0 && c.max_rel_error < opts.tolerance;
    if (on_done) on_done(c);
    out.push_back(c);
  }
  return out;
}

}  // namespace sala

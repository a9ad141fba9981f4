#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sala/geometry.hpp"
#include "sala/module.hpp"

namespace sala {

enum class AggregatorFamily {
  Sala,          // soft assignment, MAX reduction
  SalaSum,       // soft assignment, SUM reduction
  SalaHard,      // assignment thresholded at 0.5
  SalaNoAssign,  // every assignment score set to one
  SalaNoPos,     // positional encoding left out of the aggregated feature
  Pointwise,     // single group, no assignment
  KpconvRigid,   // fixed kernel points with linear influence
};

enum class Reduction { Max, Sum };

/// Preset name as used in experiment configs ("sala", "sala-sum", ...).
std::string_view family_name(AggregatorFamily family);
AggregatorFamily parse_family(std::string_view name);

struct AggregatorConfig {
  AggregatorFamily family = AggregatorFamily::Sala;
  std::size_t groups = 2;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  // Width of the position-encoding layer; 0 picks max(8, c_out / 4).
  std::size_t pos_hidden = 0;
  // Kernel-point influence extent, in units of the neighborhood radius.
  double sigma = 0.5;
  // Kernel points in units of the neighborhood radius; generated by
  // make_kernel_points() when empty.
  std::vector<std::array<double, 3>> kernel_points;

  std::size_t effective_groups() const { return family == AggregatorFamily::Pointwise ? 1 : groups; }
  std::size_t effective_pos_hidden() const;
  Reduction reduction() const { return family == AggregatorFamily::SalaSum ? Reduction::Sum : Reduction::Max; }
  bool concat_position() const;
  bool learned_assignment() const;
  bool uses_position_mlp() const { return family != AggregatorFamily::KpconvRigid; }

  /// Throws ConfigError / UnsupportedConfigError.
  void validate() const;

  bool operator==(const AggregatorConfig&) const = default;
};

/// Learnable tensors of one aggregation layer. Group g's weight W_g is the
/// block [pos_group[:, g]; feat_group[:, g]] acting on concat(r_j, f_j);
/// the two halves are stored apart so the feature half can be applied once
/// per support point.
template <class Real>
struct SalaWeights {
  Parameter<Real>* pos_w = nullptr;   // (3, pos_hidden)
  Parameter<Real>* pos_b = nullptr;   // (pos_hidden)
  Parameter<Real>* sa_w = nullptr;    // (pos_hidden, S)
  Parameter<Real>* sa_b = nullptr;    // (S)
  Parameter<Real>* pos_group = nullptr;   // (pos_hidden, S * c_out)
  Parameter<Real>* feat_group = nullptr;  // (c_in, S * c_out)

  /// Allocates and initialises the tensors `cfg` needs under `prefix`.
  static SalaWeights create(ParameterSet<Real>& params, const std::string& prefix, const AggregatorConfig& cfg,
                            std::mt19937_64& rng);

  /// Overwrites W_g, a (c_in [+ pos_hidden], c_out) block ordered as concat(r, f).
  void set_group_weight(const AggregatorConfig& cfg, std::size_t g, const BasicTensor<Real>& w);
};

/// Neighborhood description shared by the operators: N centers x k slots.
struct NeighborSlots {
  std::size_t centers = 0;
  std::size_t k = 0;
  std::span<const std::int32_t> indices;  // support index per slot
  std::span<const std::uint8_t> mask;

  static NeighborSlots from(const NeighborIndex& nbr) { return {nbr.centers, nbr.k, nbr.indices, nbr.mask}; }
};

/// r = ReLU(rel W + b) with masked slots zeroed. rel: (N, k, 3).
template <class Real>
BasicVar<Real> positional_encode(BasicVar<Real> rel, BasicVar<Real> w, BasicVar<Real> b,
                                 std::span<const std::uint8_t> mask);

/// Q = softmax(r W + b) over the groups; masked slots give zero rows.
template <class Real>
BasicVar<Real> soft_assign(BasicVar<Real> r, BasicVar<Real> w, BasicVar<Real> b, std::span<const std::uint8_t> mask);

/// Thresholds Q at 0.5 with a straight-through gradient. Two groups only.
template <class Real>
BasicVar<Real> hard_assign(BasicVar<Real> q);

/// All-ones assignment on valid slots, zero on masked slots.
template <class Real>
BasicVar<Real> ones_assign(BasicTape<Real>& tape, std::size_t centers, std::size_t k, std::size_t groups,
                           std::span<const std::uint8_t> mask);

struct SalaForwardOptions {
  Reduction reduce = Reduction::Max;
  std::size_t groups = 1;
  // Reject assignment rows off the probability simplex by more than 1e-4.
  bool check_simplex = false;
};

/// Soft-assignment aggregation over per-slot neighbor features.
///   f_nbr: (N, k, c_in) features of each slot's neighbor
///   r:     (N, k, pos_hidden) position encoding, or an invalid handle when
///          positions are not part of the aggregated feature
///   q:     (N, k, S) assignment
/// Per group g: reduce over valid slots of q[., g] * (concat(r, f) W_g), then
/// sum the S group results. Output (N, c_out).
template <class Real>
BasicVar<Real> sala_forward(BasicVar<Real> f_nbr, BasicVar<Real> r, BasicVar<Real> q, BasicVar<Real> pos_group,
                            BasicVar<Real> feat_group, const NeighborSlots& slots, const SalaForwardOptions& opts);

/// Bitwise the same result as sala_forward, taking the (M, c_in) support features and
/// applying the feature half of each W_g once per support point before the
/// neighbor gather.
template <class Real>
BasicVar<Real> sala_forward_support(BasicVar<Real> f_support, BasicVar<Real> r, BasicVar<Real> q,
                                    BasicVar<Real> pos_group, BasicVar<Real> feat_group, const NeighborSlots& slots,
                                    const SalaForwardOptions& opts);

/// h = max(0, 1 - |rel - x_g| / sigma) for every slot and kernel point;
/// masked slots are zero. rel: (N, k, 3) -> (N, k, S).
template <class Real>
BasicTensor<Real> kpconv_influence(const BasicTensor<Real>& rel, std::span<const std::array<double, 3>> kernel_points,
                                   double sigma, std::span<const std::uint8_t> mask = {});

/// f'_i = sum_j sum_g h(j, g) f_j W_g with fixed kernel points.
///   f_support: (M, c_in); influence: (N, k, S); weight: (c_in, S * c_out),
///   column block g holding W_g
template <class Real>
BasicVar<Real> kpconv_rigid_forward(BasicVar<Real> f_support, const BasicTensor<Real>& influence,
                                    BasicVar<Real> weight, const NeighborSlots& slots);

/// One point at the origin and the rest on a Fibonacci sphere of radius
/// 0.66 * radius. S in [1, 32].
std::vector<std::array<double, 3>> make_kernel_points(std::size_t groups, double radius);

/// A configured aggregation layer followed by batch norm and ReLU.
template <class Real>
class Aggregator {
 public:
  Aggregator() = default;
  Aggregator(ParameterSet<Real>& params, const std::string& prefix, AggregatorConfig cfg, bool batch_norm,
             std::mt19937_64& rng);

  /// support: (M, c_in); rel: (N, k, 3) offsets in units of the neighborhood
  /// radius. Returns (N, c_out).
  BasicVar<Real> operator()(BasicVar<Real> support, const NeighborSlots& slots, const BasicTensor<Real>& rel) const;

  /// The assignment the layer would use (N, k, S); KPConv gives its influence.
  BasicVar<Real> assignment(BasicTape<Real>& tape, const NeighborSlots& slots, const BasicTensor<Real>& rel) const;

  const AggregatorConfig& config() const { return cfg_; }
  SalaWeights<Real>& weights() { return w_; }

 private:
  AggregatorConfig cfg_;
  SalaWeights<Real> w_;
  Parameter<Real>* gamma_ = nullptr;
  Parameter<Real>* beta_ = nullptr;
  ops::RunningStats<Real>* stats_ = nullptr;
};

}  // namespace sala

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sala/aggregation.hpp"
#include "sala/geometry.hpp"
#include "sala/module.hpp"

namespace sala {

enum class BlockKind { Residual, StridedResidual, UnaryConv };

struct BlockSpec {
  BlockKind kind = BlockKind::Residual;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t bottleneck = 2;

  std::size_t bottleneck_width() const { return out_ch / bottleneck; }
};

struct NetworkSpec {
  std::size_t width = 36;  // C
  std::size_t stages = 5;
  std::vector<std::size_t> blocks_per_stage{3, 4, 4, 3, 1};
  std::size_t num_classes = 13;
  // One classifier head per shape category; 1 means a single shared head.
  std::size_t num_heads = 1;
  std::size_t in_features = 5;  // d_0
  std::size_t bottleneck = 2;   // gamma
  double leaky_slope = 0.1;
  bool batch_norm = true;

  std::size_t stage_width(std::size_t level) const { return width << level; }
  /// Encoder blocks in execution order.
  std::vector<std::pair<std::size_t, BlockSpec>> encoder_blocks() const;
  void validate() const;

  bool operator==(const NetworkSpec&) const = default;
};

/// Spatial settings of the pyramid the network runs on.
struct GeometrySpec {
  double base_grid = 0.04;
  double base_radius = 0.1;
  std::size_t k_max = 32;
  NeighborSelect select = NeighborSelect::Nearest;
  std::uint64_t select_seed = 0;

  bool operator==(const GeometrySpec&) const = default;
};

/// Pyramid and neighborhoods of one input cloud.
struct PreparedInput {
  std::vector<ResolutionLevel> levels;
  std::vector<NeighborIndex> self_nbr;   // level l centers on level l
  std::vector<NeighborIndex> cross_nbr;  // level l centers on level l-1 (entry 0 unused)
  std::vector<Tensor> self_rel;          // offsets divided by the query radius
  std::vector<Tensor> cross_rel;
  std::vector<std::int32_t> input_map;   // input point -> nearest level-0 point
  std::size_t input_points = 0;

  std::vector<std::size_t> level_sizes() const;
};

PreparedInput prepare_input(const PointCloud& cloud, const GeometrySpec& geo, std::size_t stages);

/// Several prepared clouds as one disconnected input: points, neighbor lists
/// and maps are concatenated in order with their indices shifted.
PreparedInput stack_inputs(std::span<const PreparedInput> parts);

template <class Real>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(ParameterSet<Real>& params, const std::string& name, const BlockSpec& spec,
                const NetworkSpec& net, const AggregatorConfig& agg, std::mt19937_64& rng);

  /// Residual: x at the level of `nbr`. Strided: x on the support level, the
  /// output on the centers of `nbr`.
  BasicVar<Real> operator()(BasicVar<Real> x, const NeighborIndex& nbr, const BasicTensor<Real>& rel) const;

  const BlockSpec& spec() const { return spec_; }
  Aggregator<Real>& aggregator() { return agg_; }

 private:
  BlockSpec spec_;
  Unary<Real> reduce_;
  Aggregator<Real> agg_;
  Unary<Real> expand_;
  Unary<Real> shortcut_;
  bool project_ = false;
};

template <class Real>
class SalaNet {
 public:
  SalaNet(const NetworkSpec& spec, const AggregatorConfig& agg, std::uint64_t seed);
  // Layers point into the parameter set.
  SalaNet(const SalaNet&) = delete;
  SalaNet& operator=(const SalaNet&) = delete;

  /// Logits (input points, num_classes) for the given head.
  BasicVar<Real> forward(BasicTape<Real>& tape, const PreparedInput& in, std::size_t head = 0) const;
  /// As above with a head chosen per input point, for stacked batches that
  /// mix categories.
  BasicVar<Real> forward(BasicTape<Real>& tape, const PreparedInput& in,
                         std::span<const std::size_t> point_heads) const;

  /// Encoder features per level.
  std::vector<BasicVar<Real>> encode(BasicTape<Real>& tape, const PreparedInput& in) const;

  /// Decoder output at level-0 resolution, (N_0, C).
  BasicVar<Real> decode(const std::vector<BasicVar<Real>>& encoded, const PreparedInput& in) const;

  ParameterSet<Real>& parameters() { return params_; }
  const ParameterSet<Real>& parameters() const { return params_; }
  const NetworkSpec& spec() const { return spec_; }
  const AggregatorConfig& aggregator() const { return agg_; }

  /// Parameters to `path`, running statistics to buffers_path(path).
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  BasicVar<Real> forward_head(BasicTape<Real>& tape, BasicVar<Real> features, const PreparedInput& in,
                              std::size_t head) const;

  NetworkSpec spec_;
  AggregatorConfig agg_;
  ParameterSet<Real> params_;
  Unary<Real> lift_;
  std::vector<std::pair<std::size_t, ResidualBlock<Real>>> blocks_;
  std::vector<Unary<Real>> decoder_;  // index l merges level l+1 into level l
  Unary<Real> final_;
  std::vector<std::pair<Parameter<Real>*, Parameter<Real>*>> heads_;
};

std::filesystem::path buffers_path(const std::filesystem::path& checkpoint);

}  // namespace sala

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sala/tape.hpp"

// Differentiable operations on tape values. Every op takes its operands as
// tape handles and records its own backward rule. Row-wise ops treat a
// tensor of shape (..., C) as rows x C.
//
// Neighbor-axis ops work on (N, k, C) tensors with a N*k validity mask.
// `keys` (also N*k, optional) is the support-point index of each slot; it
// fixes tie-breaking and summation order so that results do not depend on
// slot order.
namespace sala::ops {

template <class Real>
using V = BasicVar<Real>;

/// y = x W (+ b). x: (..., Cin), W: (Cin, Cout), b: (Cout).
template <class Real>
V<Real> linear(V<Real> x, V<Real> w);
template <class Real>
V<Real> linear(V<Real> x, V<Real> w, V<Real> b);

template <class Real>
V<Real> add(V<Real> a, V<Real> b);
template <class Real>
V<Real> scale(V<Real> x, Real factor);

template <class Real>
V<Real> relu(V<Real> x);
template <class Real>
V<Real> leaky_relu(V<Real> x, Real slope);

template <class Real>
struct RunningStats {
  BasicTensor<Real> mean;
  BasicTensor<Real> var;
  // Updates seen so far; until 1/(1-momentum) of them the statistics are a
  // plain cumulative average.
  std::uint64_t updates = 0;
  explicit RunningStats(std::size_t channels = 0)
      : mean(Shape{channels}, Real(0)), var(Shape{channels}, Real(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.99;
  double eps = 1e-5;
};

/// Per-channel normalization over all rows. In training tapes the batch
/// statistics are used and the running statistics update is deferred to
/// Tape::commit(); otherwise the running statistics are used.
template <class Real>
V<Real> batch_norm(V<Real> x, V<Real> gamma, V<Real> beta, RunningStats<Real>& stats,
                   BatchNormOptions opts = {});

/// Numerically stabilized softmax over the last axis.
template <class Real>
V<Real> softmax_lastdim(V<Real> x);

template <class Real>
struct MaxReduceResult {
  V<Real> out;
  // Winning slot per (center, channel), N*C entries.
  std::vector<std::uint32_t> argmax;
};

/// Per-channel max over the valid slots of each center. Ties go to the
/// lowest key. Throws EmptyNeighborhoodError for an all-masked center.
template <class Real>
MaxReduceResult<Real> max_reduce_neighbors(V<Real> x, std::span<const std::uint8_t> mask,
                                           std::span<const std::int32_t> keys = {});

/// Sum over the valid slots of each center, accumulated in ascending key order.
template <class Real>
V<Real> sum_reduce_neighbors(V<Real> x, std::span<const std::uint8_t> mask,
                             std::span<const std::int32_t> keys = {});

template <class Real>
V<Real> concat_lastdim(V<Real> a, V<Real> b);

/// out[r] = x[index[r]]; result shape is prefix + (C).
template <class Real>
V<Real> gather_rows(V<Real> x, std::span<const std::int32_t> index, Shape prefix);

/// Mean of the rows of x sharing a target; rows without contributors are zero.
template <class Real>
V<Real> scatter_mean(V<Real> x, std::span<const std::int32_t> target, std::size_t out_rows);

/// Zeroes the masked slots of a (N, k, C) tensor.
template <class Real>
V<Real> apply_mask(V<Real> x, std::span<const std::uint8_t> mask);

/// out[r, g*C + c] = q[r, g] * z[r, g*C + c]. z: (..., S*C), q: (..., S).
template <class Real>
V<Real> group_scale(V<Real> z, V<Real> q);

/// (..., S*C) -> (..., C), summing the S channel blocks.
template <class Real>
V<Real> sum_groups(V<Real> x, std::size_t groups);

/// 1 where q >= threshold else 0; the backward pass is the identity.
template <class Real>
V<Real> threshold_straight_through(V<Real> q, Real threshold);

template <class Real>
V<Real> reshape(V<Real> x, Shape shape);

template <class Real>
V<Real> sum_all(V<Real> x);

template <class Real>
V<Real> squared_norm(V<Real> x);

/// Mean softmax cross-entropy over rows. Throws ValidationError on an empty
/// batch or an out-of-range label.
template <class Real>
V<Real> softmax_cross_entropy(V<Real> logits, std::span<const std::uint32_t> labels);

}  // namespace sala::ops

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sala/tape.hpp"

namespace sala {

using TapeD = BasicTape<double>;
using VarD = BasicVar<double>;

/// Builds the graph under test from leaf variables holding the inputs.
using GradFn = std::function<VarD(TapeD&, std::span<const VarD>)>;

struct GradcheckOptions {
  double eps = 1e-3;
  // Denominator floor for the relative error.
  double floor = 1e-6;
  // Projection seed; the output is reduced to sum(out * P) with fixed random P.
  std::uint64_t seed = 0;
  bool training = true;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-eps perturbation changed a discrete decision.
  std::size_t skipped = 0;
};

/// Compares reverse-mode gradients of every input against central finite
/// differences in double precision, using the fourth-order five-point
/// stencil with step eps. Relative error is |a - n| / max(|a|, |n|, floor).
/// A coordinate is skipped when any of its four evaluations takes a
/// different discrete branch than the unperturbed graph.
GradcheckResult gradcheck(const GradFn& fn, const std::vector<TensorD>& inputs, const GradcheckOptions& opts = {});

/// As above, also checking the listed parameters, which the graph reads
/// through Tape::parameter(). Their values are restored afterwards.
GradcheckResult gradcheck(const GradFn& fn, const std::vector<TensorD>& inputs,
                          std::span<Parameter<double>* const> params, const GradcheckOptions& opts = {});

/// Uniform [-1, 1] tensor.
TensorD random_tensor(const Shape& shape, std::uint64_t seed);

}  // namespace sala

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sala/gradcheck.hpp"

namespace sala {

struct SuiteOptions {
  std::size_t seeds = 100;
  double eps = 1e-3;
  double tolerance = 1e-3;
  // Operators to run; empty runs all of gradcheck_operators().
  std::vector<std::string> only;
};

struct OperatorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t seeds = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

/// linear, softmax, batch-norm, every aggregation family, both residual
/// block kinds and the training loss.
std::vector<std::string> gradcheck_operators();

/// Finite-difference checks of each operator on small random problems, one
/// per seed, with random weights. For sala-hard the assignment and position
/// weights, which reach the output only through the 0.5 threshold, are left
/// out, and the threshold's straight-through backward is checked to pass the
/// downstream gradient unchanged.
std::vector<OperatorCheck> run_gradcheck_suite(const SuiteOptions& opts,
                                               const std::function<void(const OperatorCheck&)>& on_done = {});

}  // namespace sala

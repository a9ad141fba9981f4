#include "sala/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sala/ops.hpp"

namespace sala {

namespace {

struct Eval {
  double value;
  std::uint64_t signature;
};

Eval evaluate(const GradFn& fn, const std::vector<TensorD>& inputs, const TensorD& proj, bool training) {
  TapeD tape(training);
  std::vector<VarD> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.variable(t));
  VarD out = fn(tape, leaves);
  const TensorD& v = out.value();
  if (v.shape() != proj.shape()) throw DimensionError("gradcheck: output shape changed between evaluations");
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) total += v[i] * proj[i];
  return {total, tape.branch_signature()};
}

}  // namespace

TensorD random_tensor(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  TensorD t(shape);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

GradcheckResult gradcheck(const GradFn& fn, const std::vector<TensorD>& inputs, const GradcheckOptions& opts) {
  return gradcheck(fn, inputs, {}, opts);
}

GradcheckResult gradcheck(const GradFn& fn, const std::vector<TensorD>& inputs,
                          std::span<Parameter<double>* const> params, const GradcheckOptions& opts) {
  TapeD tape(opts.training);
  std::vector<VarD> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.variable(t));
  VarD out = fn(tape, leaves);
  const TensorD proj = random_tensor(out.shape(), opts.seed ^ 0x5eedULL);
  const std::uint64_t base_sig = tape.branch_signature();
  tape.backward(out, proj);

  GradcheckResult res;
  std::vector<TensorD> work = inputs;
  auto probe = [&](double& x, double analytic) {
    const double x0 = x;
    double f[4];
    bool same_branches = true;
    const double steps[4] = {2.0, 1.0, -1.0, -2.0};
    for (int s = 0; s < 4; ++s) {
      x = x0 + steps[s] * opts.eps;
      const Eval e = evaluate(fn, work, proj, opts.training);
      f[s] = e.value;
      same_branches = same_branches && e.signature == base_sig;
    }
    x = x0;
    if (!same_branches) {
      ++res.skipped;
      return;
    }
    const double numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * opts.eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic - numeric) / denom);
    ++res.checked;
  };
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const TensorD* g = tape.grad(leaves[a]);
    for (std::size_t i = 0; i < inputs[a].size(); ++i) probe(work[a][i], g ? (*g)[i] : 0.0);
  }
  for (auto* p : params) {
    const TensorD* g = tape.grad(tape.parameter(*p));
    const TensorD grad = g ? *g : TensorD(p->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) probe(p->value[i], grad[i]);
  }
  return res;
}

}  // namespace sala

#pragma once

#include <cassert>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sala/tensor.hpp"

namespace sala {

/// A learnable tensor together with its accumulated gradient.
template <class Real>
struct Parameter {
  std::string name;
  BasicTensor<Real> value;
  BasicTensor<Real> grad;
  // Included in the L2 penalty. Biases and normalization affine terms are not.
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<Real> v, bool d = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(d) {}

  void zero_grad() { grad = BasicTensor<Real>(value.shape()); }
};

template <class Real>
class BasicTape;

/// Handle to a value recorded on a tape.
template <class Real>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const BasicTensor<Real>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  BasicTape<Real>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  BasicTape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of a forward pass. Nodes are appended in execution
/// order, so every node's inputs precede it and a reverse sweep is a valid
/// topological order. A tape is not thread-safe; use one per worker.
template <class Real>
class BasicTape {
 public:
  using Tensor = BasicTensor<Real>;
  using Var = BasicVar<Real>;
  using BackwardFn = std::function<void(BasicTape&, const Tensor& out_grad)>;

  explicit BasicTape(bool training = true) : training_(training) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool training() const noexcept { return training_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }
  Var variable(Tensor value) { return push(std::move(value), true, nullptr); }

  // One leaf per parameter per tape; repeated calls return the same handle.
  Var parameter(Parameter<Real>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var(this, it->second);
    Var v = push(p.value, true, nullptr);
    param_ids_.emplace(&p, v.id());
    params_.emplace_back(&p, v.id());
    return v;
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
#ifndef NDEBUG
    bool finite_in = true;
    for (const Var& in : inputs) finite_in = finite_in && this->value(in).all_finite();
    assert(!finite_in || value.all_finite());
#endif
    bool needs = false;
    for (const Var& in : inputs) needs = needs || requires_grad(in);
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient of the last backward() with respect to v, or nullptr when none
  // reached it.
  const Tensor* grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? &n.grad : nullptr;
  }

  // Zero-initialised on first use. Backward rules add into this.
  Tensor& grad_buffer(Var v) {
    Node& n = nodes_.at(v.id());
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var root) {
    if (value(root).size() != 1) {
      throw DimensionError("backward() needs a scalar root, got " + shape_string(value(root).shape()));
    }
    Tensor seed(value(root).shape(), Real(1));
    backward(root, seed);
  }

  void backward(Var root, const Tensor& seed) {
    if (seed.shape() != value(root).shape()) {
      throw DimensionError("seed shape " + shape_string(seed.shape()) + " vs root " +
                           shape_string(value(root).shape()));
    }
    grad_buffer(root) = seed;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.has_grad) continue;
      // Rules only touch grads of earlier nodes and never grow nodes_.
      n.backward(*this, n.grad);
    }
  }

  // (parameter, leaf) pairs in first-use order.
  std::vector<std::pair<Parameter<Real>*, Var>> parameter_leaves() {
    std::vector<std::pair<Parameter<Real>*, Var>> out;
    out.reserve(params_.size());
    for (auto& [p, id] : params_) out.emplace_back(p, Var(this, id));
    return out;
  }

  // Adds every parameter leaf's gradient into Parameter::grad.
  void accumulate_parameter_grads() {
    for (auto& [p, id] : params_) {
      const Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (p->grad.shape() != p->value.shape()) p->zero_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  }

  // Side effects that must not run concurrently with other tapes (running
  // statistics updates). Applied in order by commit().
  void defer(std::function<void()> fn) { deferred_.push_back(std::move(fn)); }
  void commit() {
    for (auto& fn : deferred_) fn();
    deferred_.clear();
  }
  std::vector<std::function<void()>> take_deferred() { return std::exchange(deferred_, {}); }

  // Hash of every discrete decision taken during the forward pass (ReLU
  // masks, argmax choices, thresholds). Finite-difference checks use it to
  // detect perturbations that cross a kink.
  void note_branch(std::uint64_t v) noexcept {
    branch_sig_ ^= v + 0x9e3779b97f4a7c15ULL + (branch_sig_ << 6) + (branch_sig_ >> 2);
  }
  std::uint64_t branch_signature() const noexcept { return branch_sig_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, false, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  // Deque: values stay put while later nodes are appended.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<Real>*, std::size_t> param_ids_;
  std::vector<std::pair<Parameter<Real>*, std::size_t>> params_;
  std::vector<std::function<void()>> deferred_;
  std::uint64_t branch_sig_ = 0;
  bool training_ = true;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

}  // namespace sala

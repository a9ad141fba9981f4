#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <deque>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "sala/checkpoint.hpp"
#include "sala/ops.hpp"

namespace sala {

/// Owns the learnable tensors and normalization buffers of a model.
/// Addresses are stable for the lifetime of the set.
template <class Real>
class ParameterSet {
 public:
  Parameter<Real>& add(std::string name, BasicTensor<Real> init, bool decay = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    params_.emplace_back(name, std::move(init), decay);
    index_.emplace(std::move(name), params_.size() - 1);
    return params_.back();
  }

  ops::RunningStats<Real>& add_stats(std::string name, std::size_t channels) {
    stats_.emplace_back(channels);
    stat_names_.push_back(std::move(name));
    return stats_.back();
  }

  std::vector<Parameter<Real>*> parameters() {
    std::vector<Parameter<Real>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const Parameter<Real>*> parameters() const {
    std::vector<const Parameter<Real>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  Parameter<Real>& at(const std::string& name) { return params_.at(index_.at(name)); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<NamedTensor> export_parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) out.push_back({p.name, p.value.template cast<float>()});
    return out;
  }

  std::vector<ops::RunningStats<Real>*> all_stats() {
    std::vector<ops::RunningStats<Real>*> out;
    for (auto& s : stats_) out.push_back(&s);
    return out;
  }

  std::vector<NamedTensor> export_buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      out.push_back({stat_names_[i] + ".running_mean", stats_[i].mean.template cast<float>()});
      out.push_back({stat_names_[i] + ".running_var", stats_[i].var.template cast<float>()});
    }
    return out;
  }

  /// Every parameter must be present with a matching shape.
  void import_parameters(const std::vector<NamedTensor>& tensors) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& nt : tensors) by_name.emplace(nt.name, &nt.tensor);
    for (auto& p : params_) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + p.name);
      if (it->second->shape() != p.value.shape()) {
        throw DimensionError("checkpoint parameter " + p.name + " has shape " + shape_string(it->second->shape()) +
                             ", model expects " + shape_string(p.value.shape()));
      }
      p.value = it->second->template cast<Real>();
    }
    if (by_name.size() != params_.size()) throw FormatError("checkpoint has parameters the model does not");
  }

  void import_buffers(const std::vector<NamedTensor>& tensors) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& nt : tensors) by_name.emplace(nt.name, &nt.tensor);
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      auto m = by_name.find(stat_names_[i] + ".running_mean");
      auto v = by_name.find(stat_names_[i] + ".running_var");
      if (m == by_name.end() || v == by_name.end()) throw FormatError("missing statistics for " + stat_names_[i]);
      stats_[i].mean = m->second->template cast<Real>();
      stats_[i].var = v->second->template cast<Real>();
      stats_[i].updates = std::numeric_limits<std::uint64_t>::max() / 2;
    }
  }

  /// Copies values from a set of another precision with identical layout.
  template <class Other>
  void copy_from(const ParameterSet<Other>& other) {
    auto src = other.parameters();
    if (src.size() != params_.size()) throw DimensionError("parameter sets differ in size");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = src[i]->value.template cast<Real>();
  }

 private:
  std::deque<Parameter<Real>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::deque<ops::RunningStats<Real>> stats_;
  std::vector<std::string> stat_names_;
};

/// Kaiming-uniform (fan-in) initialised (fan_in, fan_out) matrix.
template <class Real>
BasicTensor<Real> kaiming_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / double(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  BasicTensor<Real> w(Shape{fan_in, fan_out});
  for (auto& v : w.storage()) v = Real(dist(rng));
  return w;
}

/// 1x1 convolution: linear map without bias, optional batch norm, optional
/// leaky ReLU.
template <class Real>
class Unary {
 public:
  Unary() = default;
  Unary(ParameterSet<Real>& params, const std::string& name, std::size_t in, std::size_t out, bool batch_norm,
        std::optional<Real> slope, std::mt19937_64& rng)
      : slope_(slope) {
    weight_ = &params.add(name + ".weight", kaiming_uniform<Real>(in, out, rng));
    if (batch_norm) {
      gamma_ = &params.add(name + ".bn.gamma", BasicTensor<Real>(Shape{out}, Real(1)), false);
      beta_ = &params.add(name + ".bn.beta", BasicTensor<Real>(Shape{out}, Real(0)), false);
      stats_ = &params.add_stats(name + ".bn", out);
    }
  }

  BasicVar<Real> operator()(BasicVar<Real> x) const {
    auto& tape = x.tape();
    auto y = ops::linear(x, tape.parameter(*weight_));
    if (gamma_) y = ops::batch_norm(y, tape.parameter(*gamma_), tape.parameter(*beta_), *stats_);
    if (slope_) y = ops::leaky_relu(y, *slope_);
    return y;
  }

  Parameter<Real>& weight() const { return *weight_; }

 private:
  Parameter<Real>* weight_ = nullptr;
  Parameter<Real>* gamma_ = nullptr;
  Parameter<Real>* beta_ = nullptr;
  ops::RunningStats<Real>* stats_ = nullptr;
  std::optional<Real> slope_;
};

}  // namespace sala

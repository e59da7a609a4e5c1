#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/tape.hpp"

namespace sarnet {

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators keyed by parameter name, plus the step counter.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::uint64_t step() const { return step_; }

  const Tensor& first_moment(const std::string& name) const { return moments_.at(name).first; }
  const Tensor& second_moment(const std::string& name) const { return moments_.at(name).second; }

  /// One bias-corrected Adam update of every trainable parameter, in place.
  void update(ParameterStore& params, const Gradients& grads) {
    require(grads.size() == params.size(), "adam_step: gradient map does not cover the parameter set");
    ++step_;
    const double t = static_cast<double>(step_);
    const double correction1 = 1.0 - std::pow(config_.beta1, t);
    const double correction2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = params[k];
      if (!p.trainable) continue;
      require(grads.name(k) == p.name, "adam_step: gradient map is not aligned with the parameter set");
      const Tensor& g = grads[k];
      require(g.shape() == p.value.shape(), "adam_step: gradient shape " + shape_string(g.shape()) +
                                                " does not match parameter '" + p.name + "' " +
                                                shape_string(p.value.shape()));
      auto [it, inserted] = moments_.try_emplace(p.name, Tensor(p.value.shape()), Tensor(p.value.shape()));
      Tensor& m = it->second.first;
      Tensor& v = it->second.second;
      require(m.shape() == p.value.shape(), "adam_step: moment shape drifted for '" + p.name + "'");
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / correction1;
        const double v_hat = v[i] / correction2;
        p.value[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
      }
    }
  }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

inline void adam_step(AdamState& state, ParameterStore& params, const Gradients& grads) {
  state.update(params, grads);
}

}  // namespace sarnet

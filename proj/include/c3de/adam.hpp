// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "c3de/tensor.hpp"

namespace c3de {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("adam: lr must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
      throw std::invalid_argument("adam: betas must lie in (0,1)");
    }
    if (!(eps > 0)) throw std::invalid_argument("adam: eps must be positive");
    if (!(weight_decay >= 0)) throw std::invalid_argument("adam: weight_decay must be >= 0");
  }
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
};

/// One bias-corrected Adam update with coupled L2 decay (decay is added to
/// the gradient before the moments are updated).
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
                      const AdamConfig& cfg, const std::string& name = "param") {
  if (param.size() != grad.size()) {
    throw std::invalid_argument("adam: gradient for '" + name + "' has " +
                                std::to_string(grad.size()) + " entries, parameter has " +
                                std::to_string(param.size()));
  }
  if (state.first_moment.empty()) {
    state.first_moment.assign(param.size(), 0.0);
    state.second_moment.assign(param.size(), 0.0);
  }
  if (state.first_moment.size() != param.size() || state.second_moment.size() != param.size()) {
    throw std::invalid_argument("adam: moment arrays for '" + name +
                                "' are not congruent with the parameter");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw std::domain_error("adam: non-finite gradient for '" + name + "'");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + cfg.weight_decay * param[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Adam over a fixed list of parameters. Frozen parameters are skipped.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg), states_(params_.size()) {
    cfg_.validate();
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (p.frozen) continue;
      adam_step(p.value.values(), p.grad.values(), states_[i], cfg_, p.name);
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  const AdamState& state(std::size_t i) const { return states_.at(i); }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<AdamState> states_;
};

}  // namespace c3de

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "c3de/autodiff.hpp"
#include "c3de/tensor.hpp"

namespace c3de {

enum class SolverMethod { kEuler, kRk4, kAdaptiveRk4 };
enum class GradientMode { kBackprop, kAdjoint };

inline const char* to_string(SolverMethod m) {
  switch (m) {
    case SolverMethod::kEuler: return "euler";
    case SolverMethod::kRk4: return "rk4";
    case SolverMethod::kAdaptiveRk4: return "adaptive_rk4";
  }
  return "?";
}

inline const char* to_string(GradientMode m) {
  return m == GradientMode::kAdjoint ? "adjoint" : "backprop_through_solver";
}

inline SolverMethod parse_solver_method(const std::string& s) {
  if (s == "euler") return SolverMethod::kEuler;
  if (s == "rk4") return SolverMethod::kRk4;
  if (s == "adaptive_rk4" || s == "adaptive") return SolverMethod::kAdaptiveRk4;
  throw std::invalid_argument("unknown solver method '" + s + "'");
}

inline GradientMode parse_gradient_mode(const std::string& s) {
  if (s == "backprop" || s == "backprop_through_solver") return GradientMode::kBackprop;
  if (s == "adjoint") return GradientMode::kAdjoint;
  throw std::invalid_argument("unknown gradient mode '" + s + "'");
}

struct SolverConfig {
  SolverMethod method = SolverMethod::kRk4;
  double step_size = 1.2;
  double rtol = 1e-3;
  double atol = 1e-5;
  double min_step = 1e-8;
  double max_step = 1.0;
  GradientMode gradient_mode = GradientMode::kBackprop;

  void validate() const {
    if (!(step_size > 0)) throw std::invalid_argument("solver: step_size must be positive");
    if (!(rtol > 0) || !(atol > 0)) throw std::invalid_argument("solver: rtol and atol must be positive");
    if (!(min_step > 0) || !(min_step <= max_step)) {
      throw std::invalid_argument("solver: require 0 < min_step <= max_step");
    }
  }
};

template <class State>
struct Trajectory {
  double t0 = 0.0;
  std::vector<double> times;
  std::vector<State> states;
  std::size_t nfe = 0;
};

// State algebra: the solver runs on plain Tensors (no gradient) or on tape
// Vars (backprop through the solver).
namespace solver_detail {

inline const Tensor& values(const Tensor& t) { return t; }
inline const Tensor& values(const Var& v) { return v.value(); }

inline Tensor combine(const std::vector<Tensor>& terms, const std::vector<double>& coeffs) {
  Tensor out(terms.front().shape(), 0.0);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].shape() != out.shape()) {
      throw std::invalid_argument("solver: field returned shape " + shape_str(terms[k].shape()) +
                                  " for state of shape " + shape_str(out.shape()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * terms[k][i];
  }
  return out;
}

inline Var combine(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
  return lincomb(terms, coeffs);
}

inline std::string at_time(double t) {
  std::ostringstream os;
  os.precision(10);
  os << t;
  return os.str();
}

template <class State, class Field>
State call_field(Field& f, const State& h, double t, std::size_t& nfe) {
  ++nfe;
  State out = [&]() {
    try {
      return f(h, t);
    } catch (const std::domain_error& e) {
      throw std::domain_error(std::string(e.what()) + " (vector field at t=" + at_time(t) + ")");
    }
  }();
  const Tensor& v = values(out);
  if (v.shape() != values(h).shape()) {
    throw std::invalid_argument("solver: field returned shape " + shape_str(v.shape()) +
                                " for state of shape " + shape_str(values(h).shape()));
  }
  if (!v.all_finite()) {
    throw std::domain_error("solver: vector field returned NaN/Inf at t=" + at_time(t));
  }
  return out;
}

template <class State, class Field>
State rk4_step(Field& f, const State& h, double t, double dt, const State& k1, std::size_t& nfe) {
  State k2 = call_field(f, combine({h, k1}, {1.0, dt / 2}), t + dt / 2, nfe);
  State k3 = call_field(f, combine({h, k2}, {1.0, dt / 2}), t + dt / 2, nfe);
  State k4 = call_field(f, combine({h, k3}, {1.0, dt}), t + dt, nfe);
  return combine({h, k1, k2, k3, k4}, {1.0, dt / 6, dt / 3, dt / 3, dt / 6});
}

// Fixed-step advance over [t, t_end]; the last sub-step is shortened so the
// segment ends exactly on t_end.
template <class State, class Field>
State advance_fixed(Field& f, State h, double t, double t_end, const SolverConfig& cfg,
                    std::size_t& nfe) {
  const double dir = t_end >= t ? 1.0 : -1.0;
  const double tiny = 1e-12 * std::max(1.0, std::abs(t_end - t));
  while (dir * (t_end - t) > tiny) {
    double dt = dir * std::min(cfg.step_size, std::abs(t_end - t));
    if (std::abs(t_end - (t + dt)) <= tiny) dt = t_end - t;
    State k1 = call_field(f, h, t, nfe);
    if (cfg.method == SolverMethod::kEuler) {
      h = combine({h, k1}, {1.0, dt});
    } else {
      h = rk4_step(f, h, t, dt, k1, nfe);
    }
    t = (std::abs(t_end - (t + dt)) <= tiny) ? t_end : t + dt;
  }
  return h;
}

inline double error_ratio(const Tensor& coarse, const Tensor& fine, const Tensor& prev,
                          const SolverConfig& cfg) {
  double worst = 0.0;
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const double est = std::abs(fine[i] - coarse[i]) / 15.0;
    const double tol = cfg.atol + cfg.rtol * std::max(std::abs(prev[i]), std::abs(fine[i]));
    worst = std::max(worst, est / tol);
  }
  return worst;
}

// Step-doubling RK4: one step of dt against two of dt/2, Richardson estimate
// |diff|/15, accepted iff within atol + rtol*|state|.
template <class State, class Field>
State advance_adaptive(Field& f, State h, double t, double t_end, double& proposal,
                       const SolverConfig& cfg, std::size_t& nfe) {
  const double dir = t_end >= t ? 1.0 : -1.0;
  const double tiny = 1e-12 * std::max(1.0, std::abs(t_end - t));
  while (dir * (t_end - t) > tiny) {
    const double remaining = std::abs(t_end - t);
    const double mag = std::min(proposal, remaining);
    const double dt = dir * mag;
    State k1 = call_field(f, h, t, nfe);
    State coarse = rk4_step(f, h, t, dt, k1, nfe);
    State mid = rk4_step(f, h, t, dt / 2, k1, nfe);
    State k1m = call_field(f, mid, t + dt / 2, nfe);
    State fine = rk4_step(f, mid, t + dt / 2, dt / 2, k1m, nfe);
    const double ratio = error_ratio(values(coarse), values(fine), values(h), cfg);
    const double factor = ratio > 0 ? 0.9 * std::pow(ratio, -0.2) : 1e9;
    const double next = std::clamp(mag * factor, cfg.min_step, cfg.max_step);
    if (ratio <= 1.0) {
      h = std::move(fine);
      t = mag >= remaining - tiny ? t_end : t + dt;
      // A step clipped by the segment end says nothing about the achievable size.
      proposal = (mag < proposal && ratio <= 1.0) ? std::max(proposal, next) : next;
    } else {
      if (mag <= cfg.min_step * (1.0 + 1e-12)) {
        throw std::runtime_error("solver: adaptive step underflow below min_step=" +
                                 at_time(cfg.min_step) + " at t=" + at_time(t));
      }
      proposal = std::min(next, mag * 0.999);
    }
  }
  return h;
}

}  // namespace solver_detail

/// Integrates dh/dt = field(h, t) from t0 to t1, recording the state at every
/// entry of `obs_times` (sorted, inside [t0, t1]). The terminal time is always
/// recorded. Works for t1 < t0 as well (integration backwards in time).
template <class State, class Field>
Trajectory<State> integrate(Field&& field, const State& h0, double t0, double t1,
                            std::vector<double> obs_times, const SolverConfig& cfg) {
  cfg.validate();
  if (t1 == t0) throw std::invalid_argument("solver: empty integration span");
  if (!solver_detail::values(h0).all_finite()) {
    throw std::invalid_argument("solver: initial state is not finite");
  }
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double lo = std::min(t0, t1), hi = std::max(t0, t1);
  for (std::size_t i = 0; i < obs_times.size(); ++i) {
    if (obs_times[i] < lo || obs_times[i] > hi) {
      throw std::invalid_argument("solver: observation time " + solver_detail::at_time(obs_times[i]) +
                                  " outside span");
    }
    if (i > 0 && dir * (obs_times[i] - obs_times[i - 1]) < 0) {
      throw std::invalid_argument("solver: observation times must be sorted along the span");
    }
  }
  if (obs_times.empty() || obs_times.back() != t1) obs_times.push_back(t1);

  Trajectory<State> traj;
  traj.t0 = t0;
  State h = h0;
  double t = t0;
  double proposal = std::min(cfg.max_step, std::abs(t1 - t0));
  for (double target : obs_times) {
    if (target != t) {
      if (cfg.method == SolverMethod::kAdaptiveRk4) {
        h = solver_detail::advance_adaptive(field, h, t, target, proposal, cfg, traj.nfe);
      } else {
        h = solver_detail::advance_fixed(field, h, t, target, cfg, traj.nfe);
      }
      t = target;
    }
    traj.times.push_back(target);
    traj.states.push_back(h);
  }
  return traj;
}

template <class State, class Field>
Trajectory<State> integrate_adaptive(Field&& field, const State& h0, double t0, double t1,
                                     std::vector<double> obs_times, SolverConfig cfg) {
  cfg.method = SolverMethod::kAdaptiveRk4;
  return integrate(std::forward<Field>(field), h0, t0, t1, std::move(obs_times), cfg);
}

/// A vector field that records itself on a tape; parameters enter through
/// Tape::param so vector-Jacobian products reach them.
using TapeField = std::function<Var(Tape&, const Var& h, double t)>;

/// Evaluates a TapeField on plain values (scratch tape per call).
inline auto plain_field(const TapeField& field) {
  return [&field](const Tensor& h, double t) {
    Tape tape;
    Var out = field(tape, tape.constant(h), t);
    return out.value();
  };
}

struct AdjointResult {
  Tensor h0;  // state reconstructed at t0 by the backward pass
  Tensor grad_h0;
  std::vector<Tensor> grad_params;
  std::size_t nfe = 0;
};

/// Gradients of a terminal-state loss by integrating the adjoint system
/// backwards from t1 to t0:
///   dh/dt = f,  da/dt = -a^T df/dh,  dg/dt = -a^T df/dtheta
/// Only the final state, the adjoint and the running parameter gradient are
/// held in memory.
inline AdjointResult adjoint_backward(const TapeField& field, const Trajectory<Tensor>& traj,
                                      const Tensor& grad_h1,
                                      const std::vector<Parameter*>& params,
                                      const SolverConfig& cfg) {
  if (traj.states.empty()) throw std::invalid_argument("adjoint: empty trajectory");
  const Tensor& h1 = traj.states.back();
  if (grad_h1.shape() != h1.shape()) {
    throw std::invalid_argument("adjoint: loss gradient shape " + shape_str(grad_h1.shape()) +
                                " does not match trajectory state " + shape_str(h1.shape()));
  }
  const double t0 = traj.t0;
  const double t1 = traj.times.back();
  const std::size_t n = h1.size();
  std::vector<std::size_t> offsets;
  std::size_t total = 2 * n;
  for (Parameter* p : params) {
    offsets.push_back(total);
    total += p->value.size();
  }

  // Reversed time s = -t so the generic forward integrator can be reused.
  auto aug = [&](const Tensor& y, double s) {
    const double t = -s;
    Tensor h(h1.shape(), std::vector<double>(y.storage().begin(), y.storage().begin() + n));
    Tensor a(h1.shape(),
             std::vector<double>(y.storage().begin() + n, y.storage().begin() + 2 * n));
    Tape tape;
    Var hv = tape.input(h, true);
    Var f = field(tape, hv, t);
    if (f.shape() != h.shape()) {
      throw std::invalid_argument("adjoint: field output " + shape_str(f.shape()) +
                                  " does not match trajectory state " + shape_str(h.shape()));
    }
    tape.vjp(f, a);
    Tensor out(Shape{total}, 0.0);
    const Tensor& fv = f.value();
    const Tensor ah = tape.grad(hv);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = -fv[i];
      out[n + i] = ah[i];
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor gp = tape.param_grad(*params[k]);
      std::copy(gp.values().begin(), gp.values().end(), out.values().begin() + offsets[k]);
    }
    return out;
  };

  Tensor y1(Shape{total}, 0.0);
  std::copy(h1.values().begin(), h1.values().end(), y1.values().begin());
  std::copy(grad_h1.values().begin(), grad_h1.values().end(), y1.values().begin() + n);
  auto back = integrate(aug, y1, -t1, -t0, {}, cfg);
  const Tensor& y0 = back.states.back();

  AdjointResult res;
  res.nfe = back.nfe;
  res.h0 = Tensor(h1.shape(), std::vector<double>(y0.storage().begin(), y0.storage().begin() + n));
  res.grad_h0 = Tensor(h1.shape(),
                       std::vector<double>(y0.storage().begin() + n, y0.storage().begin() + 2 * n));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto begin = y0.storage().begin() + static_cast<std::ptrdiff_t>(offsets[k]);
    res.grad_params.emplace_back(
        params[k]->value.shape(),
        std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(params[k]->value.size())));
  }
  return res;
}

}  // namespace c3de

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "c3de/autodiff.hpp"
#include "c3de/cdesolve.hpp"
#include "c3de/rng.hpp"
#include "c3de/spline.hpp"
#include "c3de/tensor.hpp"

namespace c3de {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

/// Continuous-time GRU field parameters for one control path. Weights use the
/// row-vector convention: pre-activation = xdot * W + h * U + b.
struct GruFieldParams {
  Parameter W_r, W_z, W_h;  // control channels x H
  Parameter U_r, U_z, U_h;  // H x H
  Parameter b_r, b_z, b_h;  // H

  GruFieldParams() = default;

  GruFieldParams(const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto mk = [&](const char* name, Shape s) {
      return Parameter(prefix + "." + name, uniform_tensor(std::move(s), bound, rng));
    };
    W_r = mk("W_r", {in, hidden});
    W_z = mk("W_z", {in, hidden});
    W_h = mk("W_h", {in, hidden});
    U_r = mk("U_r", {hidden, hidden});
    U_z = mk("U_z", {hidden, hidden});
    U_h = mk("U_h", {hidden, hidden});
    b_r = mk("b_r", {hidden});
    b_z = mk("b_z", {hidden});
    b_h = mk("b_h", {hidden});
  }

  std::size_t input_channels() const { return W_r.value.dim(0); }
  std::size_t hidden() const { return U_r.value.dim(0); }

  std::vector<Parameter*> list() {
    return {&W_r, &W_z, &W_h, &U_r, &U_z, &U_h, &b_r, &b_z, &b_h};
  }
};

/// dh/dt = (1 - z) * (htilde - h) with the GRU gates driven by the control
/// derivative `xdot` (rows x channels) and the hidden state h (rows x H).
inline Var gru_field(Tape& tape, const Var& h, const Var& xdot, GruFieldParams& p) {
  std::vector<Var> w;
  for (Parameter* q : p.list()) w.push_back(tape.param(*q));
  return gru_field_op(h, xdot, w);
}

/// Affine map from the first window observation to h(0).
struct InitParams {
  Parameter W;  // channels x H
  Parameter b;  // H

  InitParams() = default;
  InitParams(const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    W = Parameter(prefix + ".W", uniform_tensor({in, hidden}, bound, rng));
    b = Parameter(prefix + ".b", uniform_tensor({hidden}, bound, rng));
  }

  std::vector<Parameter*> list() { return {&W, &b}; }
};

inline Var init_hidden(Tape& tape, const Var& first_observation, InitParams& p) {
  return add(matmul(first_observation, tape.param(p.W)), tape.param(p.b));
}

struct EncoderConfig {
  std::size_t N = 0;  // regions
  std::size_t C = 1;  // flow channels
  std::size_t K = 1;  // POI categories
  std::size_t H = 64;
  std::size_t T = 14;  // flow window (days)
  std::size_t M = 4;   // POI window (months)
  std::size_t L = 8;   // observation points
  SolverConfig flow_solver;
  SolverConfig poi_solver;
  // Multiply the causal weights by K so uniform weights leave the field unchanged.
  bool rescale_weights = false;

  void validate() const {
    if (N == 0 || C == 0 || K == 0 || H == 0) {
      throw std::invalid_argument("encoder: N, C, K, H must be positive");
    }
    if (T < 2 || M < 2) throw std::invalid_argument("encoder: T and M must be >= 2");
    if (L < 1) throw std::invalid_argument("encoder: L must be >= 1");
    flow_solver.validate();
    poi_solver.validate();
  }
};

struct EncoderParams {
  GruFieldParams flow;
  GruFieldParams poi;
  InitParams flow_init;
  InitParams poi_init;

  EncoderParams() = default;
  EncoderParams(const EncoderConfig& cfg, Rng& rng)
      : flow("encoder.flow", cfg.C, cfg.H, rng),
        poi("encoder.poi", 1, cfg.H, rng),
        flow_init("encoder.flow_init", cfg.C, cfg.H, rng),
        poi_init("encoder.poi_init", 1, cfg.H, rng) {}

  std::vector<Parameter*> list() {
    std::vector<Parameter*> out;
    for (auto* group : {&flow, &poi}) {
      for (Parameter* p : group->list()) out.push_back(p);
    }
    for (auto* group : {&flow_init, &poi_init}) {
      for (Parameter* p : group->list()) out.push_back(p);
    }
    return out;
  }
};

/// Control paths of a batch of windows on the unit interval. Flow channels
/// are laid out (window, node, channel); POI channels (window, node, category).
struct BatchPaths {
  std::size_t batch = 0;
  SplinePath flow;
  SplinePath poi;
  Tensor flow_first;  // (B*N) x C
  Tensor poi_first;   // (B*N*K) x 1
};

inline std::vector<double> unit_knots(std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  t.back() = 1.0;
  return t;
}

/// Fits one natural cubic spline per channel for every window. Knots 0..T-1
/// (days) and 0..M-1 (months) are mapped affinely onto [0, 1].
inline BatchPaths fit_window_paths(const std::vector<const Tensor*>& flow_windows,
                                   const std::vector<const Tensor*>& poi_windows) {
  if (flow_windows.empty() || flow_windows.size() != poi_windows.size()) {
    throw std::invalid_argument("encoder: need matching, non-empty flow and POI windows");
  }
  const Shape fs = flow_windows.front()->shape();
  const Shape ps = poi_windows.front()->shape();
  if (fs.size() != 3 || ps.size() != 3 || fs[1] != ps[1]) {
    throw std::invalid_argument("encoder: windows must be T x N x C and M x N x K, got " +
                                shape_str(fs) + " and " + shape_str(ps));
  }
  const std::size_t B = flow_windows.size();
  const std::size_t T = fs[0], N = fs[1], C = fs[2], M = ps[0], K = ps[2];
  std::vector<double> fobs(T * B * N * C), pobs(M * B * N * K);
  for (std::size_t b = 0; b < B; ++b) {
    if (flow_windows[b]->shape() != fs || poi_windows[b]->shape() != ps) {
      throw std::invalid_argument("encoder: window " + std::to_string(b) + " has shape " +
                                  shape_str(flow_windows[b]->shape()) + "/" +
                                  shape_str(poi_windows[b]->shape()));
    }
    const auto& fv = flow_windows[b]->storage();
    for (std::size_t j = 0; j < T; ++j) {
      std::copy_n(fv.begin() + j * N * C, N * C, fobs.begin() + (j * B + b) * N * C);
    }
    const auto& pv = poi_windows[b]->storage();
    for (std::size_t j = 0; j < M; ++j) {
      std::copy_n(pv.begin() + j * N * K, N * K, pobs.begin() + (j * B + b) * N * K);
    }
  }
  BatchPaths out;
  out.batch = B;
  out.flow = SplinePath::fit(unit_knots(T), fobs, B * N * C);
  out.poi = SplinePath::fit(unit_knots(M), pobs, B * N * K);
  out.flow_first = Tensor(Shape{B * N, C},
                          std::vector<double>(fobs.begin(), fobs.begin() + B * N * C));
  out.poi_first = Tensor(Shape{B * N * K, 1},
                         std::vector<double>(pobs.begin(), pobs.begin() + B * N * K));
  return out;
}

/// Causal weights N x K for one window from its hidden states
/// h_x (N x H) and h_p (N x K x H).
using CausalWeigher = std::function<Tensor(const Tensor& h_x, const Tensor& h_p)>;

struct EncoderState {
  Var h_x;  // (B*N) x H
  Var h_p;  // (B*N*K) x H
  std::vector<Tensor> causal_schedule;  // L entries of (B*N) x K
  std::vector<Var> obs_h_x;             // states at the L observation points
  std::vector<Var> obs_h_p;
  std::vector<double> obs_times_flow;   // in days, i*T/L
  std::vector<double> obs_times_poi;    // in months, i*M/L
  std::size_t nfe = 0;
};

namespace encoder_detail {

inline Tensor control_derivative(const SplinePath& path, double t, std::size_t rows) {
  Tensor out(Shape{rows, path.channels() / rows}, 0.0);
  path.derivative_into(t, out.values());
  return out;
}

inline void check_paths(const BatchPaths& paths, const EncoderConfig& cfg) {
  const std::size_t B = paths.batch;
  if (paths.flow.channels() != B * cfg.N * cfg.C || paths.poi.channels() != B * cfg.N * cfg.K) {
    throw std::invalid_argument("encoder: control paths do not match N/C/K of the config");
  }
}

// Computes C_i for every window of the batch and expands it to one scale per
// POI hidden row ((B*N*K) x 1).
inline Tensor causal_step(const CausalWeigher& weigher, const Tensor& hx, const Tensor& hp,
                          const EncoderConfig& cfg, std::size_t batch, Tensor& schedule_entry) {
  const std::size_t N = cfg.N, K = cfg.K, H = cfg.H;
  schedule_entry = Tensor(Shape{batch * N, K}, 0.0);
  Tensor scales(Shape{batch * N * K, 1}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor wx(Shape{N, H}, std::vector<double>(hx.storage().begin() + b * N * H,
                                               hx.storage().begin() + (b + 1) * N * H));
    Tensor wp(Shape{N, K, H}, std::vector<double>(hp.storage().begin() + b * N * K * H,
                                                  hp.storage().begin() + (b + 1) * N * K * H));
    Tensor c = weigher(wx, wp);
    if (c.shape() != Shape{N, K}) {
      throw std::invalid_argument("encoder: causal weights have shape " + shape_str(c.shape()) +
                                  ", expected " + shape_str({N, K}));
    }
    for (std::size_t i = 0; i < N * K; ++i) {
      schedule_entry[b * N * K + i] = c[i];
      scales[b * N * K + i] = cfg.rescale_weights ? c[i] * static_cast<double>(K) : c[i];
    }
  }
  return scales;
}

inline double segment_begin(std::size_t i, std::size_t L) {
  return static_cast<double>(i) / static_cast<double>(L);
}
inline double segment_end(std::size_t i, std::size_t L) {
  return i + 1 == L ? 1.0 : static_cast<double>(i + 1) / static_cast<double>(L);
}

}  // namespace encoder_detail

/// Dual-path encoder on a tape. Flow path: dh_x = f_x(h_x, x'(t)) dt. POI
/// path: dh_p = C_i * f_p(h_p, p'(t)) dt on segment i, where C_i is computed
/// from the hidden states at the segment start and held fixed (stop-gradient).
/// With `weigher == nullptr` no correction is applied.
inline EncoderState encode(Tape& tape, const BatchPaths& paths, EncoderParams& params,
                           const CausalWeigher* weigher, const EncoderConfig& cfg) {
  cfg.validate();
  encoder_detail::check_paths(paths, cfg);
  const std::size_t B = paths.batch;
  const std::size_t rows_x = B * cfg.N, rows_p = B * cfg.N * cfg.K;
  EncoderState st;
  st.h_x = init_hidden(tape, tape.constant(paths.flow_first), params.flow_init);
  st.h_p = init_hidden(tape, tape.constant(paths.poi_first), params.poi_init);

  auto flow_field = [&](const Var& h, double t) {
    Var xd = tape.constant(encoder_detail::control_derivative(paths.flow, t, rows_x));
    return gru_field(tape, h, xd, params.flow);
  };

  for (std::size_t i = 0; i < cfg.L; ++i) {
    const double a = encoder_detail::segment_begin(i, cfg.L);
    const double b = encoder_detail::segment_end(i, cfg.L);
    st.obs_times_flow.push_back(static_cast<double>(i * cfg.T) / static_cast<double>(cfg.L));
    st.obs_times_poi.push_back(static_cast<double>(i * cfg.M) / static_cast<double>(cfg.L));
    st.obs_h_x.push_back(st.h_x);
    st.obs_h_p.push_back(st.h_p);
    Var scale;
    bool scaled = false;
    if (weigher) {
      Tensor entry;
      scale = tape.constant(encoder_detail::causal_step(*weigher, st.h_x.value(),
                                                        st.h_p.value(), cfg, B, entry));
      st.causal_schedule.push_back(std::move(entry));
      scaled = true;
    }
    auto poi_field = [&](const Var& h, double t) {
      Var pd = tape.constant(encoder_detail::control_derivative(paths.poi, t, rows_p));
      Var f = gru_field(tape, h, pd, params.poi);
      return scaled ? hadamard(f, scale) : f;
    };
    auto tx = integrate(flow_field, st.h_x, a, b, {}, cfg.flow_solver);
    auto tp = integrate(poi_field, st.h_p, a, b, {}, cfg.poi_solver);
    st.h_x = tx.states.back();
    st.h_p = tp.states.back();
    st.nfe += tx.nfe + tp.nfe;
  }
  return st;
}

/// Value-only encoding used by the adjoint gradient mode and by inference.
/// Keeps terminal states plus the causal schedule.
struct PlainEncoding {
  Tensor h_x;
  Tensor h_p;
  std::vector<Tensor> causal_schedule;
  std::vector<Tensor> poi_scales;  // per segment, empty when uncorrected
  std::vector<Tensor> obs_h_x;     // states at the L observation points
  std::vector<Tensor> obs_h_p;
  std::size_t nfe = 0;
};

namespace encoder_detail {

inline TapeField flow_tape_field(const BatchPaths& paths, GruFieldParams& p, std::size_t rows) {
  return [&paths, &p, rows](Tape& tape, const Var& h, double t) {
    Var xd = tape.constant(control_derivative(paths.flow, t, rows));
    return gru_field(tape, h, xd, p);
  };
}

inline TapeField poi_tape_field(const BatchPaths& paths, GruFieldParams& p, std::size_t rows,
                                const Tensor* scale) {
  return [&paths, &p, rows, scale](Tape& tape, const Var& h, double t) {
    Var pd = tape.constant(control_derivative(paths.poi, t, rows));
    Var f = gru_field(tape, h, pd, p);
    return scale ? hadamard(f, tape.constant(*scale)) : f;
  };
}

inline Tensor init_hidden_value(const Tensor& first, InitParams& p) {
  Tape tape;
  return init_hidden(tape, tape.constant(first), p).value();
}

}  // namespace encoder_detail

inline PlainEncoding encode_values(const BatchPaths& paths, EncoderParams& params,
                                   const CausalWeigher* weigher, const EncoderConfig& cfg) {
  cfg.validate();
  encoder_detail::check_paths(paths, cfg);
  const std::size_t B = paths.batch;
  const std::size_t rows_x = B * cfg.N, rows_p = B * cfg.N * cfg.K;
  PlainEncoding enc;
  enc.h_x = encoder_detail::init_hidden_value(paths.flow_first, params.flow_init);
  enc.h_p = encoder_detail::init_hidden_value(paths.poi_first, params.poi_init);
  const TapeField ff = encoder_detail::flow_tape_field(paths, params.flow, rows_x);
  for (std::size_t i = 0; i < cfg.L; ++i) {
    const double a = encoder_detail::segment_begin(i, cfg.L);
    const double b = encoder_detail::segment_end(i, cfg.L);
    enc.obs_h_x.push_back(enc.h_x);
    enc.obs_h_p.push_back(enc.h_p);
    if (weigher) {
      Tensor entry;
      enc.poi_scales.push_back(
          encoder_detail::causal_step(*weigher, enc.h_x, enc.h_p, cfg, B, entry));
      enc.causal_schedule.push_back(std::move(entry));
    }
    const TapeField pf = encoder_detail::poi_tape_field(
        paths, params.poi, rows_p, weigher ? &enc.poi_scales.back() : nullptr);
    auto tx = integrate(plain_field(ff), enc.h_x, a, b, {}, cfg.flow_solver);
    auto tp = integrate(plain_field(pf), enc.h_p, a, b, {}, cfg.poi_solver);
    enc.h_x = tx.states.back();
    enc.h_p = tp.states.back();
    enc.nfe += tx.nfe + tp.nfe;
  }
  return enc;
}

namespace encoder_detail {

inline void deposit(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->frozen) continue;
    for (std::size_t i = 0; i < grads[k].size(); ++i) params[k]->grad[i] += grads[k][i];
  }
}

inline void init_hidden_backward(const Tensor& first, InitParams& p, const Tensor& grad_h0) {
  Tape tape;
  Var h0 = init_hidden(tape, tape.constant(first), p);
  tape.vjp(h0, grad_h0);
  deposit(p.list(), {tape.param_grad(p.W), tape.param_grad(p.b)});
}

}  // namespace encoder_detail

/// Adjoint-mode backward pass of the encoder: given dL/dh_x(1) and dL/dh_p(1),
/// integrates the adjoint systems segment by segment from t=1 back to t=0 and
/// accumulates parameter gradients into Parameter::grad.
inline std::size_t encode_adjoint_backward(const BatchPaths& paths, EncoderParams& params,
                                           const PlainEncoding& enc, const Tensor& grad_hx,
                                           const Tensor& grad_hp, const EncoderConfig& cfg) {
  const std::size_t B = paths.batch;
  const std::size_t rows_x = B * cfg.N, rows_p = B * cfg.N * cfg.K;
  const bool corrected = !enc.poi_scales.empty();
  const TapeField ff = encoder_detail::flow_tape_field(paths, params.flow, rows_x);
  const auto flow_params = params.flow.list();
  const auto poi_params = params.poi.list();
  Tensor hx = enc.h_x, hp = enc.h_p, ax = grad_hx, ap = grad_hp;
  std::size_t nfe = 0;
  for (std::size_t i = cfg.L; i-- > 0;) {
    Trajectory<Tensor> tx{encoder_detail::segment_begin(i, cfg.L),
                          {encoder_detail::segment_end(i, cfg.L)}, {hx}, 0};
    auto rx = adjoint_backward(ff, tx, ax, flow_params, cfg.flow_solver);
    encoder_detail::deposit(flow_params, rx.grad_params);
    // Restart from the stored forward state rather than the reconstructed one.
    hx = enc.obs_h_x[i];
    ax = std::move(rx.grad_h0);

    const TapeField pf = encoder_detail::poi_tape_field(
        paths, params.poi, rows_p, corrected ? &enc.poi_scales[i] : nullptr);
    Trajectory<Tensor> tp{encoder_detail::segment_begin(i, cfg.L),
                          {encoder_detail::segment_end(i, cfg.L)}, {hp}, 0};
    auto rp = adjoint_backward(pf, tp, ap, poi_params, cfg.poi_solver);
    encoder_detail::deposit(poi_params, rp.grad_params);
    hp = enc.obs_h_p[i];
    ap = std::move(rp.grad_h0);
    nfe += rx.nfe + rp.nfe;
  }
  encoder_detail::init_hidden_backward(paths.flow_first, params.flow_init, ax);
  encoder_detail::init_hidden_backward(paths.poi_first, params.poi_init, ap);
  return nfe;
}

}  // namespace c3de

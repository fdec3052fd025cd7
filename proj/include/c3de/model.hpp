// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "c3de/autodiff.hpp"
#include "c3de/causal.hpp"
#include "c3de/dynamics.hpp"
#include "c3de/rng.hpp"
#include "c3de/tensor.hpp"

namespace c3de {

struct FusionParams {
  Parameter W_x, b_x, W_p, b_p;

  FusionParams() = default;
  FusionParams(std::size_t H, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(H));
    W_x = Parameter("fusion.W_x", uniform_tensor({H, H}, bound, rng));
    b_x = Parameter("fusion.b_x", Tensor(Shape{H}, 0.0));
    W_p = Parameter("fusion.W_p", uniform_tensor({H, H}, bound, rng));
    b_p = Parameter("fusion.b_p", Tensor(Shape{H}, 0.0));
  }

  std::vector<Parameter*> list() { return {&W_x, &b_x, &W_p, &b_p}; }
};

/// Two-layer perceptron H -> H_mid -> S*C with a sigmoid between the layers.
struct PredictorParams {
  Parameter W1, b1, W2, b2;
  std::size_t S = 1;
  std::size_t C = 1;

  PredictorParams() = default;
  PredictorParams(std::size_t H, std::size_t H_mid, std::size_t S_, std::size_t C_, Rng& rng)
      : S(S_), C(C_) {
    W1 = Parameter("head.W1", uniform_tensor({H, H_mid}, 1.0 / std::sqrt(double(H)), rng));
    b1 = Parameter("head.b1", Tensor(Shape{H_mid}, 0.0));
    W2 = Parameter("head.W2",
                   uniform_tensor({H_mid, S_ * C_}, 1.0 / std::sqrt(double(H_mid)), rng));
    b2 = Parameter("head.b2", Tensor(Shape{S_ * C_}, 0.0));
  }

  std::vector<Parameter*> list() { return {&W1, &b1, &W2, &b2}; }
};

struct LossConfig {
  double delta = 1.0;
  void validate() const {
    if (!(delta > 0)) throw std::invalid_argument("loss: delta must be positive");
  }
};

/// Pools h_p ((R*K) x H) over categories to R x H. With `weights` (R x K) the
/// pooling is the weighted sum; otherwise the mean.
inline Var pool_poi(Tape& tape, const Var& h_p, std::size_t K, const Tensor* weights = nullptr) {
  const std::size_t rows = h_p.shape()[0];
  const std::size_t H = h_p.shape()[1];
  if (rows % K != 0) {
    throw std::invalid_argument("pool_poi: " + std::to_string(rows) +
                                " POI rows are not a multiple of K=" + std::to_string(K));
  }
  Var cube = reshape(h_p, {rows / K, K, H});
  if (!weights) return mean_axis(cube, 1);
  if (weights->shape() != Shape{rows / K, K}) {
    throw std::invalid_argument("pool_poi: weights have shape " + shape_str(weights->shape()));
  }
  Var w = tape.constant(weights->reshaped({rows / K, K, 1}));
  return sum_axis(hadamard(cube, w), 1);
}

/// sigmoid(h_x W_x + b_x) * (pooled W_p + b_p)
inline Var fuse(Tape& tape, const Var& h_x, const Var& pooled, FusionParams& p) {
  if (h_x.shape() != pooled.shape()) {
    throw std::invalid_argument("fuse: h_x " + shape_str(h_x.shape()) + " vs pooled h_p " +
                                shape_str(pooled.shape()));
  }
  Var gate = sigmoid(add(matmul(h_x, tape.param(p.W_x)), tape.param(p.b_x)));
  Var poi = add(matmul(pooled, tape.param(p.W_p)), tape.param(p.b_p));
  return hadamard(gate, poi);
}

/// Forecast rows (one per window-node) laid out as S*C columns, step-major.
inline Var predict_head(Tape& tape, const Var& fused, PredictorParams& p) {
  Var mid = sigmoid(add(matmul(fused, tape.param(p.W1)), tape.param(p.b1)));
  return add(matmul(mid, tape.param(p.W2)), tape.param(p.b2));
}

inline Var huber(const Var& yhat, const Tensor& y, const LossConfig& cfg) {
  return huber_loss(yhat, y, cfg.delta);
}

/// Plain-value Huber, mean-reduced.
inline double huber_value(const Tensor& y, const Tensor& yhat, const LossConfig& cfg) {
  if (y.shape() != yhat.shape()) {
    throw std::invalid_argument("huber: shape mismatch " + shape_str(y.shape()) + " vs " +
                                shape_str(yhat.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = std::abs(y[i] - yhat[i]);
    s += r <= cfg.delta ? 0.5 * r * r : cfg.delta * r - 0.5 * cfg.delta * cfg.delta;
  }
  return s / static_cast<double>(y.size());
}

enum class PoolingMode { kMean, kCausal };

inline const char* to_string(PoolingMode m) {
  return m == PoolingMode::kMean ? "mean" : "causal";
}

inline PoolingMode parse_pooling(const std::string& s) {
  if (s == "mean") return PoolingMode::kMean;
  if (s == "causal") return PoolingMode::kCausal;
  throw std::invalid_argument("unknown pooling mode '" + s + "'");
}

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t S = 14;
  LossConfig loss;
  PoolingMode pooling = PoolingMode::kMean;
  GradientMode gradient_mode = GradientMode::kBackprop;

  void validate() const {
    encoder.validate();
    loss.validate();
    if (S == 0) throw std::invalid_argument("model: S must be positive");
  }
};

/// A batch of normalised windows, already turned into control paths.
struct Batch {
  BatchPaths paths;
  Tensor target;  // (B*N) x (S*C), step-major columns; empty for inference
};

/// Stacks T x N x C / M x N x K windows (and optional S x N x C targets).
inline Batch make_batch(const std::vector<const Tensor*>& flow_windows,
                        const std::vector<const Tensor*>& poi_windows,
                        const std::vector<const Tensor*>& targets = {}) {
  Batch batch;
  batch.paths = fit_window_paths(flow_windows, poi_windows);
  if (!targets.empty()) {
    if (targets.size() != flow_windows.size()) {
      throw std::invalid_argument("batch: " + std::to_string(targets.size()) + " targets for " +
                                  std::to_string(flow_windows.size()) + " windows");
    }
    const Shape ts = targets.front()->shape();
    const std::size_t S = ts.at(0), N = ts.at(1), C = ts.at(2);
    const std::size_t B = targets.size();
    batch.target = Tensor(Shape{B * N, S * C}, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      if (targets[b]->shape() != ts) {
        throw std::invalid_argument("batch: target " + std::to_string(b) + " has shape " +
                                    shape_str(targets[b]->shape()));
      }
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            batch.target.at(b * N + n, s * C + c) = targets[b]->at(s, n, c);
          }
        }
      }
    }
  }
  return batch;
}

/// Inverse of the row layout: (B*N) x (S*C) -> B tensors of S x N x C.
inline std::vector<Tensor> unstack_forecast(const Tensor& rows, std::size_t N, std::size_t S,
                                            std::size_t C) {
  const std::size_t B = rows.dim(0) / N;
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor f(Shape{S, N, C}, 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) f.at(s, n, c) = rows.at(b * N + n, s * C + c);
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

struct ForwardResult {
  double loss = 0.0;
  Tensor forecast;  // (B*N) x (S*C), normalised units
  std::vector<Tensor> causal_schedule;
  std::size_t nfe = 0;
};

/// Dual neural CDE encoder, optional causal correction, gated fusion and MLP
/// head. Without an estimator the model is the uncorrected dual CDE.
class C3deModel {
 public:
  C3deModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(sub_seed(seed, "init"));
    const auto& e = cfg_.encoder;
    encoder_ = EncoderParams(e, rng);
    fusion_ = FusionParams(e.H, rng);
    head_ = PredictorParams(e.H, e.H, cfg_.S, e.C, rng);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  EncoderParams& encoder() noexcept { return encoder_; }
  FusionParams& fusion() noexcept { return fusion_; }
  PredictorParams& head() noexcept { return head_; }

  void set_estimator(std::shared_ptr<CausalEstimator> est) {
    estimator_ = std::move(est);
    weigher_ = estimator_ ? estimator_->weigher() : CausalWeigher{};
  }
  CausalEstimator* estimator() const noexcept { return estimator_.get(); }

  /// Replaces the weigher used by the encoder (for example a recorded
  /// schedule). An empty function removes the correction; set_estimator
  /// restores the estimator's own weigher.
  void set_weigher(CausalWeigher w) {
    estimator_.reset();
    weigher_ = std::move(w);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = encoder_.list();
    for (Parameter* p : fusion_.list()) out.push_back(p);
    for (Parameter* p : head_.list()) out.push_back(p);
    return out;
  }

  std::vector<const Parameter*> const_parameters() {
    std::vector<const Parameter*> out;
    for (Parameter* p : parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  /// Loss and forecast; parameter gradients are accumulated into
  /// Parameter::grad with the configured gradient mode.
  ForwardResult forward_loss(const Batch& batch) {
    if (batch.target.size() == 0) throw std::invalid_argument("forward_loss: batch has no target");
    return cfg_.gradient_mode == GradientMode::kAdjoint ? adjoint_pass(batch, true)
                                                        : backprop_pass(batch);
  }

  /// Forecast only (normalised units); no gradients.
  ForwardResult predict(const Batch& batch) { return adjoint_pass(batch, false); }

 private:
  const CausalWeigher* weigher() const { return weigher_ ? &weigher_ : nullptr; }

  const Tensor* pooling_weights(const std::vector<Tensor>& schedule) const {
    if (cfg_.pooling != PoolingMode::kCausal || schedule.empty()) return nullptr;
    return &schedule.back();
  }

  ForwardResult backprop_pass(const Batch& batch) {
    Tape tape;
    EncoderState st = encode(tape, batch.paths, encoder_, weigher(), cfg_.encoder);
    Var pooled = pool_poi(tape, st.h_p, cfg_.encoder.K, pooling_weights(st.causal_schedule));
    Var yhat = predict_head(tape, fuse(tape, st.h_x, pooled, fusion_), head_);
    Var loss = huber(yhat, batch.target, cfg_.loss);
    tape.backward(loss);
    return {loss.value().item(), yhat.value(), std::move(st.causal_schedule), st.nfe};
  }

  ForwardResult adjoint_pass(const Batch& batch, bool with_grad) {
    PlainEncoding enc = encode_values(batch.paths, encoder_, weigher(), cfg_.encoder);
    Tape tape;
    Var hx = tape.input(enc.h_x, with_grad);
    Var hp = tape.input(enc.h_p, with_grad);
    Var pooled = pool_poi(tape, hp, cfg_.encoder.K, pooling_weights(enc.causal_schedule));
    Var yhat = predict_head(tape, fuse(tape, hx, pooled, fusion_), head_);
    ForwardResult res{0.0, yhat.value(), std::move(enc.causal_schedule), enc.nfe};
    if (batch.target.size() != 0) {
      Var loss = huber(yhat, batch.target, cfg_.loss);
      res.loss = loss.value().item();
      if (with_grad) {
        tape.backward(loss);
        res.nfe += encode_adjoint_backward(batch.paths, encoder_, enc, tape.grad(hx),
                                           tape.grad(hp), cfg_.encoder);
      }
    }
    return res;
  }

  ModelConfig cfg_;
  EncoderParams encoder_;
  FusionParams fusion_;
  PredictorParams head_;
  std::shared_ptr<CausalEstimator> estimator_;
  CausalWeigher weigher_;
};

}  // namespace c3de

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "c3de/autodiff.hpp"
#include "c3de/dynamics.hpp"
#include "c3de/rng.hpp"
#include "c3de/tensor.hpp"

namespace c3de {

enum class PerturbationKind { kZero, kRandom, kMean };

inline const char* to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::kZero: return "zero";
    case PerturbationKind::kRandom: return "random";
    case PerturbationKind::kMean: return "mean";
  }
  return "?";
}

inline PerturbationKind parse_perturbation(const std::string& s) {
  if (s == "zero") return PerturbationKind::kZero;
  if (s == "random") return PerturbationKind::kRandom;
  if (s == "mean") return PerturbationKind::kMean;
  throw std::invalid_argument("unknown perturbation strategy '" + s + "'");
}

struct PerturbationStrategy {
  PerturbationKind kind = PerturbationKind::kZero;
  double random_scale = 1.0;  // random only
  std::uint64_t seed = 0;     // random only
};

/// Category-level counterfactual of h_p (N x K x H) for category k.
///   zero:   slice k set to 0
///   mean:   slice k replaced by the mean of the other K-1 slices
///   random: slice k replaced by N(0, (random_scale * std(h_p))^2) noise
/// `rng` is required for the random kind only.
inline Tensor perturb(const Tensor& h_p, std::size_t k, const PerturbationStrategy& strategy,
                      Rng* rng = nullptr) {
  if (h_p.rank() != 3) {
    throw std::invalid_argument("perturb: h_p must be N x K x H, got " + shape_str(h_p.shape()));
  }
  const std::size_t N = h_p.dim(0), K = h_p.dim(1), H = h_p.dim(2);
  if (k >= K) {
    throw std::out_of_range("perturb: category " + std::to_string(k) + " out of range for K=" +
                            std::to_string(K));
  }
  Tensor out = h_p;
  switch (strategy.kind) {
    case PerturbationKind::kZero:
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) out.at(n, k, h) = 0.0;
      }
      break;
    case PerturbationKind::kMean: {
      if (K == 1) throw std::invalid_argument("perturb: mean strategy needs K >= 2");
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) {
          double s = 0.0;
          for (std::size_t j = 0; j < K; ++j) {
            if (j != k) s += h_p.at(n, j, h);
          }
          out.at(n, k, h) = s / static_cast<double>(K - 1);
        }
      }
      break;
    }
    case PerturbationKind::kRandom: {
      if (!rng) throw std::invalid_argument("perturb: random strategy needs an RNG");
      double mean = 0.0;
      for (double v : h_p.values()) mean += v;
      mean /= static_cast<double>(h_p.size());
      double var = 0.0;
      for (double v : h_p.values()) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(h_p.size()));
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) {
          out.at(n, k, h) = rng->normal(0.0, strategy.random_scale * sd);
        }
      }
      break;
    }
  }
  return out;
}

/// Row-normalised (A + I).
inline Tensor normalized_adjacency(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw std::invalid_argument("adjacency must be square, got " + shape_str(adjacency.shape()));
  }
  const std::size_t N = adjacency.dim(0);
  Tensor out = adjacency;
  for (std::size_t i = 0; i < N; ++i) {
    out.at(i, i) += 1.0;
    double s = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      if (out.at(i, j) < 0) throw std::invalid_argument("adjacency: negative weight");
      s += out.at(i, j);
    }
    for (std::size_t j = 0; j < N; ++j) out.at(i, j) /= s;
  }
  return out;
}

/// Graph-aware surrogate predictor T(h_x, h_p) -> R^N. Node features
/// [h_x, vec(h_p)] go through a linear pooling layer to a shared width W; the
/// pooled row of each node is concatenated with one mixing step of the pooled
/// rows under the normalised adjacency (2W wide), and a two-layer perceptron
/// maps that to one scalar per node.
class SurrogatePredictor {
 public:
  SurrogatePredictor() = default;

  SurrogatePredictor(Tensor adjacency, std::size_t K, std::size_t H, std::size_t width, Rng& rng)
      : mix_(normalized_adjacency(adjacency)), K_(K), H_(H) {
    const std::size_t in = H + K * H;
    // Zero start: input slices the data never ties to the target keep weights
    // near zero, so zero-setting counterfactuals do not pick up arbitrary offsets.
    pool_W = Parameter("surrogate.pool_W", Tensor(Shape{in, width}, 0.0));
    pool_b = Parameter("surrogate.pool_b", Tensor(Shape{width}, 0.0));
    W1 = Parameter("surrogate.W1",
                   uniform_tensor({2 * width, width}, 1.0 / std::sqrt(2 * width), rng));
    b1 = Parameter("surrogate.b1", Tensor(Shape{width}, 0.0));
    W2 = Parameter("surrogate.W2", uniform_tensor({width, 1}, 1.0 / std::sqrt(width), rng));
    b2 = Parameter("surrogate.b2", Tensor(Shape{1}, 0.0));
  }

  Parameter pool_W, pool_b, W1, b1, W2, b2;

  std::vector<Parameter*> list() { return {&pool_W, &pool_b, &W1, &b1, &W2, &b2}; }
  std::vector<const Parameter*> list() const { return {&pool_W, &pool_b, &W1, &b1, &W2, &b2}; }

  std::size_t nodes() const { return mix_.dim(0); }
  std::size_t categories() const { return K_; }
  std::size_t hidden() const { return H_; }
  std::size_t width() const { return W1.value.dim(1); }
  const Tensor& mixing() const { return mix_; }

  bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    for (Parameter* p : list()) p->frozen = true;
  }

  /// Raw node features [h_x, vec(h_p)]: N x (H + K*H).
  Tensor node_features(const Tensor& h_x, const Tensor& h_p) const {
    const std::size_t N = nodes();
    if (h_x.shape() != Shape{N, H_} || h_p.shape() != Shape{N, K_, H_}) {
      throw std::invalid_argument("surrogate: expected h_x " + shape_str({N, H_}) + " and h_p " +
                                  shape_str({N, K_, H_}) + ", got " + shape_str(h_x.shape()) +
                                  " and " + shape_str(h_p.shape()));
    }
    const std::size_t D = H_ + K_ * H_;
    Tensor raw(Shape{N, D}, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(h_x.storage().begin() + n * H_, H_, raw.storage().begin() + n * D);
      std::copy_n(h_p.storage().begin() + n * K_ * H_, K_ * H_,
                  raw.storage().begin() + n * D + H_);
    }
    return raw;
  }

  /// Batched forward on a tape. h_x is (B*N) x H and h_p (B*N*K) x H with
  /// rows ordered (window, node[, category]); returns (B*N) x 1.
  Var forward(Tape& tape, const Var& h_x, const Var& h_p) {
    const std::size_t N = nodes();
    const std::size_t rows = h_x.shape().at(0);
    if (rows % N != 0 || h_x.shape().at(1) != H_ || h_p.shape() != Shape{rows * K_, H_}) {
      throw std::invalid_argument("surrogate: batched inputs " + shape_str(h_x.shape()) + " / " +
                                  shape_str(h_p.shape()) + " do not match N=" +
                                  std::to_string(N) + ", K=" + std::to_string(K_) +
                                  ", H=" + std::to_string(H_));
    }
    Var raw = concat({h_x, reshape(h_p, {rows, K_ * H_})}, 1);
    Var pooled = add(matmul(raw, tape.param(pool_W)), tape.param(pool_b));
    Var mix = tape.constant(mix_);
    std::vector<Var> blocks;
    for (std::size_t b = 0; b < rows / N; ++b) {
      blocks.push_back(matmul(mix, slice(pooled, 0, b * N, (b + 1) * N)));
    }
    Var mixed = blocks.size() == 1 ? blocks.front() : concat(blocks, 0);
    Var u = concat({pooled, mixed}, 1);
    Var v = c3de::tanh(add(matmul(u, tape.param(W1)), tape.param(b1)));
    return add(matmul(v, tape.param(W2)), tape.param(b2));
  }

  /// T(h_x, h_p) in R^N for one window (h_x N x H, h_p N x K x H).
  std::vector<double> predict(const Tensor& h_x, const Tensor& h_p) const {
    const Tensor raw = node_features(h_x, h_p);
    const std::size_t N = nodes(), D = raw.dim(1), W = width();
    Tensor pooled(Shape{N, W}, 0.0);
    detail::gemm_nn(raw.values().data(), pool_W.value.values().data(), pooled.values().data(), N,
                    D, W);
    for (std::size_t r = 0; r < N; ++r) {
      for (std::size_t j = 0; j < W; ++j) pooled.at(r, j) += pool_b.value[j];
    }
    Tensor mixed(Shape{N, W}, 0.0);
    detail::gemm_nn(mix_.values().data(), pooled.values().data(), mixed.values().data(), N, N, W);
    Tensor u(Shape{N, 2 * W}, 0.0);
    for (std::size_t r = 0; r < N; ++r) {
      for (std::size_t j = 0; j < W; ++j) {
        u.at(r, j) = pooled.at(r, j);
        u.at(r, W + j) = mixed.at(r, j);
      }
    }
    Tensor v(Shape{N, W}, 0.0);
    detail::gemm_nn(u.values().data(), W1.value.values().data(), v.values().data(), N, 2 * W, W);
    std::vector<double> out(N, b2.value[0]);
    for (std::size_t r = 0; r < N; ++r) {
      for (std::size_t j = 0; j < W; ++j) {
        out[r] += std::tanh(v.at(r, j) + b1.value[j]) * W2.value[j];
      }
    }
    return out;
  }

 private:
  Tensor mix_;
  std::size_t K_ = 0;
  std::size_t H_ = 0;
  bool frozen_ = false;
};

/// Anything that maps (h_x, h_p) to one output per node; the surrogate and
/// test doubles both fit.
using NodePredictor = std::function<std::vector<double>(const Tensor& h_x, const Tensor& h_p)>;

/// Causal effect of category k: |T(h_x, h_p) - T(h_x, perturb(h_p, k))| per
/// node. `anchor` is the factual output, computed once per observation point.
inline std::vector<double> causal_effect(const NodePredictor& predictor,
                                         const std::vector<double>& anchor, const Tensor& h_x,
                                         const Tensor& h_p, std::size_t k,
                                         const PerturbationStrategy& strategy, Rng* rng) {
  const Tensor cf = perturb(h_p, k, strategy, rng);
  const std::vector<double> out = predictor(h_x, cf);
  if (out.size() != anchor.size()) {
    throw std::invalid_argument("causal_effect: predictor output size changed");
  }
  std::vector<double> effect(out.size());
  for (std::size_t n = 0; n < out.size(); ++n) effect[n] = std::abs(anchor[n] - out[n]);
  return effect;
}

inline std::vector<double> causal_effect(const SurrogatePredictor& surrogate, const Tensor& h_x,
                                         const Tensor& h_p, std::size_t k,
                                         const PerturbationStrategy& strategy,
                                         Rng* rng = nullptr) {
  if (!surrogate.frozen()) {
    throw std::logic_error("causal_effect: surrogate must be frozen before estimating effects");
  }
  const auto anchor = surrogate.predict(h_x, h_p);
  return causal_effect(
      [&](const Tensor& x, const Tensor& p) { return surrogate.predict(x, p); }, anchor, h_x,
      h_p, k, strategy, rng);
}

/// Per-node softmax over K effect vectors -> N x K.
inline Tensor causal_weights(const std::vector<std::vector<double>>& effects) {
  if (effects.empty()) throw std::invalid_argument("causal_weights: need K >= 1");
  const std::size_t K = effects.size();
  const std::size_t N = effects.front().size();
  Tensor logits(Shape{N, K}, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    if (effects[k].size() != N) {
      throw std::invalid_argument("causal_weights: effect vectors differ in length");
    }
    for (std::size_t n = 0; n < N; ++n) {
      if (!std::isfinite(effects[k][n])) {
        throw std::domain_error("causal_weights: non-finite effect for category " +
                                std::to_string(k) + ", node " + std::to_string(n));
      }
      logits.at(n, k) = effects[k][n];
    }
  }
  Tensor out(logits.shape(), 0.0);
  softmax_rows(logits.values(), out.values(), K);
  return out;
}

struct CausalEffectReport {
  std::vector<std::vector<double>> effects;  // K x N
  Tensor weights;                            // N x K
  PerturbationKind strategy = PerturbationKind::kZero;
};

/// g(h_x, h_p): counterfactual effects of every category, normalised into
/// causal weights. Holds a frozen surrogate.
class CausalEstimator {
 public:
  CausalEstimator(std::shared_ptr<const SurrogatePredictor> surrogate,
                  PerturbationStrategy strategy)
      : surrogate_(std::move(surrogate)), strategy_(strategy), rng_(strategy.seed) {
    if (!surrogate_) throw std::invalid_argument("causal estimator: surrogate missing");
    if (!surrogate_->frozen()) {
      throw std::logic_error("causal estimator: surrogate must be frozen");
    }
  }

  const PerturbationStrategy& strategy() const noexcept { return strategy_; }
  const SurrogatePredictor& surrogate() const noexcept { return *surrogate_; }

  /// Restarts the random strategy's stream (e.g. before an evaluation pass).
  void reseed() { rng_ = Rng(strategy_.seed); }

  CausalEffectReport report(const Tensor& h_x, const Tensor& h_p) {
    const std::size_t K = surrogate_->categories();
    const SurrogatePredictor& s = *surrogate_;
    const auto anchor = s.predict(h_x, h_p);
    NodePredictor pred = [&s](const Tensor& x, const Tensor& p) { return s.predict(x, p); };
    CausalEffectReport rep;
    rep.strategy = strategy_.kind;
    for (std::size_t k = 0; k < K; ++k) {
      rep.effects.push_back(causal_effect(pred, anchor, h_x, h_p, k, strategy_, &rng_));
    }
    rep.weights = causal_weights(rep.effects);
    return rep;
  }

  CausalWeigher weigher() {
    return [this](const Tensor& h_x, const Tensor& h_p) { return report(h_x, h_p).weights; };
  }

 private:
  std::shared_ptr<const SurrogatePredictor> surrogate_;
  PerturbationStrategy strategy_;
  Rng rng_;
};

}  // namespace c3de

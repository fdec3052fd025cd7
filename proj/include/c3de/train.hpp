// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3de/adam.hpp"
#include "c3de/causal.hpp"
#include "c3de/checkpoint.hpp"
#include "c3de/data.hpp"
#include "c3de/eval.hpp"
#include "c3de/model.hpp"

namespace c3de {

namespace train_detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline Batch batch_of(const std::vector<WindowSample>& windows,
                      const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                      bool with_target) {
  std::vector<const Tensor*> f, p, y;
  for (std::size_t i = begin; i < end; ++i) {
    const WindowSample& w = windows[order[i]];
    f.push_back(&w.flow_window);
    p.push_back(&w.poi_window);
    if (with_target) y.push_back(&w.target);
  }
  return make_batch(f, p, y);
}

// Next-day node totals (summed over channels) as a (B*N) x 1 column.
inline Tensor next_day_totals(const std::vector<WindowSample>& windows,
                              const std::vector<std::size_t>& order, std::size_t begin,
                              std::size_t end) {
  const std::size_t N = windows.front().target.dim(1), C = windows.front().target.dim(2);
  Tensor out(Shape{(end - begin) * N, 1}, 0.0);
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor& t = windows[order[i]].target;
    for (std::size_t n = 0; n < N; ++n) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += t.at(0, n, c);
      out[(i - begin) * N + n] = s;
    }
  }
  return out;
}

inline std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

inline void restore(const std::vector<Parameter*>& params, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

// Splits a (B*N*K) x H or (B*N) x H block into the b-th window's N x [K x] H slab.
inline Tensor window_slab(const Tensor& rows, std::size_t b, std::size_t per_window,
                          Shape shape) {
  const std::size_t H = rows.dim(1);
  const auto begin = rows.storage().begin() + static_cast<std::ptrdiff_t>(b * per_window * H);
  return Tensor(std::move(shape),
                std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per_window * H)));
}

}  // namespace train_detail

// ---------------------------------------------------------------------------
// Surrogate pretraining

struct SurrogateConfig {
  std::size_t epochs = 30;
  std::size_t width = 32;
  std::size_t batch = 64;
  // Probability of hiding a window's flow features from the surrogate during
  // pretraining. Without it the flow state alone explains next-day totals and
  // the surrogate has no reason to depend on any POI category.
  double flow_dropout = 0.5;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  std::shared_ptr<SurrogatePredictor> surrogate;
  EncoderParams encoder;  // the correction-free encoder the surrogate was trained against
  std::vector<double> epoch_loss;
  double val_loss = 0.0;       // Huber at the terminal state on the validation split
  double val_zero_loss = 0.0;  // Huber of predicting zero on the same targets
};

/// Trains a correction-free dual CDE encoder jointly with the surrogate to
/// predict next-day node totals (normalised units) from the hidden states at
/// every observation point after the first and at the terminal time. The
/// surrogate is frozen on return.
inline PretrainResult pretrain_surrogate(const DatasetBundle& normalized,
                                         const EncoderConfig& enc_cfg,
                                         const SurrogateConfig& cfg,
                                         const LossConfig& loss_cfg = {}) {
  if (!normalized.normalized) throw std::invalid_argument("pretrain: bundle must be normalised");
  const WindowSpec spec{enc_cfg.T, enc_cfg.M, 1};
  const auto train = make_windows(normalized, spec, Split::kTrain);
  const auto val = make_windows(normalized, spec, Split::kVal);
  if (train.empty()) throw std::invalid_argument("pretrain: empty training split");

  Rng init(sub_seed(cfg.seed, "surrogate.init"));
  Rng shuffle(sub_seed(cfg.seed, "surrogate.shuffle"));
  Rng dropout(sub_seed(cfg.seed, "surrogate.dropout"));
  if (!(cfg.flow_dropout >= 0.0 && cfg.flow_dropout < 1.0)) {
    throw std::invalid_argument("pretrain: flow_dropout must lie in [0, 1)");
  }
  PretrainResult res;
  res.encoder = EncoderParams(enc_cfg, init);
  res.surrogate = std::make_shared<SurrogatePredictor>(normalized.adjacency, enc_cfg.K,
                                                       enc_cfg.H, cfg.width, init);
  SurrogatePredictor& sur = *res.surrogate;
  std::vector<Parameter*> params = res.encoder.list();
  for (Parameter* p : sur.list()) params.push_back(p);
  Adam opt(params, cfg.adam);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = train_detail::shuffled(train.size(), shuffle);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      Batch batch = train_detail::batch_of(train, order, b, e, false);
      const Tensor y = train_detail::next_day_totals(train, order, b, e);
      opt.zero_grad();
      Tape tape;
      EncoderState st = encode(tape, batch.paths, res.encoder, nullptr, enc_cfg);
      const std::size_t rows = (e - b) * enc_cfg.N;
      Tensor keep(Shape{rows, 1}, 1.0);
      if (cfg.flow_dropout > 0.0) {
        for (std::size_t w = 0; w < e - b; ++w) {
          if (dropout.uniform(0.0, 1.0) >= cfg.flow_dropout) continue;
          for (std::size_t n = 0; n < enc_cfg.N; ++n) keep[w * enc_cfg.N + n] = 0.0;
        }
      }
      const Var mask = tape.constant(keep);
      std::vector<Var> losses;
      for (std::size_t i = 1; i < st.obs_h_x.size(); ++i) {
        losses.push_back(huber(sur.forward(tape, hadamard(st.obs_h_x[i], mask), st.obs_h_p[i]),
                               y, loss_cfg));
      }
      losses.push_back(huber(sur.forward(tape, hadamard(st.h_x, mask), st.h_p), y, loss_cfg));
      Var loss = lincomb(losses, std::vector<double>(losses.size(), 1.0 / double(losses.size())));
      tape.backward(loss);
      opt.step();
      total += loss.value().item();
      ++batches;
    }
    res.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  sur.freeze();

  // Validation: terminal-state predictions against the zero predictor.
  const std::size_t N = enc_cfg.N, K = enc_cfg.K, H = enc_cfg.H;
  const auto all = train_detail::identity_order(val.size());
  double loss = 0.0, zero = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < val.size(); b += cfg.batch) {
    const std::size_t e = std::min(val.size(), b + cfg.batch);
    Batch batch = train_detail::batch_of(val, all, b, e, false);
    const Tensor y = train_detail::next_day_totals(val, all, b, e);
    PlainEncoding enc = encode_values(batch.paths, res.encoder, nullptr, enc_cfg);
    for (std::size_t w = 0; w < e - b; ++w) {
      const auto out = sur.predict(train_detail::window_slab(enc.h_x, w, N, {N, H}),
                                   train_detail::window_slab(enc.h_p, w, N * K, {N, K, H}));
      Tensor yw(Shape{N}, 0.0), pw(Shape{N}, 0.0), zw(Shape{N}, 0.0);
      for (std::size_t n = 0; n < N; ++n) {
        yw[n] = y[w * N + n];
        pw[n] = out[n];
      }
      loss += huber_value(yw, pw, loss_cfg);
      zero += huber_value(yw, zw, loss_cfg);
      ++count;
    }
  }
  res.val_loss = loss / static_cast<double>(count);
  res.val_zero_loss = zero / static_cast<double>(count);
  return res;
}

inline nlohmann::json surrogate_hyperparameters(const EncoderConfig& enc, std::size_t width) {
  return {{"kind", "surrogate"}, {"N", enc.N}, {"C", enc.C}, {"K", enc.K}, {"H", enc.H},
          {"T", enc.T},          {"M", enc.M}, {"L", enc.L}, {"width", width}};
}

inline void save_surrogate(const std::filesystem::path& stem, PretrainResult& res,
                           const EncoderConfig& enc) {
  std::vector<const Parameter*> params;
  for (const Parameter* p : res.surrogate->list()) params.push_back(p);
  for (const Parameter* p : res.encoder.list()) params.push_back(p);
  save_checkpoint(stem, params, surrogate_hyperparameters(enc, res.surrogate->width()));
}

/// Loads a frozen surrogate (and its encoder) saved by save_surrogate. The
/// stored N, C, K, H must agree with `enc`.
inline PretrainResult load_surrogate(const std::filesystem::path& stem, const Tensor& adjacency,
                                     const EncoderConfig& enc) {
  const nlohmann::json hyper = read_checkpoint_descriptor(stem).at("hyperparameters");
  if (hyper.value("kind", std::string()) != "surrogate") {
    throw std::runtime_error("checkpoint " + stem.string() + " is not a surrogate checkpoint");
  }
  for (const char* key : {"N", "C", "K", "H"}) {
    const std::size_t want = key[0] == 'N' ? enc.N : key[0] == 'C' ? enc.C
                           : key[0] == 'K' ? enc.K : enc.H;
    if (hyper.at(key).get<std::size_t>() != want) {
      throw std::runtime_error("surrogate checkpoint has " + std::string(key) + "=" +
                               std::to_string(hyper.at(key).get<std::size_t>()) +
                               ", the run uses " + std::to_string(want));
    }
  }
  Rng dummy(0);
  PretrainResult res;
  res.surrogate = std::make_shared<SurrogatePredictor>(adjacency, enc.K, enc.H,
                                                       hyper.at("width").get<std::size_t>(), dummy);
  res.encoder = EncoderParams(enc, dummy);
  std::vector<Parameter*> params = res.surrogate->list();
  for (Parameter* p : res.encoder.list()) params.push_back(p);
  load_checkpoint(stem, params);
  res.surrogate->freeze();
  return res;
}

/// Copies encoder values into the model's encoder (by position; both lists
/// are built in the same order).
inline void copy_encoder(EncoderParams& from, EncoderParams& to) {
  auto src = from.list();
  auto dst = to.list();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->value.shape() != dst[i]->value.shape()) {
      throw std::invalid_argument("copy_encoder: shape mismatch at " + src[i]->name);
    }
    dst[i]->value = src[i]->value;
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  MetricReport report;
  std::vector<Tensor> forecasts;  // S x N x C, original units
  std::vector<Tensor> actual;     // S x N x C, original units
  std::vector<std::size_t> anchors;
  std::size_t nfe = 0;
};

/// Forecasts every window of `split` and scores it in original units.
inline EvalResult evaluate_model(C3deModel& model, const DatasetBundle& raw,
                                 const DatasetBundle& normalized, Split split,
                                 std::size_t batch_size, const std::string& model_name,
                                 HorizonMode mode = HorizonMode::kStep) {
  const auto& mc = model.config();
  const WindowSpec spec{mc.encoder.T, mc.encoder.M, mc.S};
  const auto windows = make_windows(normalized, spec, split);
  if (model.estimator()) model.estimator()->reseed();
  const std::size_t N = mc.encoder.N, C = mc.encoder.C;
  EvalResult res;
  const auto all = train_detail::identity_order(windows.size());
  for (std::size_t b = 0; b < windows.size(); b += batch_size) {
    const std::size_t e = std::min(windows.size(), b + batch_size);
    ForwardResult fr = model.predict(train_detail::batch_of(windows, all, b, e, false));
    res.nfe += fr.nfe;
    for (Tensor& f : unstack_forecast(fr.forecast, N, mc.S, C)) {
      res.forecasts.push_back(denormalize(f, normalized.norm_stats));
    }
  }
  for (const WindowSample& w : windows) {
    res.anchors.push_back(w.anchor_day);
    res.actual.push_back(data_detail::slab(raw.flow, w.anchor_day + 1, mc.S));
  }
  res.report = horizon_report(res.actual, res.forecasts, model_name, raw.name, mode);
  return res;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
};

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::size_t batch = 64;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

/// Adam on the Huber objective with early stopping on validation MAE
/// (original units). The best parameters are restored on return.
inline TrainResult train_model(C3deModel& model, const DatasetBundle& raw,
                               const DatasetBundle& normalized, const TrainConfig& cfg) {
  if (!normalized.normalized) throw std::invalid_argument("train: bundle must be normalised");
  const auto& mc = model.config();
  const WindowSpec spec{mc.encoder.T, mc.encoder.M, mc.S};
  const auto train = make_windows(normalized, spec, Split::kTrain);
  Rng shuffle(sub_seed(cfg.seed, "shuffle"));
  const auto params = model.parameters();
  Adam opt(params, cfg.adam);
  TrainResult res;
  std::vector<Tensor> best = train_detail::snapshot(params);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = train_detail::shuffled(train.size(), shuffle);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + cfg.batch);
      try {
        opt.zero_grad();
        ForwardResult fr = model.forward_loss(train_detail::batch_of(train, order, b, e, true));
        opt.step();
        total += fr.loss;
      } catch (const std::exception& ex) {
        throw std::runtime_error("epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batches) + ": " + ex.what());
      }
      ++batches;
    }
    EpochLog log{epoch, total / static_cast<double>(batches), 0.0};
    log.val_mae = evaluate_model(model, raw, normalized, Split::kVal, cfg.batch, "val")
                      .report.row("average")
                      .metrics.mae;
    res.epochs.push_back(log);
    if (cfg.on_epoch) cfg.on_epoch(log);
    if (log.val_mae < res.best_val_mae) {
      res.best_val_mae = log.val_mae;
      res.best_epoch = epoch;
      best = train_detail::snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  train_detail::restore(params, best);
  return res;
}

// ---------------------------------------------------------------------------
// Causal report

/// Effects and weights averaged over windows: entry (i, n, k) at
/// index (i * N + n) * K + k.
struct AggregatedCausalReport {
  std::size_t L = 0, N = 0, K = 0;
  std::size_t windows = 0;
  PerturbationKind strategy = PerturbationKind::kZero;
  std::vector<double> effect;
  std::vector<double> weight;

  double weight_at(std::size_t i, std::size_t n, std::size_t k) const {
    return weight[(i * N + n) * K + k];
  }

  /// Fraction of nodes whose largest weight at observation point i is category k.
  double top_rank_fraction(std::size_t i, std::size_t k) const {
    std::size_t hits = 0;
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < K; ++j) {
        if (weight_at(i, n, j) > weight_at(i, n, best)) best = j;
      }
      hits += best == k;
    }
    return static_cast<double>(hits) / static_cast<double>(N);
  }
};

/// Runs the corrected encoder over `windows` and records the effect report
/// produced at every observation point.
inline AggregatedCausalReport causal_report(EncoderParams& encoder, const EncoderConfig& cfg,
                                            CausalEstimator& estimator,
                                            const std::vector<WindowSample>& windows,
                                            std::size_t batch_size) {
  AggregatedCausalReport rep;
  rep.L = cfg.L;
  rep.N = cfg.N;
  rep.K = cfg.K;
  rep.windows = windows.size();
  rep.strategy = estimator.strategy().kind;
  rep.effect.assign(cfg.L * cfg.N * cfg.K, 0.0);
  rep.weight.assign(cfg.L * cfg.N * cfg.K, 0.0);
  estimator.reseed();
  const auto all = train_detail::identity_order(windows.size());
  for (std::size_t b = 0; b < windows.size(); b += batch_size) {
    const std::size_t e = std::min(windows.size(), b + batch_size);
    const std::size_t B = e - b;
    std::size_t calls = 0;
    CausalWeigher recorder = [&](const Tensor& hx, const Tensor& hp) {
      const std::size_t i = calls++ / B;
      CausalEffectReport r = estimator.report(hx, hp);
      for (std::size_t n = 0; n < cfg.N; ++n) {
        for (std::size_t k = 0; k < cfg.K; ++k) {
          rep.effect[(i * cfg.N + n) * cfg.K + k] += r.effects[k][n];
          rep.weight[(i * cfg.N + n) * cfg.K + k] += r.weights.at(n, k);
        }
      }
      return r.weights;
    };
    encode_values(train_detail::batch_of(windows, all, b, e, false).paths, encoder, &recorder,
                  cfg);
  }
  for (double& v : rep.effect) v /= static_cast<double>(windows.size());
  for (double& v : rep.weight) v /= static_cast<double>(windows.size());
  return rep;
}

}  // namespace c3de

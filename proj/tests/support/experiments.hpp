// SPDX-License-Identifier: Apache-2.0
//
// Synthetic-data experiments shared by the acceptance binary: causal
// recovery after surrogate pretraining and variant comparisons on test MAE.

#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "c3de/data.hpp"
#include "c3de/train.hpp"

namespace experiments {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Setup {
  std::size_t H = 16;
  std::size_t L = 8;
  std::size_t surrogate_epochs = 25;
  std::size_t surrogate_batch = 16;
  double surrogate_dropout = 0.5;
  std::size_t epochs = 12;
  std::size_t patience = 4;
  std::size_t batch = 32;
  double lr = 0.003;
};

struct SyntheticData {
  c3de::DatasetBundle raw, norm;
  std::size_t planted = 0;
};

/// The benchmark dataset: N=20, K=4, beta=2, noise 0.1, 720 days. The planted
/// category rotates with the seed so no index is favoured.
inline SyntheticData synthetic(std::uint64_t seed) {
  c3de::SynthConfig sc;
  sc.N = 20;
  sc.K = 4;
  sc.C = 1;
  sc.days = 720;
  sc.planted_strength = 2.0;
  sc.noise_std = 0.1;
  sc.planted_category = seed % sc.K;
  sc.seed = seed;
  SyntheticData d;
  d.raw = c3de::synth_generate(sc);
  d.norm = c3de::normalize(d.raw);
  d.planted = sc.planted_category;
  return d;
}

inline c3de::ModelConfig model_config(const SyntheticData& d, const Setup& s) {
  c3de::ModelConfig mc;
  auto& e = mc.encoder;
  e.N = d.raw.nodes();
  e.C = d.raw.channels();
  e.K = d.raw.num_categories();
  e.H = s.H;
  e.T = 14;
  e.M = 4;
  e.L = s.L;
  mc.S = 14;
  return mc;
}

inline c3de::PretrainResult pretrain(const SyntheticData& d, const Setup& s, std::uint64_t seed) {
  c3de::SurrogateConfig sc;
  sc.epochs = s.surrogate_epochs;
  sc.batch = s.surrogate_batch;
  sc.flow_dropout = s.surrogate_dropout;
  sc.seed = c3de::sub_seed(seed, "surrogate");
  return c3de::pretrain_surrogate(d.norm, model_config(d, s).encoder, sc);
}

/// Fraction of nodes whose final-observation weight ranks the planted
/// category first, averaged over test windows.
inline double causal_recovery(const SyntheticData& d, const Setup& s, c3de::PretrainResult& pre,
                              c3de::PerturbationKind kind, std::uint64_t seed) {
  const auto enc = model_config(d, s).encoder;
  c3de::CausalEstimator est(pre.surrogate,
                            {kind, 1.0, c3de::sub_seed(seed, "perturbation")});
  const auto windows = c3de::make_windows(d.norm, {enc.T, enc.M, 1}, c3de::Split::kTest);
  const auto rep = c3de::causal_report(pre.encoder, enc, est, windows, 64);
  return rep.top_rank_fraction(enc.L - 1, d.planted);
}

/// Trains one variant and returns its average test MAE. Without `pre` the
/// causal estimator is removed (plain dual CDE).
inline double test_mae(const SyntheticData& d, const Setup& s, std::uint64_t seed,
                       const c3de::PretrainResult* pre,
                       c3de::PerturbationKind kind = c3de::PerturbationKind::kZero) {
  c3de::C3deModel model(model_config(d, s), seed);
  if (pre) {
    c3de::PretrainResult copy = *pre;
    c3de::copy_encoder(copy.encoder, model.encoder());
    model.set_estimator(std::make_shared<c3de::CausalEstimator>(
        pre->surrogate,
        c3de::PerturbationStrategy{kind, 1.0, c3de::sub_seed(seed, "perturbation")}));
  }
  c3de::TrainConfig tc;
  tc.max_epochs = s.epochs;
  tc.patience = s.patience;
  tc.batch = s.batch;
  tc.adam.lr = s.lr;
  tc.seed = seed;
  c3de::train_model(model, d.raw, d.norm, tc);
  const auto er = c3de::evaluate_model(model, d.raw, d.norm, c3de::Split::kTest, 64, "variant");
  return er.report.row("average").metrics.mae;
}

}  // namespace experiments

// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "c3de/data.hpp"
#include "c3de/eval.hpp"
#include "c3de/model.hpp"
#include "c3de/train.hpp"

namespace c3de::cli {

namespace fs = std::filesystem;

// Flag groups. Each group lists its fields once through visit(); the same
// list drives JSON (de)serialisation and flag registration. JSON keys are the
// flag names without the leading dashes, with '-' written as '_'.

struct SynthFlags {
  std::size_t nodes = 20;
  std::size_t channels = 1;
  std::size_t categories = 4;
  std::size_t days = 720;
  std::size_t days_per_month = 30;
  std::size_t planted = 0;
  double beta = 2.0;
  double noise = 0.1;
  double ar = 0.5;
  double weekly = 0.0;
  double poi_step = 0.3;

  template <class V>
  void visit(V&& v) {
    v("nodes", nodes, "number of regions N");
    v("channels", channels, "flow channels C");
    v("categories", categories, "POI categories K");
    v("days", days, "number of days");
    v("days_per_month", days_per_month, "days per POI month");
    v("planted", planted, "planted causal category k*");
    v("beta", beta, "planted strength");
    v("noise", noise, "flow noise std");
    v("ar", ar, "AR(1) coefficient of the flow noise");
    v("weekly", weekly, "relative day-of-week amplitude");
    v("poi_step", poi_step, "std of the monthly POI random-walk step");
  }
};

struct ModelFlags {
  std::size_t H = 64;
  std::size_t T = 14;
  std::size_t M = 4;
  std::size_t S = 14;
  std::size_t L = 8;
  std::string solver = "rk4";
  double step = 1.2;
  double rtol = 1e-3;
  double atol = 1e-5;
  double min_step = 1e-8;
  double max_step = 1.0;
  std::string gradient_mode = "backprop";
  double delta = 1.0;
  std::string pooling = "mean";
  bool rescale = false;

  template <class V>
  void visit(V&& v) {
    v("H", H, "hidden size");
    v("T", T, "flow window length (days)");
    v("M", M, "POI window length (months)");
    v("S", S, "forecast horizon (days)");
    v("L", L, "observation points");
    v("solver", solver, "euler | rk4 | adaptive_rk4");
    v("step", step, "fixed step size (unit-interval time)");
    v("rtol", rtol, "adaptive relative tolerance");
    v("atol", atol, "adaptive absolute tolerance");
    v("min_step", min_step, "adaptive minimum step");
    v("max_step", max_step, "adaptive maximum step");
    v("gradient_mode", gradient_mode, "backprop | adjoint");
    v("delta", delta, "Huber threshold");
    v("pooling", pooling, "POI pooling before fusion: mean | causal");
    v("rescale", rescale, "multiply causal weights by K");
  }
};

struct TrainFlags {
  double lr = 0.001;
  double weight_decay = 5e-4;
  std::size_t batch = 64;
  std::size_t epochs = 100;
  std::size_t patience = 10;

  template <class V>
  void visit(V&& v) {
    v("lr", lr, "Adam learning rate");
    v("weight_decay", weight_decay, "coupled L2 weight decay");
    v("batch", batch, "batch size");
    v("epochs", epochs, "maximum epochs");
    v("patience", patience, "early-stopping patience (epochs)");
  }
};

struct CausalFlags {
  bool causal = true;
  std::string strategy = "zero";
  double random_scale = 1.0;
  std::string surrogate;
  std::size_t surrogate_epochs = 30;
  std::size_t surrogate_width = 32;
  std::size_t surrogate_batch = 16;
  double surrogate_dropout = 0.5;
  bool init_from_surrogate = true;

  template <class V>
  void visit(V&& v) {
    v("causal", causal, "enable the causal correction (--causal=false removes it)");
    v("strategy", strategy, "perturbation strategy: zero | random | mean");
    v("random_scale", random_scale, "noise scale of the random strategy");
    v("surrogate", surrogate, "surrogate checkpoint stem (pretrained inline when empty)");
    v("surrogate_epochs", surrogate_epochs, "surrogate pretraining epochs");
    v("surrogate_width", surrogate_width, "surrogate hidden width");
    v("surrogate_batch", surrogate_batch, "surrogate pretraining batch size");
    v("surrogate_dropout", surrogate_dropout, "flow-feature dropout during pretraining");
    v("init_from_surrogate", init_from_surrogate,
      "initialise the encoder from the surrogate's encoder");
  }
};

struct EvalFlags {
  std::string model;
  std::string split = "test";
  std::string horizon_mode = "step";
  bool with_ha = false;

  template <class V>
  void visit(V&& v) {
    v("model", model, "model checkpoint stem");
    v("split", split, "train | val | test");
    v("horizon_mode", horizon_mode, "step | cumulative");
    v("with_ha", with_ha, "also score the historical-average baseline");
  }
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  SynthFlags synth;
  ModelFlags model;
  TrainFlags train;
  CausalFlags causal;
  EvalFlags eval;
};

namespace detail {

struct ToJson {
  nlohmann::json& j;
  template <class T>
  void operator()(const char* key, T& field, const char*) {
    j[key] = field;
  }
};

struct FromJson {
  const nlohmann::json& j;
  template <class T>
  void operator()(const char* key, T& field, const char*) {
    if (j.contains(key)) field = j.at(key).get<T>();
  }
};

inline std::string flag_name(const char* key) {
  std::string s = "--";
  for (const char* c = key; *c; ++c) s += *c == '_' ? '-' : *c;
  return s;
}

struct Register {
  CLI::App& app;
  template <class T>
  void operator()(const char* key, T& field, const char* help) {
    if constexpr (std::is_same_v<T, bool>) {
      app.add_flag(flag_name(key), field, help);
    } else {
      app.add_option(flag_name(key), field, help);
    }
  }
};

template <class G>
nlohmann::json group_json(G g) {
  nlohmann::json j = nlohmann::json::object();
  g.visit(ToJson{j});
  return j;
}

template <class G>
void group_from(G& g, const nlohmann::json& j, const char* key) {
  if (j.contains(key)) g.visit(FromJson{j.at(key)});
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"command", c.command},
          {"seed", c.seed},
          {"out", c.out},
          {"data", c.data},
          {"synth", detail::group_json(c.synth)},
          {"model", detail::group_json(c.model)},
          {"train", detail::group_json(c.train)},
          {"causal", detail::group_json(c.causal)},
          {"eval", detail::group_json(c.eval)}};
}

inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("data")) c.data = j.at("data").get<std::string>();
  detail::group_from(c.synth, j, "synth");
  detail::group_from(c.model, j, "model");
  detail::group_from(c.train, j, "train");
  detail::group_from(c.causal, j, "causal");
  detail::group_from(c.eval, j, "eval");
}

// ---------------------------------------------------------------------------
// Config translation

inline SolverConfig solver_config(const ModelFlags& m) {
  SolverConfig s;
  s.method = parse_solver_method(m.solver);
  s.step_size = m.step;
  s.rtol = m.rtol;
  s.atol = m.atol;
  s.min_step = m.min_step;
  s.max_step = m.max_step;
  s.gradient_mode = parse_gradient_mode(m.gradient_mode);
  s.validate();
  return s;
}

inline ModelConfig model_config(const ModelFlags& m, std::size_t N, std::size_t C,
                                std::size_t K) {
  ModelConfig mc;
  mc.encoder.N = N;
  mc.encoder.C = C;
  mc.encoder.K = K;
  mc.encoder.H = m.H;
  mc.encoder.T = m.T;
  mc.encoder.M = m.M;
  mc.encoder.L = m.L;
  mc.encoder.flow_solver = solver_config(m);
  mc.encoder.poi_solver = mc.encoder.flow_solver;
  mc.encoder.rescale_weights = m.rescale;
  mc.S = m.S;
  mc.loss.delta = m.delta;
  mc.pooling = parse_pooling(m.pooling);
  mc.gradient_mode = mc.encoder.flow_solver.gradient_mode;
  mc.validate();
  return mc;
}

inline AdamConfig adam_config(const TrainFlags& t) {
  AdamConfig a;
  a.lr = t.lr;
  a.weight_decay = t.weight_decay;
  a.validate();
  return a;
}

inline PerturbationStrategy strategy_of(const CausalFlags& c, std::uint64_t seed) {
  return {parse_perturbation(c.strategy), c.random_scale, sub_seed(seed, "perturbation")};
}

inline SurrogateConfig surrogate_config(const RunConfig& rc) {
  SurrogateConfig s;
  s.epochs = rc.causal.surrogate_epochs;
  s.width = rc.causal.surrogate_width;
  s.batch = rc.causal.surrogate_batch;
  s.flow_dropout = rc.causal.surrogate_dropout;
  s.adam = adam_config(rc.train);
  s.seed = sub_seed(rc.seed, "surrogate");
  return s;
}

// ---------------------------------------------------------------------------
// Helpers

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

struct LoadedData {
  DatasetBundle raw;
  DatasetBundle norm;
};

inline LoadedData load_data(const RunConfig& rc) {
  if (rc.data.empty()) throw std::runtime_error("--data <manifest.json> is required");
  LoadedData d;
  d.raw = load_dataset(rc.data);
  d.norm = normalize(d.raw);
  for (const auto& w : d.norm.norm_stats.warnings) std::cerr << "warning: " << w << "\n";
  return d;
}

/// Model checkpoint: parameters plus the resolved configuration and the data
/// dimensions needed to rebuild the model.
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<C3deModel> model;
  std::optional<PretrainResult> surrogate;
};

inline fs::path surrogate_stem_next_to(const fs::path& model_stem) {
  return model_stem.parent_path() / "surrogate";
}

inline LoadedModel load_model(const fs::path& stem, const DatasetBundle& data,
                              std::uint64_t seed_override, bool has_seed) {
  const nlohmann::json hyper = read_checkpoint_descriptor(stem).at("hyperparameters");
  if (hyper.value("kind", std::string()) != "c3de") {
    throw std::runtime_error("checkpoint " + stem.string() + " is not a model checkpoint");
  }
  LoadedModel lm;
  apply_json(lm.config, hyper.at("config"));
  const auto dims = hyper.at("dims");
  const std::size_t N = dims.at("N"), C = dims.at("C"), K = dims.at("K");
  if (N != data.nodes() || C != data.channels() || K != data.num_categories()) {
    throw std::runtime_error("model was trained on N=" + std::to_string(N) + ", C=" +
                             std::to_string(C) + ", K=" + std::to_string(K) +
                             " but the dataset has N=" + std::to_string(data.nodes()) +
                             ", C=" + std::to_string(data.channels()) +
                             ", K=" + std::to_string(data.num_categories()));
  }
  if (has_seed) lm.config.seed = seed_override;
  const ModelConfig mc = model_config(lm.config.model, N, C, K);
  lm.model = std::make_unique<C3deModel>(mc, lm.config.seed);
  load_checkpoint(stem, lm.model->parameters());
  if (lm.config.causal.causal) {
    lm.surrogate = load_surrogate(surrogate_stem_next_to(stem), data.adjacency, mc.encoder);
    lm.model->set_estimator(std::make_shared<CausalEstimator>(
        lm.surrogate->surrogate, strategy_of(lm.config.causal, lm.config.seed)));
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_synth(const RunConfig& rc) {
  SynthConfig sc;
  sc.N = rc.synth.nodes;
  sc.C = rc.synth.channels;
  sc.K = rc.synth.categories;
  sc.days = rc.synth.days;
  sc.days_per_month = rc.synth.days_per_month;
  sc.planted_category = rc.synth.planted;
  sc.planted_strength = rc.synth.beta;
  sc.noise_std = rc.synth.noise;
  sc.ar_coefficient = rc.synth.ar;
  sc.weekly_amplitude = rc.synth.weekly;
  sc.poi_step_std = rc.synth.poi_step;
  sc.seed = rc.seed;
  const DatasetBundle b = synth_generate(sc);
  save_dataset(b, rc.out);
  std::cout << "wrote synthetic dataset (N=" << b.nodes() << ", C=" << b.channels()
            << ", K=" << b.num_categories() << ", days=" << b.days() << ", months=" << b.months()
            << ") to " << (fs::path(rc.out) / "manifest.json").string() << "\n";
  return 0;
}

inline PretrainResult run_pretrain(const RunConfig& rc, const LoadedData& d,
                                   const EncoderConfig& enc, const fs::path& out) {
  const SurrogateConfig sc = surrogate_config(rc);
  std::cout << "pretraining surrogate: epochs=" << sc.epochs << " width=" << sc.width
            << " batch=" << sc.batch << " lr=" << sc.adam.lr << "\n";
  PretrainResult res = pretrain_surrogate(d.norm, enc, sc, LossConfig{rc.model.delta});
  save_surrogate(out / "surrogate", res, enc);
  nlohmann::json log;
  log["epoch_loss"] = res.epoch_loss;
  log["val_huber"] = res.val_loss;
  log["val_huber_zero_predictor"] = res.val_zero_loss;
  write_json(out / "pretrain_log.json", log);
  std::cout << "surrogate val Huber " << res.val_loss << " (zero predictor " << res.val_zero_loss
            << ")\n";
  return res;
}

inline int cmd_pretrain(const RunConfig& rc) {
  const LoadedData d = load_data(rc);
  const ModelConfig mc =
      model_config(rc.model, d.raw.nodes(), d.raw.channels(), d.raw.num_categories());
  run_pretrain(rc, d, mc.encoder, rc.out);
  return 0;
}

inline int cmd_train(const RunConfig& rc) {
  const LoadedData d = load_data(rc);
  const ModelConfig mc =
      model_config(rc.model, d.raw.nodes(), d.raw.channels(), d.raw.num_categories());
  const fs::path out = rc.out;
  std::cout << "train: lr=" << rc.train.lr << " weight_decay=" << rc.train.weight_decay
            << " batch=" << rc.train.batch << " H=" << rc.model.H << " T=" << rc.model.T
            << " M=" << rc.model.M << " S=" << rc.model.S << " L=" << rc.model.L
            << " solver=" << rc.model.solver << " step=" << rc.model.step
            << " gradient_mode=" << rc.model.gradient_mode
            << " causal=" << (rc.causal.causal ? rc.causal.strategy : std::string("off"))
            << " seed=" << rc.seed << "\n";

  C3deModel model(mc, rc.seed);
  if (rc.causal.causal) {
    PretrainResult pre = rc.causal.surrogate.empty()
                             ? run_pretrain(rc, d, mc.encoder, out)
                             : load_surrogate(rc.causal.surrogate, d.norm.adjacency, mc.encoder);
    if (!rc.causal.surrogate.empty()) save_surrogate(out / "surrogate", pre, mc.encoder);
    if (rc.causal.init_from_surrogate) copy_encoder(pre.encoder, model.encoder());
    model.set_estimator(
        std::make_shared<CausalEstimator>(pre.surrogate, strategy_of(rc.causal, rc.seed)));
  }

  std::ofstream log_csv(out / "train_log.csv");
  log_csv << "epoch,train_loss,val_mae\n";
  TrainConfig tc;
  tc.max_epochs = rc.train.epochs;
  tc.patience = rc.train.patience;
  tc.batch = rc.train.batch;
  tc.adam = adam_config(rc.train);
  tc.seed = rc.seed;
  tc.on_epoch = [&](const EpochLog& e) {
    log_csv << e.epoch << ',' << data_detail::format_double(e.train_loss) << ','
            << data_detail::format_double(e.val_mae) << '\n';
    log_csv.flush();
    std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_mae " << e.val_mae
              << "\n";
  };
  const TrainResult tr = train_model(model, d.raw, d.norm, tc);
  nlohmann::json hyper;
  hyper["kind"] = "c3de";
  hyper["config"] = to_json(rc);
  hyper["dims"] = {{"N", d.raw.nodes()}, {"C", d.raw.channels()}, {"K", d.raw.num_categories()}};
  save_checkpoint(out / "model", model.const_parameters(), hyper);
  nlohmann::json summary;
  summary["best_epoch"] = tr.best_epoch;
  summary["best_val_mae"] = tr.best_val_mae;
  summary["epochs_run"] = tr.epochs.size();
  summary["early_stopped"] = tr.early_stopped;
  write_json(out / "train_summary.json", summary);
  std::cout << "best epoch " << tr.best_epoch << " val MAE " << tr.best_val_mae << "; wrote "
            << (out / "model.json").string() << "\n";
  return 0;
}

inline HorizonMode horizon_mode_of(const std::string& s) {
  if (s == "step") return HorizonMode::kStep;
  if (s == "cumulative") return HorizonMode::kCumulative;
  throw std::invalid_argument("unknown horizon mode '" + s + "'");
}

inline int cmd_evaluate(const RunConfig& rc, bool has_seed) {
  if (rc.eval.model.empty()) throw std::runtime_error("--model <checkpoint stem> is required");
  const LoadedData d = load_data(rc);
  LoadedModel lm = load_model(rc.eval.model, d.raw, rc.seed, has_seed);
  const Split split = parse_split(rc.eval.split);
  const HorizonMode mode = horizon_mode_of(rc.eval.horizon_mode);
  const std::string name = lm.config.causal.causal ? "c3de-" + lm.config.causal.strategy
                                                   : std::string("dual-cde");
  EvalResult er = evaluate_model(*lm.model, d.raw, d.norm, split, lm.config.train.batch, name, mode);
  const fs::path out = rc.out;
  nlohmann::json rep = er.report.to_json();
  rep["split"] = rc.eval.split;
  write_json(out / "report.json", rep);
  std::cout << er.report.table();

  std::ofstream series(out / "forecast_series.csv");
  series << "anchor_day,step,day,node,channel,actual,forecast\n";
  const std::size_t N = d.raw.nodes(), C = d.raw.channels();
  for (std::size_t i = 0; i < er.forecasts.size(); ++i) {
    for (std::size_t s = 0; s < er.forecasts[i].dim(0); ++s) {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          series << er.anchors[i] << ',' << s + 1 << ',' << er.anchors[i] + 1 + s << ','
                 << d.raw.node_ids[n] << ',' << c << ','
                 << data_detail::format_double(er.actual[i].at(s, n, c)) << ','
                 << data_detail::format_double(er.forecasts[i].at(s, n, c)) << '\n';
        }
      }
    }
  }
  if (rc.eval.with_ha) {
    const auto windows = make_windows(d.raw, {lm.config.model.T, lm.config.model.M,
                                              lm.config.model.S}, split);
    const auto ha = ha_baseline(d.raw, split, windows);
    std::vector<Tensor> actual;
    for (const auto& w : windows) actual.push_back(w.target);
    const MetricReport hr = horizon_report(actual, ha, "ha", d.raw.name, mode);
    write_json(out / "ha_report.json", hr.to_json());
    std::cout << hr.table();
  }
  return 0;
}

inline int cmd_predict(const RunConfig& rc, bool has_seed) {
  if (rc.eval.model.empty()) throw std::runtime_error("--model <checkpoint stem> is required");
  const LoadedData d = load_data(rc);
  LoadedModel lm = load_model(rc.eval.model, d.raw, rc.seed, has_seed);
  const auto& mc = lm.model->config();
  const std::size_t T = mc.encoder.T, M = mc.encoder.M, S = mc.S;
  const std::size_t last = d.norm.days() - 1;
  const std::size_t month = d.norm.day_to_month[last];
  if (d.norm.days() < T || month + 1 < M) {
    throw std::runtime_error("predict: dataset too short for T=" + std::to_string(T) +
                             ", M=" + std::to_string(M));
  }
  const Tensor flow = data_detail::slab(d.norm.flow, last + 1 - T, T);
  const Tensor poi = data_detail::slab(d.norm.poi, month + 1 - M, M);
  if (lm.model->estimator()) lm.model->estimator()->reseed();
  const ForwardResult fr = lm.model->predict(make_batch({&flow}, {&poi}));
  const Tensor f = denormalize(unstack_forecast(fr.forecast, mc.encoder.N, S, mc.encoder.C)[0],
                               d.norm.norm_stats);
  std::ofstream out(fs::path(rc.out) / "forecast.csv");
  out << "day,node,channel,forecast\n";
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t n = 0; n < mc.encoder.N; ++n) {
      for (std::size_t c = 0; c < mc.encoder.C; ++c) {
        out << last + 1 + s << ',' << d.raw.node_ids[n] << ',' << c << ','
            << data_detail::format_double(f.at(s, n, c)) << '\n';
      }
    }
  }
  std::cout << "wrote " << S << "-day forecast from day " << last + 1 << " to "
            << (fs::path(rc.out) / "forecast.csv").string() << "\n";
  return 0;
}

inline int cmd_causal_report(const RunConfig& rc, bool has_seed) {
  const LoadedData d = load_data(rc);
  EncoderParams encoder;
  EncoderConfig enc;
  std::shared_ptr<SurrogatePredictor> surrogate;
  std::unique_ptr<C3deModel> keep;
  if (!rc.eval.model.empty()) {
    LoadedModel lm = load_model(rc.eval.model, d.raw, rc.seed, has_seed);
    if (!lm.surrogate) throw std::runtime_error("model was trained without the causal estimator");
    enc = lm.model->config().encoder;
    encoder = lm.model->encoder();
    surrogate = lm.surrogate->surrogate;
  } else if (!rc.causal.surrogate.empty()) {
    enc = model_config(rc.model, d.raw.nodes(), d.raw.channels(), d.raw.num_categories()).encoder;
    PretrainResult pre = load_surrogate(rc.causal.surrogate, d.norm.adjacency, enc);
    encoder = pre.encoder;
    surrogate = pre.surrogate;
  } else {
    throw std::runtime_error("causal-report needs --model or --surrogate");
  }
  CausalEstimator est(surrogate, strategy_of(rc.causal, rc.seed));
  const Split split = parse_split(rc.eval.split);
  const auto windows = make_windows(d.norm, {enc.T, enc.M, 1}, split);
  const AggregatedCausalReport rep = causal_report(encoder, enc, est, windows, rc.train.batch);

  const fs::path out = rc.out;
  std::ofstream csv(out / "causal_report.csv");
  csv << "obs_point,node,category,effect,weight\n";
  for (std::size_t i = 0; i < rep.L; ++i) {
    for (std::size_t n = 0; n < rep.N; ++n) {
      for (std::size_t k = 0; k < rep.K; ++k) {
        const std::size_t idx = (i * rep.N + n) * rep.K + k;
        csv << i + 1 << ',' << d.raw.node_ids[n] << ',' << d.raw.categories[k] << ','
            << data_detail::format_double(rep.effect[idx]) << ','
            << data_detail::format_double(rep.weight[idx]) << '\n';
      }
    }
  }
  nlohmann::json summary;
  summary["strategy"] = to_string(rep.strategy);
  summary["split"] = rc.eval.split;
  summary["windows"] = rep.windows;
  nlohmann::json cats = nlohmann::json::object();
  for (std::size_t k = 0; k < rep.K; ++k) {
    double all = 0.0, last = 0.0;
    for (std::size_t i = 0; i < rep.L; ++i) {
      for (std::size_t n = 0; n < rep.N; ++n) {
        all += rep.weight_at(i, n, k);
        if (i + 1 == rep.L) last += rep.weight_at(i, n, k);
      }
    }
    cats[d.raw.categories[k]] = {
        {"mean_weight", all / static_cast<double>(rep.L * rep.N)},
        {"mean_weight_final_point", last / static_cast<double>(rep.N)},
        {"top_rank_fraction_final_point", rep.top_rank_fraction(rep.L - 1, k)}};
  }
  summary["categories"] = cats;
  write_json(out / "causal_summary.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

namespace detail {

inline std::optional<std::string> find_config_arg(int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return std::nullopt;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
  RunConfig rc;
  try {
    if (auto cfg = detail::find_config_arg(argc, argv)) {
      std::ifstream in(*cfg);
      if (!in) throw std::runtime_error("cannot open config " + *cfg);
      apply_json(rc, nlohmann::json::parse(in));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"continuous-time crowd-flow forecasting with causal POI correction", "c3de"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--seed", rc.seed, "global seed");
    sub->add_option("--out", rc.out, "output directory")->required();
    sub->add_option("--config", config_path, "resolved config JSON to start from");
    if (needs_data) sub->add_option("--data", rc.data, "dataset manifest.json");
  };
  auto* synth = app.add_subcommand("synth", "generate a planted-causality dataset");
  add_common(synth, false);
  rc.synth.visit(detail::Register{*synth});

  auto* pretrain = app.add_subcommand("pretrain-surrogate", "pretrain and freeze the surrogate");
  add_common(pretrain, true);
  rc.model.visit(detail::Register{*pretrain});
  rc.train.visit(detail::Register{*pretrain});
  pretrain->add_option("--surrogate-epochs", rc.causal.surrogate_epochs, "pretraining epochs");
  pretrain->add_option("--surrogate-width", rc.causal.surrogate_width, "surrogate width");
  pretrain->add_option("--surrogate-batch", rc.causal.surrogate_batch, "pretraining batch size");
  pretrain->add_option("--surrogate-dropout", rc.causal.surrogate_dropout, "flow-feature dropout");

  auto* train = app.add_subcommand("train", "train the forecasting model");
  add_common(train, true);
  rc.model.visit(detail::Register{*train});
  rc.train.visit(detail::Register{*train});
  rc.causal.visit(detail::Register{*train});

  auto* evaluate = app.add_subcommand("evaluate", "score a trained model");
  add_common(evaluate, true);
  rc.eval.visit(detail::Register{*evaluate});

  auto* predict = app.add_subcommand("predict", "forecast past the end of the dataset");
  add_common(predict, true);
  predict->add_option("--model", rc.eval.model, "model checkpoint stem");

  auto* report = app.add_subcommand("causal-report", "per-category causal effects and weights");
  add_common(report, true);
  rc.model.visit(detail::Register{*report});
  report->add_option("--model", rc.eval.model, "model checkpoint stem");
  report->add_option("--split", rc.eval.split, "train | val | test");
  report->add_option("--strategy", rc.causal.strategy, "zero | random | mean");
  report->add_option("--random-scale", rc.causal.random_scale, "random strategy noise scale");
  report->add_option("--surrogate", rc.causal.surrogate, "surrogate checkpoint stem");
  report->add_option("--batch", rc.train.batch, "windows per encoder pass");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  CLI::App* sub = app.get_subcommands().front();
  rc.command = sub->get_name();
  const bool has_seed = sub->count("--seed") > 0;
  try {
    fs::create_directories(rc.out);
    write_json(fs::path(rc.out) / "config_resolved.json", to_json(rc));
    if (rc.command == "synth") return cmd_synth(rc);
    if (rc.command == "pretrain-surrogate") return cmd_pretrain(rc);
    if (rc.command == "train") return cmd_train(rc);
    if (rc.command == "evaluate") return cmd_evaluate(rc, has_seed);
    if (rc.command == "predict") return cmd_predict(rc, has_seed);
    if (rc.command == "causal-report") return cmd_causal_report(rc, has_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace c3de::cli

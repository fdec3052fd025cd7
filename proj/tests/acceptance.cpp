// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, each with its measured
// values, threshold and wall-clock budget. Exit status is nonzero when any
// criterion fails, unless that criterion was listed with
// --known-unattainable (its line still reads FAIL).

#include "CLI11.hpp"
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "c3de/eval.hpp"
#include "support/checks.hpp"
#include "support/cli_runner.hpp"
#include "support/experiments.hpp"
#include "support/oracles.hpp"
#include "support/tiny.hpp"

using namespace c3de;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0.0;  // runtime charged to the criterion
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

// Shared state for the synthetic experiments (criteria 5 to 7), so the
// surrogates and the w/o-CA baselines are trained once. Reused work is
// still charged to every criterion that depends on it.
struct SyntheticRuns {
  experiments::Setup setup;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<std::uint64_t, experiments::SyntheticData> data;
  std::map<std::uint64_t, PretrainResult> pre;
  double pretrain_s = 0.0;
  std::map<std::string, std::vector<double>> mae;  // variant -> per-seed MAE
  std::map<std::string, double> train_s;           // variant -> total seconds

  void ensure_pretrained() {
    if (!pre.empty()) return;
    const auto t0 = Clock::now();
    for (auto s : seeds) {
      data.emplace(s, experiments::synthetic(s));
      pre.emplace(s, experiments::pretrain(data.at(s), setup, s));
    }
    pretrain_s = seconds_since(t0);
  }

  const std::vector<double>& variant(const std::string& name) {
    if (mae.count(name)) return mae.at(name);
    ensure_pretrained();
    const auto t0 = Clock::now();
    std::vector<double> out;
    for (auto s : seeds) {
      const auto& d = data.at(s);
      if (name == "w/o-CA") {
        out.push_back(experiments::test_mae(d, setup, s, nullptr));
      } else {
        out.push_back(experiments::test_mae(d, setup, s, &pre.at(s), parse_perturbation(name)));
      }
    }
    train_s[name] = seconds_since(t0);
    return mae[name] = out;
  }
};

std::string list(const std::vector<double>& v, const char* f = "%.4f") {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s + "]";
}

Outcome gradient_integrity() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  for (auto pooling : {PoolingMode::kMean, PoolingMode::kCausal}) {
    const auto cmp =
        tiny::end_to_end_fd(tiny::config(GradientMode::kBackprop, pooling), true, 11);
    checked += cmp.checked;
    if (cmp.max_rel >= worst) {
      worst = cmp.max_rel;
      where = cmp.worst;
    }
  }
  o.seconds = seconds_since(t0);
  o.pass = worst < 1e-4;
  o.detail = "max rel err " + fmt("%.2e", worst) + " < 1e-4 over " + std::to_string(checked) +
             " parameter entries (worst: " + where + ")";
  return o;
}

Outcome solver_orders() {
  Outcome o;
  const auto t0 = Clock::now();
  const double euler = checks::empirical_order(SolverMethod::kEuler, 1.0 / 256);
  const double rk4 = checks::empirical_order(SolverMethod::kRk4, 1.0 / 16);
  const auto tight = checks::adaptive_growth(1e-6);
  const auto loose = checks::adaptive_growth(1e-3);
  o.seconds = seconds_since(t0);
  const bool orders = euler >= 0.9 && euler <= 1.1 && rk4 >= 3.8 && rk4 <= 4.2;
  const bool adaptive = tight.error <= 1e-5 && tight.nfe > loose.nfe;
  o.pass = orders && adaptive;
  o.detail = "Euler order " + fmt("%.3f", euler) + " in [0.9,1.1], RK4 order " +
             fmt("%.3f", rk4) + " in [3.8,4.2]; adaptive rtol=1e-6 |h(1)-e|=" +
             fmt("%.2e", tight.error) + " <= 1e-5 (rel " + fmt("%.2e", tight.error / std::exp(1.0)) +
             "), nfe " + std::to_string(tight.nfe) + " > " + std::to_string(loose.nfe) +
             " at rtol=1e-3";
  return o;
}

Outcome adjoint_equivalence() {
  Outcome o;
  const auto t0 = Clock::now();
  double global = 0.0, per_tensor = 0.0;
  std::string where;
  for (std::uint64_t seed = 21; seed < 24; ++seed) {
    const auto mc_b = tiny::config(GradientMode::kBackprop, PoolingMode::kCausal);
    const auto mc_a = tiny::config(GradientMode::kAdjoint, PoolingMode::kCausal);
    const auto d = tiny::data(mc_b, seed);
    const auto est = std::make_shared<CausalEstimator>(
        tiny::random_surrogate(mc_b, seed + 1), PerturbationStrategy{PerturbationKind::kZero});
    C3deModel b(mc_b, seed + 2), a(mc_a, seed + 2);
    b.set_estimator(est);
    a.set_estimator(est);
    b.forward_loss(d.batch());
    a.forward_loss(d.batch());
    std::vector<std::string> names;
    for (const Parameter* p : b.parameters()) names.push_back(p->name);
    const auto cmp = oracle::compare_tensors(names, tiny::grads_of(a.parameters()),
                                             tiny::grads_of(b.parameters()));
    global = std::max(global, cmp.global_rel);
    if (cmp.max_rel > per_tensor) {
      per_tensor = cmp.max_rel;
      where = cmp.worst;
    }
  }
  o.seconds = seconds_since(t0);
  o.pass = global < 1e-3;
  o.detail = "||g_adj - g_bp|| / ||g_bp|| = " + fmt("%.2e", global) +
             " < 1e-3 (max over 3 seeds; largest single-tensor value " + fmt("%.2e", per_tensor) +
             " on " + where + ")";
  return o;
}

Outcome spline_correctness() {
  Outcome o;
  const auto t0 = Clock::now();
  checks::SplineMetrics worst;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = checks::spline_metrics(seed);
    worst.knot_rel = std::max(worst.knot_rel, m.knot_rel);
    worst.boundary_abs = std::max(worst.boundary_abs, m.boundary_abs);
    worst.c2_gap = std::max(worst.c2_gap, m.c2_gap);
    worst.cubic_abs = std::max(worst.cubic_abs, m.cubic_abs);
  }
  o.seconds = seconds_since(t0);
  const bool structural =
      worst.knot_rel <= 1e-12 && worst.boundary_abs <= 1e-9 && worst.c2_gap <= 1e-9;
  o.pass = structural && worst.cubic_abs <= 1e-9;
  o.detail = "knot rel " + fmt("%.1e", worst.knot_rel) + " <= 1e-12, boundary |s''| " +
             fmt("%.1e", worst.boundary_abs) + " <= 1e-9, C2 gap " + fmt("%.1e", worst.c2_gap) +
             " <= 1e-9, cubic reproduction max |s-p| " + fmt("%.3e", worst.cubic_abs) +
             " <= 1e-9" +
             (worst.cubic_abs > 1e-9
                  ? " [a natural spline has s''=0 at both ends, so it cannot equal a cubic "
                    "whose second derivative is nonzero there]"
                  : "");
  return o;
}

Outcome causal_recovery(SyntheticRuns& runs) {
  Outcome o;
  runs.ensure_pretrained();
  const auto t0 = Clock::now();
  std::vector<double> frac;
  std::string planted;
  for (auto s : runs.seeds) {
    auto& d = runs.data.at(s);
    frac.push_back(
        experiments::causal_recovery(d, runs.setup, runs.pre.at(s), PerturbationKind::kZero, s));
    planted += (planted.empty() ? "" : " ") + std::to_string(d.planted);
  }
  o.seconds = runs.pretrain_s + seconds_since(t0);
  const double med = experiments::median(frac);
  o.pass = med >= 0.9;
  o.detail = "planted category ranked first for " + list(frac, "%.2f") +
             " of nodes (k* = [" + planted + "]), median " + fmt("%.2f", med) + " >= 0.90";
  return o;
}

Outcome ablation_direction(SyntheticRuns& runs) {
  Outcome o;
  const auto& base = runs.variant("w/o-CA");
  const auto& full = runs.variant("zero");
  o.seconds = runs.pretrain_s + runs.train_s.at("w/o-CA") + runs.train_s.at("zero");
  const double mb = experiments::median(base), mf = experiments::median(full);
  o.pass = mf <= 0.95 * mb;
  o.detail = "median test MAE full " + fmt("%.4f", mf) + " " + list(full) + " vs w/o-CA " +
             fmt("%.4f", mb) + " " + list(base) + "; reduction " +
             fmt("%.2f", 100.0 * (1.0 - mf / mb)) + "% >= 5%";
  return o;
}

Outcome strategy_sanity(SyntheticRuns& runs) {
  Outcome o;
  const double mb = experiments::median(runs.variant("w/o-CA"));
  o.seconds = runs.pretrain_s + runs.train_s.at("w/o-CA");
  o.pass = true;
  o.detail = "median test MAE w/o-CA " + fmt("%.4f", mb);
  for (const char* s : {"zero", "random", "mean"}) {
    const double m = experiments::median(runs.variant(s));
    o.seconds += runs.train_s.at(s);
    o.pass = o.pass && m <= mb;
    o.detail += std::string("; ") + s + " " + fmt("%.4f", m) + (m <= mb ? " <=" : " >") + " w/o-CA";
  }
  return o;
}

Outcome loss_metric_units() {
  Outcome o;
  const auto t0 = Clock::now();
  const LossConfig unit{1.0};
  const double h0 = huber_value(Tensor::vector({0.0}), Tensor::vector({0.0}), unit);
  const double h1 = huber_value(Tensor::vector({0.0}), Tensor::vector({0.5}), unit);
  const double h2 = huber_value(Tensor::vector({0.0}), Tensor::vector({2.0}), unit);
  Tape tape;
  const double taped =
      huber(tape.constant(Tensor::vector({0.0, 0.5, 2.0})), Tensor::vector({0.0, 0.0, 0.0}), unit)
          .value()
          .item();
  const bool hand = std::abs(h0) <= 1e-12 && std::abs(h1 - 0.125) <= 1e-12 &&
                    std::abs(h2 - 1.5) <= 1e-12 && std::abs(taped - (1.625 / 3.0)) <= 1e-12;

  Rng rng(8);
  std::size_t jensen_violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const Tensor a = oracle::random_tensor({3, 4, 2}, rng, -10.0, 10.0);
    const Tensor f = oracle::random_tensor({3, 4, 2}, rng, -10.0, 10.0);
    const Metrics m = metrics(a, f);
    if (m.mae > m.rmse) ++jensen_violations;
  }

  const auto cube = [](std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n, 1, 1}, std::move(v));
  };
  const Metrics partial = metrics(cube({0.0, 4.0}), cube({1.0, 2.0}));
  const Metrics none = metrics(cube({0.0, -2e-4}), cube({1.0, 2.0}));
  const Metrics hand_case = metrics(cube({2.0, 4.0}), cube({3.0, 2.0}));
  const bool mape = partial.mape && std::abs(*partial.mape - 50.0) <= 1e-12 &&
                    partial.mape_masked == 1 && !none.mape && none.mape_masked == 2 &&
                    hand_case.mape && std::abs(*hand_case.mape - 50.0) <= 1e-12;
  o.seconds = seconds_since(t0);
  o.pass = hand && jensen_violations == 0 && mape;
  o.detail = "Huber(0, 0.5, 2) = (" + fmt("%.15g", h0) + ", " + fmt("%.15g", h1) + ", " +
             fmt("%.15g", h2) + ") within 1e-12; MAE > RMSE in " +
             std::to_string(jensen_violations) + "/1000 random tensors; MAPE on [0,4] uses 1 of 2 "
             "elements (" + (partial.mape ? fmt("%.1f", *partial.mape) : std::string("?")) +
             "%), all-masked input reports undefined";
  return o;
}

Outcome determinism() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "c3de_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path log = root / "log.txt";
  using cli_runner::quote;
  const std::string data = quote((root / "data" / "manifest.json").string());
  bool ok = cli_runner::run("synth --seed 4 --out " + quote((root / "data").string()) + " " +
                                cli_runner::kSmallSynth,
                            log) == 0;
  for (const char* r : {"run1", "run2"}) {
    const fs::path out = root / r;
    ok = ok && cli_runner::run("train --seed 9 --data " + data + " --out " +
                                   quote(out.string()) + " " + cli_runner::kSmallModel,
                               log) == 0;
    ok = ok && cli_runner::run("evaluate --data " + data + " --model " +
                                   quote((out / "model").string()) + " --out " +
                                   quote((out / "eval").string()),
                               log) == 0;
  }
  const std::string a = cli_runner::slurp(root / "run1" / "eval" / "report.json");
  const std::string b = cli_runner::slurp(root / "run2" / "eval" / "report.json");
  o.seconds = seconds_since(t0);
  o.pass = ok && !a.empty() && a == b;
  o.detail = std::string(ok ? "" : "a CLI command failed (see " + log.string() + "); ") +
             "report.json " + std::to_string(a.size()) + " bytes, " +
             (a == b && !a.empty() ? "byte-identical" : "differs") + " across two train+evaluate runs";
  return o;
}

Outcome ha_baseline_check() {
  Outcome o;
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.N = 6;
  sc.K = 3;
  sc.C = 2;
  sc.days = 364;
  sc.planted_strength = 0.0;
  sc.noise_std = 0.0;
  sc.ar_coefficient = 0.0;
  sc.weekly_amplitude = 0.3;
  sc.seed = 5;
  const DatasetBundle b = synth_generate(sc);
  const auto windows = make_windows(b, {14, 4, 14}, Split::kTest);
  const auto fc = ha_baseline(b, Split::kTest, windows);
  std::vector<Tensor> actual;
  for (const auto& w : windows) actual.push_back(w.target);
  const MetricReport rep = horizon_report(actual, fc, "ha", "weekly");
  o.seconds = seconds_since(t0);
  double worst = 0.0;
  bool identical = true;
  for (const auto& r : rep.rows) {
    worst = std::max({worst, r.metrics.mae, r.metrics.rmse});
    const auto& m0 = rep.rows.front().metrics;
    identical = identical && r.metrics.mae == m0.mae && r.metrics.rmse == m0.rmse &&
                r.metrics.mape == m0.mape;
  }
  o.pass = worst == 0.0 && identical;
  o.detail = "max MAE/RMSE over " + std::to_string(rep.rows.size()) + " rows = " +
             fmt("%.3g", worst) + " (must be 0); Horizon-7, Horizon-14 and Average rows " +
             (identical ? "identical" : "differ") + " over " + std::to_string(rep.samples) +
             " test windows";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::set<int> only, unattainable;
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--known-unattainable", unattainable,
                 "criteria whose failure does not set the exit status");
  CLI11_PARSE(app, argc, argv);

  SyntheticRuns runs;
  const std::vector<Criterion> criteria = {
      {1, "gradient integrity", 60, gradient_integrity},
      {2, "solver orders", 5, solver_orders},
      {3, "adjoint equivalence", 60, adjoint_equivalence},
      {4, "spline correctness", 5, spline_correctness},
      {5, "causal recovery", 600, [&] { return causal_recovery(runs); }},
      {6, "ablation direction", 1800, [&] { return ablation_direction(runs); }},
      {7, "strategy sanity", 2700, [&] { return strategy_sanity(runs); }},
      {8, "loss/metric units", 60, loss_metric_units},
      {9, "determinism", 600, determinism},
      {10, "HA baseline", 60, ha_baseline_check},
  };

  int unexpected = 0, failed = 0, run = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++run;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    const bool in_time = o.seconds < c.budget_s;
    const bool pass = o.pass && in_time;
    std::printf("%s  %2d  %-20s %s; runtime %.1f s < %.0f s%s\n", pass ? "PASS" : "FAIL", c.id,
                c.name, o.detail.c_str(), o.seconds, c.budget_s, in_time ? "" : " (over budget)");
    std::fflush(stdout);
    if (!pass) {
      ++failed;
      if (!unattainable.count(c.id)) ++unexpected;
    }
  }
  std::printf("%d/%d criteria passed", run - failed, run);
  if (failed != unexpected) std::printf("; %d failure(s) listed as unattainable", failed - unexpected);
  std::printf("\n");
  return unexpected == 0 ? 0 : 1;
}

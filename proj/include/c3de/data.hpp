// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3de/rng.hpp"
#include "c3de/tensor.hpp"

namespace c3de {

enum class Split { kTrain, kVal, kTest };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

/// Day-index boundaries: train [0, train_end), val [train_end, val_end),
/// test [val_end, days).
struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
};

/// Per node-channel z-score statistics (N x C for flow, N x K for POI).
struct NormStats {
  Tensor flow_mean, flow_std;
  Tensor poi_mean, poi_std;
  std::vector<std::string> warnings;  // floored channels
  bool empty() const { return flow_mean.size() == 0; }
};

struct DatasetBundle {
  std::string name = "dataset";
  Tensor flow;       // days x N x C
  Tensor poi;        // months x N x K
  Tensor adjacency;  // N x N
  std::vector<std::string> node_ids;
  std::vector<std::string> categories;
  std::vector<std::size_t> day_to_month;
  SplitBounds splits;
  NormStats norm_stats;
  bool normalized = false;

  std::size_t days() const { return flow.dim(0); }
  std::size_t months() const { return poi.dim(0); }
  std::size_t nodes() const { return flow.dim(1); }
  std::size_t channels() const { return flow.dim(2); }
  std::size_t num_categories() const { return poi.dim(2); }

  std::pair<std::size_t, std::size_t> split_range(Split s) const {
    switch (s) {
      case Split::kTrain: return {0, splits.train_end};
      case Split::kVal: return {splits.train_end, splits.val_end};
      case Split::kTest: return {splits.val_end, days()};
    }
    return {0, 0};
  }

  /// Checks the structural invariants; throws with a description on failure.
  void validate() const {
    if (flow.rank() != 3 || poi.rank() != 3) {
      throw std::invalid_argument("dataset: flow must be days x N x C and poi months x N x K");
    }
    const std::size_t N = nodes();
    if (poi.dim(1) != N) {
      throw std::invalid_argument("dataset: flow has " + std::to_string(N) +
                                  " nodes but poi has " + std::to_string(poi.dim(1)));
    }
    if (adjacency.shape() != Shape{N, N}) {
      throw std::invalid_argument("dataset: adjacency shape " + shape_str(adjacency.shape()) +
                                  " does not match N=" + std::to_string(N));
    }
    for (std::size_t i = 0; i < N; ++i) {
      double s = 1.0;  // self-loop
      for (std::size_t j = 0; j < N; ++j) {
        if (adjacency.at(i, j) < 0) throw std::invalid_argument("dataset: negative edge weight");
        s += adjacency.at(i, j);
      }
      if (!(s > 0)) throw std::invalid_argument("dataset: adjacency row sum not positive");
    }
    if (node_ids.size() != N) throw std::invalid_argument("dataset: node id count mismatch");
    if (categories.size() != num_categories()) {
      throw std::invalid_argument("dataset: category name count mismatch");
    }
    if (day_to_month.size() != days()) {
      throw std::invalid_argument("dataset: day_to_month must cover every day");
    }
    for (std::size_t d = 0; d < days(); ++d) {
      if (d > 0 && day_to_month[d] < day_to_month[d - 1]) {
        throw std::invalid_argument("dataset: day_to_month decreases at day " + std::to_string(d));
      }
      if (day_to_month[d] >= months()) {
        throw std::invalid_argument("dataset: day " + std::to_string(d) + " maps to month " +
                                    std::to_string(day_to_month[d]) + " beyond the POI series");
      }
    }
    if (!(splits.train_end > 0 && splits.train_end < splits.val_end &&
          splits.val_end < days())) {
      throw std::invalid_argument("dataset: splits must satisfy 0 < train_end < val_end < days");
    }
  }
};

// ---------------------------------------------------------------------------
// Normalisation

namespace data_detail {

inline constexpr double kStdFloor = 1e-6;

// Mean/std along axis 0 of a (steps x N x F) tensor restricted to [begin, end).
inline void column_stats(const Tensor& x, std::size_t begin, std::size_t end, Tensor& mean,
                         Tensor& stddev, const char* what, std::vector<std::string>& warnings) {
  const std::size_t N = x.dim(1), F = x.dim(2);
  mean = Tensor(Shape{N, F}, 0.0);
  stddev = Tensor(Shape{N, F}, 0.0);
  const double cnt = static_cast<double>(end - begin);
  for (std::size_t t = begin; t < end; ++t) {
    for (std::size_t i = 0; i < N * F; ++i) mean[i] += x[t * N * F + i];
  }
  for (double& m : mean.values()) m /= cnt;
  for (std::size_t t = begin; t < end; ++t) {
    for (std::size_t i = 0; i < N * F; ++i) {
      const double d = x[t * N * F + i] - mean[i];
      stddev[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < N * F; ++i) {
    stddev[i] = std::sqrt(stddev[i] / cnt);
    if (stddev[i] < kStdFloor) {
      warnings.push_back(std::string(what) + " node " + std::to_string(i / F) + " channel " +
                         std::to_string(i % F) + ": zero variance on train split, std floored");
      stddev[i] = kStdFloor;
    }
  }
}

inline Tensor apply_zscore(const Tensor& x, const Tensor& mean, const Tensor& stddev) {
  Tensor out = x;
  const std::size_t NF = mean.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (x[i] - mean[i % NF]) / stddev[i % NF];
  }
  return out;
}

}  // namespace data_detail

/// Statistics from the train split only: flow over train days, POI over the
/// months those days map to.
inline NormStats compute_norm_stats(const DatasetBundle& bundle) {
  if (bundle.splits.train_end == 0) throw std::invalid_argument("normalize: empty train split");
  NormStats st;
  data_detail::column_stats(bundle.flow, 0, bundle.splits.train_end, st.flow_mean, st.flow_std,
                            "flow", st.warnings);
  const std::size_t last_month = bundle.day_to_month[bundle.splits.train_end - 1];
  data_detail::column_stats(bundle.poi, 0, last_month + 1, st.poi_mean, st.poi_std, "poi",
                            st.warnings);
  return st;
}

inline DatasetBundle normalize(const DatasetBundle& bundle) {
  if (bundle.normalized) throw std::logic_error("normalize: bundle is already normalised");
  DatasetBundle out = bundle;
  out.norm_stats = compute_norm_stats(bundle);
  out.flow = data_detail::apply_zscore(bundle.flow, out.norm_stats.flow_mean,
                                       out.norm_stats.flow_std);
  out.poi = data_detail::apply_zscore(bundle.poi, out.norm_stats.poi_mean,
                                      out.norm_stats.poi_std);
  out.normalized = true;
  return out;
}

/// Maps a normalised flow tensor (... x N x C) back to original units.
inline Tensor denormalize(const Tensor& forecast, const NormStats& stats) {
  const std::size_t NC = stats.flow_mean.size();
  if (forecast.size() % NC != 0) {
    throw std::invalid_argument("denormalize: tensor " + shape_str(forecast.shape()) +
                                " is not a stack of N x C slices");
  }
  Tensor out = forecast;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = forecast[i] * stats.flow_std[i % NC] + stats.flow_mean[i % NC];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windowing

struct WindowSample {
  Tensor flow_window;  // T x N x C
  Tensor poi_window;   // M x N x K
  Tensor target;       // S x N x C
  std::size_t anchor_day = 0;
};

struct WindowSpec {
  std::size_t T = 14;
  std::size_t M = 4;
  std::size_t S = 14;
};

namespace data_detail {

inline Tensor slab(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t stride = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = count;
  return Tensor(s, std::vector<double>(x.storage().begin() + begin * stride,
                                       x.storage().begin() + (begin + count) * stride));
}

}  // namespace data_detail

/// Stride-1 windows lying entirely inside the split. A window anchored at day
/// a (its last input day) pairs flow days a-T+1..a with months
/// m(a)-M+1..m(a) and targets days a+1..a+S. Anchors whose month has fewer
/// than M months of history are skipped.
inline std::vector<WindowSample> make_windows(const DatasetBundle& bundle, const WindowSpec& spec,
                                              Split split) {
  const auto [begin, end] = bundle.split_range(split);
  const std::size_t need = spec.T + spec.S;
  if (end - begin < need) {
    throw std::invalid_argument(std::string("window: ") + to_string(split) + " split has " +
                                std::to_string(end - begin) + " days, needs at least " +
                                std::to_string(need) + " (T+S)");
  }
  std::vector<WindowSample> out;
  for (std::size_t first = begin; first + need <= end; ++first) {
    const std::size_t anchor = first + spec.T - 1;
    const std::size_t month = bundle.day_to_month[anchor];
    if (month + 1 < spec.M) continue;
    WindowSample w;
    w.anchor_day = anchor;
    w.flow_window = data_detail::slab(bundle.flow, first, spec.T);
    w.poi_window = data_detail::slab(bundle.poi, month + 1 - spec.M, spec.M);
    w.target = data_detail::slab(bundle.flow, anchor + 1, spec.S);
    out.push_back(std::move(w));
  }
  if (out.empty()) {
    throw std::invalid_argument(std::string("window: no ") + to_string(split) +
                                " window has M=" + std::to_string(spec.M) +
                                " months of POI history");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::size_t N = 20;
  std::size_t C = 1;
  std::size_t K = 4;
  std::size_t days = 720;
  std::size_t days_per_month = 30;
  std::size_t planted_category = 0;
  double planted_strength = 2.0;  // beta
  double noise_std = 0.1;
  double ar_coefficient = 0.5;
  double weekly_amplitude = 0.0;  // 0 disables the day-of-week component
  double poi_step_std = 0.3;      // monthly random-walk step
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (N == 0 || C == 0 || K == 0) throw std::invalid_argument("synth: N, C, K must be positive");
    if (days_per_month == 0) throw std::invalid_argument("synth: days_per_month must be positive");
    if (days < 3) throw std::invalid_argument("synth: need at least 3 days");
    if (planted_category >= K) {
      throw std::invalid_argument("synth: planted category " + std::to_string(planted_category) +
                                  " out of range for K=" + std::to_string(K));
    }
    if (planted_strength < 0) throw std::invalid_argument("synth: beta must be >= 0");
    if (noise_std < 0 || poi_step_std < 0) throw std::invalid_argument("synth: negative std");
    if (!(std::abs(ar_coefficient) < 1)) {
      throw std::invalid_argument("synth: |ar_coefficient| must be < 1");
    }
    if (!(train_fraction > 0 && val_fraction > 0 && train_fraction + val_fraction < 1)) {
      throw std::invalid_argument("synth: split fractions must be positive and sum below 1");
    }
  }
};

/// Planted-causality data:
///   P[m+1, n, k] = |P[m, n, k] + poi_step_std * eps|, P[0] ~ U(1, 3)
///   X[d, n, c]   = base[n, c] * (1 + weekly) + beta * P[m(d), n, k*] * s[c] + e[d, n, c]
///   e[d]         = ar * e[d-1] + noise_std * eps
/// with weekly = weekly_amplitude * sin(2 pi (d mod 7) / 7 + phase[n]) and
/// channel profile s of mean 1. Only k* enters the flow equation.
inline DatasetBundle synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t N = cfg.N, C = cfg.C, K = cfg.K, D = cfg.days;
  const std::size_t months = (D + cfg.days_per_month - 1) / cfg.days_per_month;
  Rng poi_rng(sub_seed(cfg.seed, "synth.poi"));
  Rng base_rng(sub_seed(cfg.seed, "synth.base"));
  Rng noise_rng(sub_seed(cfg.seed, "synth.noise"));

  DatasetBundle b;
  b.name = "synthetic";
  b.poi = Tensor(Shape{months, N, K}, 0.0);
  for (std::size_t i = 0; i < N * K; ++i) b.poi[i] = poi_rng.uniform(1.0, 3.0);
  for (std::size_t m = 1; m < months; ++m) {
    for (std::size_t i = 0; i < N * K; ++i) {
      b.poi[m * N * K + i] =
          std::abs(b.poi[(m - 1) * N * K + i] + cfg.poi_step_std * poi_rng.normal());
    }
  }

  std::vector<double> profile(C);
  double psum = 0.0;
  for (double& s : profile) psum += (s = base_rng.uniform(0.5, 1.5));
  for (double& s : profile) s *= static_cast<double>(C) / psum;
  Tensor base(Shape{N, C}, 0.0);
  for (double& v : base.values()) v = base_rng.uniform(5.0, 10.0);
  std::vector<double> phase(N);
  for (double& p : phase) p = base_rng.uniform(0.0, 2.0 * 3.14159265358979323846);

  b.day_to_month.resize(D);
  for (std::size_t d = 0; d < D; ++d) b.day_to_month[d] = d / cfg.days_per_month;

  b.flow = Tensor(Shape{D, N, C}, 0.0);
  std::vector<double> e(N * C, 0.0);
  const std::size_t k = cfg.planted_category;
  for (std::size_t d = 0; d < D; ++d) {
    const std::size_t m = b.day_to_month[d];
    for (std::size_t n = 0; n < N; ++n) {
      const double weekly =
          cfg.weekly_amplitude *
          std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(d % 7) / 7.0 + phase[n]);
      for (std::size_t c = 0; c < C; ++c) {
        double& en = e[n * C + c];
        en = cfg.ar_coefficient * en + cfg.noise_std * noise_rng.normal();
        b.flow[(d * N + n) * C + c] = base.at(n, c) * (1.0 + weekly) +
                                      cfg.planted_strength * b.poi[(m * N + n) * K + k] *
                                          profile[c] +
                                      en;
      }
    }
  }

  b.adjacency = Tensor(Shape{N, N}, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    b.adjacency.at(n, n) = 1.0;
    if (N > 1) {
      b.adjacency.at(n, (n + 1) % N) = 1.0;
      b.adjacency.at(n, (n + N - 1) % N) = 1.0;
    }
  }
  for (std::size_t n = 0; n < N; ++n) b.node_ids.push_back("n" + std::to_string(n));
  for (std::size_t j = 0; j < K; ++j) b.categories.push_back("cat" + std::to_string(j));
  b.splits.train_end = static_cast<std::size_t>(std::floor(cfg.train_fraction * double(D)));
  b.splits.val_end =
      static_cast<std::size_t>(std::floor((cfg.train_fraction + cfg.val_fraction) * double(D)));
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Historical average baseline

/// Day-of-week average over all days before the split start, per node and
/// channel. Returns one S x N x C forecast per window (aligned with `windows`).
inline std::vector<Tensor> ha_baseline(const DatasetBundle& bundle, Split split,
                                       const std::vector<WindowSample>& windows) {
  const std::size_t history = bundle.split_range(split).first;
  if (history < 7) {
    throw std::invalid_argument("ha: needs at least one full week of history before the " +
                                std::string(to_string(split)) + " split, has " +
                                std::to_string(history) + " days");
  }
  const std::size_t N = bundle.nodes(), C = bundle.channels();
  // Extended-precision sums keep the mean of equal values exact.
  std::vector<long double> sum(7 * N * C, 0.0L);
  std::vector<std::size_t> count(7, 0);
  for (std::size_t d = 0; d < history; ++d) {
    ++count[d % 7];
    for (std::size_t i = 0; i < N * C; ++i) sum[(d % 7) * N * C + i] += bundle.flow[d * N * C + i];
  }
  Tensor avg(Shape{7, N, C}, 0.0);
  for (std::size_t w = 0; w < 7; ++w) {
    for (std::size_t i = 0; i < N * C; ++i) {
      avg[w * N * C + i] = static_cast<double>(sum[w * N * C + i] / count[w]);
    }
  }
  std::vector<Tensor> out;
  for (const WindowSample& win : windows) {
    const std::size_t S = win.target.dim(0);
    Tensor f(Shape{S, N, C}, 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t dow = (win.anchor_day + 1 + s) % 7;
      for (std::size_t i = 0; i < N * C; ++i) f[s * N * C + i] = avg[dow * N * C + i];
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest + CSV I/O

inline constexpr int kManifestVersion = 1;

namespace data_detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct CsvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void csv_fail(const std::filesystem::path& file, std::size_t row,
                                  const std::string& msg) {
  throw CsvError(file.filename().string() + " row " + std::to_string(row) + ": " + msg);
}

inline double parse_real(std::string_view s, const std::filesystem::path& file, std::size_t row) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    csv_fail(file, row, "cannot parse '" + std::string(s) + "' as a number");
  }
  if (!std::isfinite(v)) csv_fail(file, row, "non-finite value '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_index(std::string_view s, const std::filesystem::path& file,
                               std::size_t row) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    csv_fail(file, row, "cannot parse '" + std::string(s) + "' as a non-negative index");
  }
  return v;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

// Reads rows (time, node, v0..v{F-1}) into a steps x N x F tensor. Every
// (time, node) pair must appear exactly once and time must not decrease.
inline Tensor read_series(const std::filesystem::path& file, const char* time_col,
                          std::size_t steps, std::size_t N, std::size_t F,
                          const std::map<std::string, std::size_t>& node_index) {
  const auto lines = read_lines(file);
  if (lines.empty()) csv_fail(file, 1, "missing header");
  const auto header = split_csv(lines[0]);
  if (header.size() != F + 2 || header[0] != time_col || header[1] != "node") {
    csv_fail(file, 1, "expected header '" + std::string(time_col) + ",node' plus " +
                          std::to_string(F) + " value columns, got " +
                          std::to_string(header.size()) + " columns");
  }
  Tensor out(Shape{steps, N, F}, 0.0);
  std::vector<char> seen(steps * N, 0);
  std::size_t last_time = 0;
  std::size_t seen_nodes = 0;
  std::vector<char> node_seen(N, 0);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const std::size_t row = r + 1;
    const auto cells = split_csv(lines[r]);
    if (cells.size() != F + 2) {
      csv_fail(file, row, "expected " + std::to_string(F + 2) + " cells, got " +
                              std::to_string(cells.size()));
    }
    const std::size_t t = parse_index(cells[0], file, row);
    if (r > 1 && t < last_time) csv_fail(file, row, "time index decreases");
    last_time = t;
    if (t >= steps) {
      csv_fail(file, row, std::string(time_col) + " " + std::to_string(t) +
                              " beyond the declared " + std::to_string(steps) + " steps");
    }
    auto it = node_index.find(std::string(cells[1]));
    if (it == node_index.end()) {
      csv_fail(file, row, "unknown node '" + std::string(cells[1]) + "' (manifest declares N=" +
                              std::to_string(N) + ")");
    }
    const std::size_t n = it->second;
    if (!node_seen[n]) {
      node_seen[n] = 1;
      ++seen_nodes;
    }
    if (seen[t * N + n]) csv_fail(file, row, "duplicate row for this time and node");
    seen[t * N + n] = 1;
    for (std::size_t f = 0; f < F; ++f) out[(t * N + n) * F + f] = parse_real(cells[f + 2], file, row);
  }
  if (seen_nodes != N) {
    throw CsvError(file.filename().string() + ": manifest declares N=" + std::to_string(N) +
                   " nodes but the file contains " + std::to_string(seen_nodes));
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) {
      throw CsvError(file.filename().string() + ": missing row for " + time_col + " " +
                     std::to_string(i / N) + ", node index " + std::to_string(i % N));
    }
  }
  return out;
}

inline void write_series(const std::filesystem::path& file, const char* time_col,
                         const char* prefix, const Tensor& x,
                         const std::vector<std::string>& node_ids) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  const std::size_t steps = x.dim(0), N = x.dim(1), F = x.dim(2);
  out << time_col << ",node";
  for (std::size_t f = 0; f < F; ++f) out << ',' << prefix << f;
  out << '\n';
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      out << t << ',' << node_ids[n];
      for (std::size_t f = 0; f < F; ++f) out << ',' << format_double(x[(t * N + n) * F + f]);
      out << '\n';
    }
  }
}

}  // namespace data_detail

/// Writes manifest.json, flow.csv, poi.csv and adj.csv into `dir`.
inline void save_dataset(const DatasetBundle& b, const std::filesystem::path& dir) {
  if (b.normalized) throw std::logic_error("save_dataset: refusing to save normalised values");
  b.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["version"] = kManifestVersion;
  m["name"] = b.name;
  m["N"] = b.nodes();
  m["C"] = b.channels();
  m["K"] = b.num_categories();
  m["days"] = b.days();
  m["months"] = b.months();
  m["node_ids"] = b.node_ids;
  m["categories"] = b.categories;
  m["day_to_month"] = b.day_to_month;
  m["splits"] = {{"train_end", b.splits.train_end}, {"val_end", b.splits.val_end}};
  m["files"] = {{"flow", "flow.csv"}, {"poi", "poi.csv"}, {"adjacency", "adj.csv"}};
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << m.dump(2) << '\n';
  }
  data_detail::write_series(dir / "flow.csv", "day", "c", b.flow, b.node_ids);
  data_detail::write_series(dir / "poi.csv", "month", "k", b.poi, b.node_ids);
  std::ofstream adj(dir / "adj.csv");
  adj << "src,dst,weight\n";
  const std::size_t N = b.nodes();
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      if (b.adjacency.at(i, j) != 0.0) {
        adj << b.node_ids[i] << ',' << b.node_ids[j] << ','
            << data_detail::format_double(b.adjacency.at(i, j)) << '\n';
      }
    }
  }
}

/// Loads and validates a dataset from its manifest.
inline DatasetBundle load_dataset(const std::filesystem::path& manifest_path) {
  using data_detail::csv_fail;
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  DatasetBundle b;
  try {
    if (m.value("version", 0) != kManifestVersion) {
      throw std::runtime_error("unsupported manifest version " +
                               std::to_string(m.value("version", 0)));
    }
    b.name = m.value("name", std::string("dataset"));
    const auto N = m.at("N").get<std::size_t>();
    const auto C = m.at("C").get<std::size_t>();
    const auto K = m.at("K").get<std::size_t>();
    const auto days = m.at("days").get<std::size_t>();
    const auto months = m.at("months").get<std::size_t>();
    b.node_ids = m.at("node_ids").get<std::vector<std::string>>();
    if (b.node_ids.size() != N) {
      throw std::runtime_error("manifest declares N=" + std::to_string(N) + " but lists " +
                               std::to_string(b.node_ids.size()) + " node ids");
    }
    b.categories = m.at("categories").get<std::vector<std::string>>();
    if (b.categories.size() != K) {
      throw std::runtime_error("manifest declares K=" + std::to_string(K) + " but lists " +
                               std::to_string(b.categories.size()) + " categories");
    }
    b.day_to_month = m.at("day_to_month").get<std::vector<std::size_t>>();
    b.splits.train_end = m.at("splits").at("train_end").get<std::size_t>();
    b.splits.val_end = m.at("splits").at("val_end").get<std::size_t>();
    std::map<std::string, std::size_t> index;
    for (std::size_t n = 0; n < N; ++n) {
      if (!index.emplace(b.node_ids[n], n).second) {
        throw std::runtime_error("duplicate node id '" + b.node_ids[n] + "'");
      }
    }
    const auto& files = m.at("files");
    b.flow = data_detail::read_series(dir / files.at("flow").get<std::string>(), "day", days, N,
                                      C, index);
    b.poi = data_detail::read_series(dir / files.at("poi").get<std::string>(), "month", months,
                                     N, K, index);
    const auto adj_file = dir / files.at("adjacency").get<std::string>();
    const auto lines = data_detail::read_lines(adj_file);
    if (lines.empty() || lines[0] != "src,dst,weight") csv_fail(adj_file, 1, "bad header");
    b.adjacency = Tensor(Shape{N, N}, 0.0);
    for (std::size_t r = 1; r < lines.size(); ++r) {
      const auto cells = data_detail::split_csv(lines[r]);
      if (cells.size() != 3) csv_fail(adj_file, r + 1, "expected 3 cells");
      auto s = index.find(std::string(cells[0]));
      auto d = index.find(std::string(cells[1]));
      if (s == index.end() || d == index.end()) csv_fail(adj_file, r + 1, "unknown node");
      const double w = data_detail::parse_real(cells[2], adj_file, r + 1);
      if (w < 0) csv_fail(adj_file, r + 1, "negative weight");
      b.adjacency.at(s->second, d->second) = w;
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path.string() + ": " + e.what());
  }
  b.validate();
  return b;
}

}  // namespace c3de

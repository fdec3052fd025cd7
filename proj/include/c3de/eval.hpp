// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3de/tensor.hpp"

namespace c3de {

inline constexpr double kMapeMask = 1e-3;

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;  // percent; empty when every element is masked
  std::size_t count = 0;
  std::size_t mape_masked = 0;
};

/// Accumulates absolute/squared/percentage errors over any number of pairs.
class MetricAccumulator {
 public:
  void add(double actual, double forecast) {
    const double e = forecast - actual;
    abs_ += std::abs(e);
    sq_ += e * e;
    ++n_;
    if (std::abs(actual) < mask_) {
      ++masked_;
    } else {
      pct_ += std::abs(e) / std::abs(actual);
      ++n_pct_;
    }
  }

  explicit MetricAccumulator(double mask = kMapeMask) : mask_(mask) {}

  Metrics result() const {
    if (n_ == 0) throw std::invalid_argument("metrics: empty horizon");
    Metrics m;
    m.count = n_;
    m.mae = abs_ / static_cast<double>(n_);
    m.rmse = std::sqrt(sq_ / static_cast<double>(n_));
    m.mape_masked = masked_;
    if (n_pct_ > 0) m.mape = 100.0 * pct_ / static_cast<double>(n_pct_);
    return m;
  }

 private:
  double mask_;
  double abs_ = 0.0, sq_ = 0.0, pct_ = 0.0;
  std::size_t n_ = 0, n_pct_ = 0, masked_ = 0;
};

/// MAE, RMSE and MAPE (percent) over the listed 0-based steps of S x N x C
/// tensors; an empty step list means every step.
inline Metrics metrics(const Tensor& actual, const Tensor& forecast,
                       const std::vector<std::size_t>& steps = {}, double mask = kMapeMask) {
  if (actual.shape() != forecast.shape()) {
    throw std::invalid_argument("metrics: actual " + shape_str(actual.shape()) +
                                " vs forecast " + shape_str(forecast.shape()));
  }
  MetricAccumulator acc(mask);
  if (steps.empty()) {
    for (std::size_t i = 0; i < actual.size(); ++i) acc.add(actual[i], forecast[i]);
    return acc.result();
  }
  const std::size_t stride = actual.size() / actual.dim(0);
  for (std::size_t s : steps) {
    if (s >= actual.dim(0)) {
      throw std::out_of_range("metrics: step " + std::to_string(s) + " beyond S=" +
                              std::to_string(actual.dim(0)));
    }
    for (std::size_t i = 0; i < stride; ++i) acc.add(actual[s * stride + i], forecast[s * stride + i]);
  }
  return acc.result();
}

enum class HorizonMode {
  kStep,        // the single step at the horizon (1-based index)
  kCumulative,  // mean over steps 1..horizon
};

struct HorizonRow {
  std::string label;
  Metrics metrics;
};

struct MetricReport {
  std::string model;
  std::string dataset;
  std::size_t samples = 0;
  std::vector<HorizonRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model;
    j["dataset"] = dataset;
    j["samples"] = samples;
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json m;
      m["horizon"] = r.label;
      m["mae"] = r.metrics.mae;
      m["rmse"] = r.metrics.rmse;
      m["mape"] = r.metrics.mape ? nlohmann::json(*r.metrics.mape) : nlohmann::json(nullptr);
      m["count"] = r.metrics.count;
      m["mape_masked"] = r.metrics.mape_masked;
      rs.push_back(std::move(m));
    }
    j["horizons"] = std::move(rs);
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    char buf[160];
    os << model << " on " << dataset << " (" << samples << " samples)\n";
    std::snprintf(buf, sizeof buf, "%-12s %12s %12s %10s\n", "horizon", "MAE", "RMSE", "MAPE");
    os << buf;
    for (const auto& r : rows) {
      std::string mape = "undefined";
      if (r.metrics.mape) {
        char m[32];
        std::snprintf(m, sizeof m, "%.2f%%", *r.metrics.mape);
        mape = m;
      }
      std::snprintf(buf, sizeof buf, "%-12s %12.4f %12.4f %10s\n", r.label.c_str(),
                    r.metrics.mae, r.metrics.rmse, mape.c_str());
      os << buf;
    }
    return os.str();
  }

  const HorizonRow& row(const std::string& label) const {
    for (const auto& r : rows) {
      if (r.label == label) return r;
    }
    throw std::out_of_range("report has no horizon '" + label + "'");
  }
};

/// Horizons reported for a given S: 7 and 14 when S >= 14, otherwise
/// ceil(S/2) and S.
inline std::vector<std::size_t> report_horizons(std::size_t S) {
  if (S >= 14) return {7, 14};
  if (S == 1) return {1};
  return {(S + 1) / 2, S};
}

/// Per-horizon and average metrics over aligned (actual, forecast) pairs of
/// S x N x C tensors in original units.
inline MetricReport horizon_report(const std::vector<Tensor>& actual,
                                   const std::vector<Tensor>& forecast, const std::string& model,
                                   const std::string& dataset,
                                   HorizonMode mode = HorizonMode::kStep,
                                   double mask = kMapeMask) {
  if (actual.empty() || actual.size() != forecast.size()) {
    throw std::invalid_argument("horizon_report: need matching, non-empty sample lists");
  }
  const Shape shape = actual.front().shape();
  const std::size_t S = shape.at(0);
  const auto horizons = report_horizons(S);
  std::vector<MetricAccumulator> accs(horizons.size() + 1, MetricAccumulator(mask));
  const std::size_t stride = actual.front().size() / S;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i].shape() != shape || forecast[i].shape() != shape) {
      throw std::invalid_argument("horizon_report: sample " + std::to_string(i) + " has shape " +
                                  shape_str(actual[i].shape()) + "/" +
                                  shape_str(forecast[i].shape()) + ", expected " +
                                  shape_str(shape));
    }
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t h = 0; h < horizons.size(); ++h) {
        const bool take = mode == HorizonMode::kStep ? s + 1 == horizons[h] : s < horizons[h];
        if (!take) continue;
        for (std::size_t j = 0; j < stride; ++j) {
          accs[h].add(actual[i][s * stride + j], forecast[i][s * stride + j]);
        }
      }
      for (std::size_t j = 0; j < stride; ++j) {
        accs.back().add(actual[i][s * stride + j], forecast[i][s * stride + j]);
      }
    }
  }
  MetricReport rep;
  rep.model = model;
  rep.dataset = dataset;
  rep.samples = actual.size();
  for (std::size_t h = 0; h < horizons.size(); ++h) {
    rep.rows.push_back({"horizon_" + std::to_string(horizons[h]), accs[h].result()});
  }
  rep.rows.push_back({"average", accs.back().result()});
  return rep;
}

}  // namespace c3de

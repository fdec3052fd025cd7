// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "c3de/data.hpp"
#include "support/oracles.hpp"

using namespace c3de;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig sc;
  sc.N = 4;
  sc.K = 3;
  sc.C = 2;
  sc.days = 240;
  sc.planted_category = 1;
  sc.seed = seed;
  return sc;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("c3de_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Least-squares fit y ~ X b via normal equations.
std::vector<double> lstsq(const std::vector<std::vector<double>>& X, const std::vector<double>& y) {
  const std::size_t p = X.front().size();
  std::vector<std::vector<double>> a(p, std::vector<double>(p, 0.0));
  std::vector<double> r(p, 0.0);
  for (std::size_t i = 0; i < X.size(); ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      r[j] += X[i][j] * y[i];
      for (std::size_t k = 0; k < p; ++k) a[j][k] += X[i][j] * X[i][k];
    }
  }
  return oracle::dense_solve(a, r);
}

DatasetBundle tiny_bundle(std::size_t days) {
  SynthConfig sc = small_config();
  sc.days = days;
  sc.days_per_month = 5;
  return synth_generate(sc);
}

}  // namespace

TEST(Window, CountsFollowSplitLength) {
  DatasetBundle b = tiny_bundle(200);
  const WindowSpec spec{4, 1, 3};
  b.splits = {7, 14};
  EXPECT_EQ(make_windows(b, spec, Split::kVal).size(), 1u);
  b.splits = {7, 23};
  EXPECT_EQ(make_windows(b, spec, Split::kVal).size(), 10u);
  b.splits = {7, 13};
  try {
    make_windows(b, spec, Split::kVal);
    FAIL() << "expected a short-split error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("at least 7"), std::string::npos) << e.what();
  }
}

TEST(Window, PoiWindowEndsAtAnchorMonthAndTargetFollows) {
  const DatasetBundle b = tiny_bundle(200);
  const WindowSpec spec{6, 3, 4};
  for (const auto& w : make_windows(b, spec, Split::kTest)) {
    const std::size_t j = b.day_to_month[w.anchor_day];
    ASSERT_GE(j + 1, spec.M);
    for (std::size_t m = 0; m < spec.M; ++m) {
      for (std::size_t i = 0; i < 4 * 3; ++i) {
        EXPECT_EQ(w.poi_window[m * 12 + i], b.poi[(j + 1 - spec.M + m) * 12 + i]);
      }
    }
    const std::size_t NC = 4 * 2;
    for (std::size_t i = 0; i < NC; ++i) {
      EXPECT_EQ(w.flow_window[(spec.T - 1) * NC + i], b.flow[w.anchor_day * NC + i]);
      EXPECT_EQ(w.target[i], b.flow[(w.anchor_day + 1) * NC + i]);
    }
  }
}

TEST(Window, EarlyAnchorsWithoutPoiHistoryAreSkipped) {
  const DatasetBundle b = tiny_bundle(200);
  const auto w = make_windows(b, {2, 3, 1}, Split::kTrain);
  // Months are 5 days long, so the first anchor with 3 months of history is day 10.
  EXPECT_EQ(w.front().anchor_day, 10u);
}

TEST(Window, NoLeakageAcrossSplits) {
  const DatasetBundle b = synth_generate(small_config());
  const WindowSpec spec{7, 2, 5};
  std::size_t max_train_target = 0;
  for (const auto& w : make_windows(b, spec, Split::kTrain)) {
    max_train_target = std::max(max_train_target, w.anchor_day + spec.S);
  }
  std::size_t min_val_input = b.days();
  for (const auto& w : make_windows(b, spec, Split::kVal)) {
    min_val_input = std::min(min_val_input, w.anchor_day + 1 - spec.T);
  }
  EXPECT_LT(max_train_target, min_val_input);
}

TEST(Normalize, HandValueAndConstantChannel) {
  DatasetBundle b = tiny_bundle(40);
  b.splits = {2, 30};
  for (std::size_t i = 0; i < b.flow.size(); ++i) b.flow[i] = 3.0;
  // Node 0, channel 0: train values 8 and 12 give mean 10, std 2.
  b.flow.at(0, 0, 0) = 8.0;
  b.flow.at(1, 0, 0) = 12.0;
  b.flow.at(5, 0, 0) = 14.0;
  const DatasetBundle n = normalize(b);
  EXPECT_DOUBLE_EQ(n.flow.at(5, 0, 0), 2.0);
  EXPECT_EQ(n.flow.at(5, 1, 0), 0.0);
  EXPECT_FALSE(n.norm_stats.warnings.empty());
  EXPECT_THROW(normalize(n), std::logic_error);
}

TEST(Normalize, DenormalizeInvertsOnRandomData) {
  DatasetBundle b = synth_generate(small_config(3));
  Rng rng(4);
  for (double& v : b.flow.values()) v = rng.uniform(-50, 50);
  const DatasetBundle n = normalize(b);
  const Tensor back = denormalize(n.flow, n.norm_stats);
  for (std::size_t i = 0; i < b.flow.size(); ++i) EXPECT_NEAR(back[i], b.flow[i], 1e-9);
}

TEST(Synth, SameSeedIsBitIdentical) {
  const DatasetBundle a = synth_generate(small_config(5)), b = synth_generate(small_config(5));
  EXPECT_TRUE(a.flow == b.flow);
  EXPECT_TRUE(a.poi == b.poi);
  EXPECT_FALSE(a.flow == synth_generate(small_config(6)).flow);
  for (double v : a.poi.values()) EXPECT_GE(v, 0.0);
}

TEST(Synth, NoiselessFlowIsAffineInPlantedCategory) {
  SynthConfig sc = small_config(7);
  sc.noise_std = 0.0;
  sc.ar_coefficient = 0.0;
  const DatasetBundle b = synth_generate(sc);
  for (std::size_t n = 0; n < sc.N; ++n) {
    for (std::size_t c = 0; c < sc.C; ++c) {
      std::vector<std::vector<double>> X;
      std::vector<double> y;
      for (std::size_t d = 0; d < b.days(); ++d) {
        X.push_back({1.0, b.poi.at(b.day_to_month[d], n, sc.planted_category)});
        y.push_back(b.flow.at(d, n, c));
      }
      const auto coef = lstsq(X, y);
      double worst = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) {
        worst = std::max(worst, std::abs(coef[0] + coef[1] * X[i][1] - y[i]));
      }
      EXPECT_LE(worst, 1e-9);
    }
  }
}

TEST(Synth, RegressionRecoversPlantedCoefficient) {
  SynthConfig sc = small_config(8);
  sc.C = 1;
  sc.noise_std = 0.01;
  sc.days = 720;
  const DatasetBundle b = synth_generate(sc);
  for (std::size_t n = 0; n < sc.N; ++n) {
    std::vector<std::vector<double>> X;
    std::vector<double> y;
    for (std::size_t d = 0; d < b.days(); ++d) {
      std::vector<double> row{1.0};
      for (std::size_t k = 0; k < sc.K; ++k) row.push_back(b.poi.at(b.day_to_month[d], n, k));
      X.push_back(row);
      y.push_back(b.flow.at(d, n, 0));
    }
    const auto coef = lstsq(X, y);
    for (std::size_t k = 0; k < sc.K; ++k) {
      const double target = k == sc.planted_category ? sc.planted_strength : 0.0;
      EXPECT_NEAR(coef[k + 1], target, 0.05 * sc.planted_strength) << "node " << n << " k " << k;
    }
  }
}

TEST(Synth, ZeroBetaDecouplesFlowFromPoi) {
  SynthConfig sc = small_config(9);
  sc.C = 1;
  sc.days = 2000;
  sc.planted_strength = 0.0;
  const DatasetBundle b = synth_generate(sc);
  // Pooled correlation after removing each node's mean.
  for (std::size_t k = 0; k < sc.K; ++k) {
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t n = 0; n < sc.N; ++n) {
      double mx = 0, my = 0;
      for (std::size_t d = 0; d < b.days(); ++d) {
        mx += b.flow.at(d, n, 0);
        my += b.poi.at(b.day_to_month[d], n, k);
      }
      mx /= double(b.days());
      my /= double(b.days());
      for (std::size_t d = 0; d < b.days(); ++d) {
        const double x = b.flow.at(d, n, 0) - mx, y = b.poi.at(b.day_to_month[d], n, k) - my;
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
      }
    }
    EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.1) << "category " << k;
  }
}

TEST(Synth, ConfigValidation) {
  SynthConfig sc = small_config();
  sc.planted_category = 3;
  EXPECT_THROW(synth_generate(sc), std::invalid_argument);
  sc = small_config();
  sc.ar_coefficient = 1.0;
  EXPECT_THROW(synth_generate(sc), std::invalid_argument);
  sc = small_config();
  sc.planted_strength = -1.0;
  EXPECT_THROW(synth_generate(sc), std::invalid_argument);
}

TEST(HistoricalAverage, DayOfWeekMeans) {
  DatasetBundle b = tiny_bundle(60);
  b.splits = {14, 30};
  for (double& v : b.flow.values()) v = 10.0;
  // Day 0 and day 7 share a weekday: 8 and 12 average to 10 only if both count.
  b.flow.at(0, 0, 0) = 8.0;
  b.flow.at(7, 0, 0) = 12.0;
  b.flow.at(1, 0, 0) = 4.0;
  b.flow.at(8, 0, 0) = 4.0;
  const auto windows = make_windows(b, {3, 1, 7}, Split::kVal);
  const auto fc = ha_baseline(b, Split::kVal, windows);
  ASSERT_EQ(fc.size(), windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    for (std::size_t s = 0; s < 7; ++s) {
      const std::size_t dow = (windows[w].anchor_day + 1 + s) % 7;
      EXPECT_DOUBLE_EQ(fc[w].at(s, 0, 0), dow == 1 ? 4.0 : 10.0);
      EXPECT_DOUBLE_EQ(fc[w].at(s, 1, 1), 10.0);
    }
  }
  b.splits = {6, 30};
  EXPECT_THROW(ha_baseline(b, Split::kVal, windows), std::invalid_argument);
}

TEST(Io, SaveLoadRoundTripIsBitIdentical) {
  const fs::path dir = scratch("roundtrip");
  SynthConfig sc = small_config(10);
  const DatasetBundle b = synth_generate(sc);
  save_dataset(b, dir);
  const DatasetBundle r = load_dataset(dir / "manifest.json");
  EXPECT_TRUE(r.flow == b.flow);
  EXPECT_TRUE(r.poi == b.poi);
  EXPECT_TRUE(r.adjacency == b.adjacency);
  EXPECT_EQ(r.node_ids, b.node_ids);
  EXPECT_EQ(r.categories, b.categories);
  EXPECT_EQ(r.day_to_month, b.day_to_month);
  EXPECT_EQ(r.splits.train_end, b.splits.train_end);
  EXPECT_EQ(r.splits.val_end, b.splits.val_end);
}

TEST(Io, ManifestNodeCountMismatchNamesBothCounts) {
  const fs::path dir = scratch("mismatch");
  save_dataset(synth_generate(small_config(11)), dir);
  auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  m["N"] = 5;
  m["node_ids"].push_back("n4");
  spit(dir / "manifest.json", m.dump());
  try {
    load_dataset(dir / "manifest.json");
    FAIL() << "expected a dimension error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("N=5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4"), std::string::npos) << msg;
  }
}

TEST(Io, LargeCategoryCountLoads) {
  const fs::path dir = scratch("wide");
  SynthConfig sc;
  sc.N = 185;
  sc.K = 7;
  sc.days = 60;
  const DatasetBundle b = synth_generate(sc);
  save_dataset(b, dir);
  const DatasetBundle r = load_dataset(dir / "manifest.json");
  EXPECT_EQ(r.num_categories(), 7u);
  EXPECT_EQ(r.nodes(), 185u);
}

TEST(Io, SingleCellCorruptionsAreRejectedWithRowNumbers) {
  const fs::path dir = scratch("corrupt");
  save_dataset(synth_generate(small_config(12)), dir);
  const std::string flow = slurp(dir / "flow.csv");
  std::vector<std::string> lines;
  {
    std::istringstream in(flow);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  auto with_line = [&](std::size_t idx, const std::string& text) {
    auto copy = lines;
    copy[idx] = text;
    std::string out;
    for (const auto& l : copy) out += l + "\n";
    spit(dir / "flow.csv", out);
  };
  struct Case {
    std::string text;
    std::string expect;
  };
  // Line index 3 is file row 4 (header is row 1).
  const std::vector<Case> cases = {
      {"0,n3,nan,1.0", "row 4"},
      {"0,n3,abc,1.0", "row 4"},
      {"0,n3,1.0", "row 4"},
      {"0,zz,1.0,1.0", "row 4"},
  };
  for (const auto& c : cases) {
    with_line(3, c.text);
    try {
      load_dataset(dir / "manifest.json");
      ADD_FAILURE() << "accepted corrupted cell: " << c.text;
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find(c.expect), std::string::npos) << e.what();
    }
  }
  // A later line moved to the top breaks the time ordering.
  with_line(1, lines[20]);
  EXPECT_THROW(load_dataset(dir / "manifest.json"), std::runtime_error);
  fs::remove(dir / "flow.csv");
  EXPECT_THROW(load_dataset(dir / "manifest.json"), std::runtime_error);
}

// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "c3de/adam.hpp"

using namespace c3de;

namespace {
AdamConfig no_decay() {
  AdamConfig c;
  c.weight_decay = 0.0;
  return c;
}
}  // namespace

TEST(Adam, DefaultsMatchTrainingSetup) {
  AdamConfig c;
  EXPECT_DOUBLE_EQ(c.lr, 0.001);
  EXPECT_DOUBLE_EQ(c.weight_decay, 5e-4);
  EXPECT_DOUBLE_EQ(c.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.eps, 1e-8);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
  std::vector<double> p{1.0};
  std::vector<double> g{0.0};
  AdamState s;
  adam_step(p, g, s, no_decay(), "p");
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(s.first_moment[0], 0.0);
  EXPECT_EQ(s.second_moment[0], 0.0);
  EXPECT_EQ(s.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState s;
  adam_step(p, g, s, no_decay(), "p");
  EXPECT_NEAR(p[0], -0.001 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MatchesHandRolledReferenceOverSeveralSteps) {
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.1;
  std::vector<double> p{0.5, -1.0};
  AdamState s;
  double rp[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    std::vector<double> g{0.3 * t, -0.2};
    adam_step(p, g, s, cfg, "p");
    for (int i = 0; i < 2; ++i) {
      const double gi = g[i] + 0.1 * rp[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      rp[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(p[0], rp[0], 1e-14);
    EXPECT_NEAR(p[1], rp[1], 1e-14);
  }
  EXPECT_EQ(s.step_count, 5u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::vector<double> p{0.0};
  std::vector<double> g{std::nan("")};
  AdamState s;
  try {
    adam_step(p, g, s, no_decay(), "head.W1");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("head.W1"), std::string::npos);
  }
}

TEST(Adam, OptimizerSkipsFrozenParameters) {
  Parameter a("a", Tensor::vector({1.0})), b("b", Tensor::vector({1.0}));
  b.frozen = true;
  a.grad[0] = 1.0;
  b.grad[0] = 1.0;
  Adam opt({&a, &b}, no_decay());
  opt.step();
  EXPECT_LT(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 1.0);
}

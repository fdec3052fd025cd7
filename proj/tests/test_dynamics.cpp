// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "c3de/causal.hpp"
#include "c3de/dynamics.hpp"
#include "support/oracles.hpp"
#include "support/tiny.hpp"

using namespace c3de;

namespace {

void zero_all(EncoderParams& p) {
  for (Parameter* q : p.list()) q->value = Tensor(q->value.shape(), 0.0);
}

EncoderConfig small_cfg(std::size_t L = 2, double step = 0.05) {
  EncoderConfig e = tiny::config().encoder;
  e.L = L;
  e.flow_solver.step_size = step;
  e.poi_solver.step_size = step;
  return e;
}

BatchPaths paths_for(const EncoderConfig& e, std::uint64_t seed, std::size_t B = 2) {
  Rng rng(seed);
  std::vector<Tensor> f, p;
  for (std::size_t b = 0; b < B; ++b) {
    f.push_back(oracle::random_tensor({e.T, e.N, e.C}, rng));
    p.push_back(oracle::random_tensor({e.M, e.N, e.K}, rng));
  }
  std::vector<const Tensor*> fp, pp;
  for (std::size_t b = 0; b < B; ++b) {
    fp.push_back(&f[b]);
    pp.push_back(&p[b]);
  }
  return fit_window_paths(fp, pp);
}

}  // namespace

TEST(GruField, ZeroParametersGiveHalfDecay) {
  Rng rng(1);
  GruFieldParams p("g", 2, 3, rng);
  for (Parameter* q : p.list()) q->value = Tensor(q->value.shape(), 0.0);
  Tape tape;
  const Tensor h = oracle::random_tensor({4, 3}, rng);
  Var out = gru_field(tape, tape.constant(h), tape.constant(oracle::random_tensor({4, 2}, rng)), p);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(out.value()[i], -0.5 * h[i], 1e-15);
}

TEST(GruField, SaturatedUpdateGateStopsTheState) {
  Rng rng(2);
  GruFieldParams p("g", 1, 2, rng);
  p.b_z.value = Tensor(Shape{2}, 60.0);
  Tape tape;
  Var out = gru_field(tape, tape.constant(Tensor(Shape{1, 2}, 0.7)),
                      tape.constant(Tensor(Shape{1, 1}, 1.0)), p);
  for (double v : out.value().values()) EXPECT_NEAR(v, 0.0, 1e-20);
}

TEST(GruField, ZeroStateIsFixedPointWithoutCandidateDrive) {
  Rng rng(3);
  GruFieldParams p("g", 2, 3, rng);
  p.W_h.value = Tensor(p.W_h.value.shape(), 0.0);
  p.b_h.value = Tensor(p.b_h.value.shape(), 0.0);
  Tape tape;
  Var out = gru_field(tape, tape.constant(Tensor(Shape{2, 3}, 0.0)),
                      tape.constant(oracle::random_tensor({2, 2}, rng)), p);
  for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(InitHidden, ZeroWeightsGiveBiasAndIdentityCopies) {
  Rng rng(4);
  InitParams p("i", 2, 2, rng);
  p.W.value = Tensor(Shape{2, 2}, 0.0);
  Tape tape;
  const Tensor x(Shape{1, 2}, std::vector<double>{3.0, -1.0});
  Var h = init_hidden(tape, tape.constant(x), p);
  EXPECT_EQ(h.value()[0], p.b.value[0]);
  p.W.value = Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  p.b.value = Tensor(Shape{2}, 0.0);
  Var h2 = init_hidden(tape, tape.constant(x), p);
  EXPECT_EQ(h2.value().storage(), x.storage());
}

TEST(InitHidden, GradientMatchesFiniteDifference) {
  Rng rng(5);
  InitParams p("i", 1, 2, rng);
  const Tensor x(Shape{1, 1}, 0.8);
  auto loss = [&]() {
    Tape tape;
    Var h = init_hidden(tape, tape.constant(x), p);
    return sum(hadamard(h, h)).value().item();
  };
  {
    Tape tape;
    Var h = init_hidden(tape, tape.constant(x), p);
    tape.backward(sum(hadamard(h, h)));
  }
  const double fd = oracle::central_difference(
      [&](double v) {
        const double saved = p.W.value[0];
        p.W.value[0] = v;
        const double out = loss();
        p.W.value[0] = saved;
        return out;
      },
      p.W.value[0], 1e-6);
  EXPECT_NE(p.W.grad[0], 0.0);
  EXPECT_LT(oracle::rel_err(p.W.grad[0], fd), 1e-8);
}

TEST(Encoder, ZeroParametersDecayAnalytically) {
  EncoderConfig e = small_cfg(3, 0.05);
  Rng rng(6);
  EncoderParams params(e, rng);
  zero_all(params);
  params.flow_init.b.value = Tensor(Shape{e.H}, 1.0);
  params.poi_init.b.value = Tensor(Shape{e.H}, -2.0);
  const auto paths = paths_for(e, 7);
  Tape tape;
  auto st = encode(tape, paths, params, nullptr, e);
  for (double v : st.h_x.value().values()) EXPECT_NEAR(v, std::exp(-0.5), 1e-4);
  for (double v : st.h_p.value().values()) EXPECT_NEAR(v, -2.0 * std::exp(-0.5), 1e-4);
}

TEST(Encoder, UniformWeightsEqualScaledField) {
  EncoderConfig e = small_cfg(2, 0.25);
  Rng rng(8);
  EncoderParams params(e, rng);
  const auto paths = paths_for(e, 9);
  const CausalWeigher uniform = [&](const Tensor&, const Tensor&) {
    return Tensor(Shape{e.N, e.K}, 1.0 / static_cast<double>(e.K));
  };
  Tape t1;
  auto corrected = encode(t1, paths, params, &uniform, e);

  // Direct integration of the POI path with the field scaled by 1/K.
  Tape t2;
  Var h = init_hidden(t2, t2.constant(paths.poi_first), params.poi_init);
  const std::size_t rows = paths.batch * e.N * e.K;
  auto field = [&](const Var& hv, double t) {
    Var pd = t2.constant(encoder_detail::control_derivative(paths.poi, t, rows));
    return scale(gru_field(t2, hv, pd, params.poi), 1.0 / static_cast<double>(e.K));
  };
  for (std::size_t i = 0; i < e.L; ++i) {
    h = integrate(field, h, encoder_detail::segment_begin(i, e.L),
                  encoder_detail::segment_end(i, e.L), {}, e.poi_solver)
            .states.back();
  }
  for (std::size_t i = 0; i < h.value().size(); ++i) {
    EXPECT_NEAR(corrected.h_p.value()[i], h.value()[i], 1e-12);
  }
}

TEST(Encoder, SingleObservationPointComputesOneCorrection) {
  EncoderConfig e = small_cfg(1, 0.25);
  Rng rng(10);
  EncoderParams params(e, rng);
  const auto paths = paths_for(e, 11, 1);
  int calls = 0;
  const CausalWeigher w = [&](const Tensor&, const Tensor&) {
    ++calls;
    return Tensor(Shape{e.N, e.K}, 0.5);
  };
  Tape tape;
  auto st = encode(tape, paths, params, &w, e);
  EXPECT_EQ(calls, 1);
  ASSERT_EQ(st.causal_schedule.size(), 1u);
  EXPECT_EQ(st.obs_times_poi[0], 0.0);
}

TEST(Encoder, ObservationTimesAreInLockstep) {
  EncoderConfig e = small_cfg(5, 0.25);
  e.T = 14;
  e.M = 4;
  Rng rng(12);
  EncoderParams params(e, rng);
  const auto paths = paths_for(e, 13, 1);
  Tape tape;
  auto st = encode(tape, paths, params, nullptr, e);
  ASSERT_EQ(st.obs_times_flow.size(), e.L);
  for (std::size_t i = 0; i < e.L; ++i) {
    EXPECT_LE(std::abs(st.obs_times_flow[i] / 14.0 - st.obs_times_poi[i] / 4.0), 1e-12);
    EXPECT_NEAR(st.obs_times_flow[i], 14.0 * static_cast<double>(i) / 5.0, 1e-12);
  }
}

TEST(Encoder, ScheduleRowsAreSoftmaxOutputs) {
  const auto mc = tiny::config();
  Rng rng(14);
  EncoderParams params(mc.encoder, rng);
  CausalEstimator est(tiny::random_surrogate(mc, 15), {PerturbationKind::kZero, 1.0, 0});
  const CausalWeigher w = est.weigher();
  const auto paths = paths_for(mc.encoder, 16);
  Tape tape;
  auto st = encode(tape, paths, params, &w, mc.encoder);
  ASSERT_EQ(st.causal_schedule.size(), mc.encoder.L);
  for (const Tensor& c : st.causal_schedule) {
    for (std::size_t r = 0; r < c.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < c.dim(1); ++k) {
        EXPECT_GT(c.at(r, k), 0.0);
        EXPECT_LT(c.at(r, k), 1.0);
        s += c.at(r, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Encoder, CausalWeightsCarryNoGradient) {
  const auto mc = tiny::config();
  Rng rng(17);
  EncoderParams params(mc.encoder, rng);
  auto sur = tiny::random_surrogate(mc, 18);
  CausalEstimator est(sur, {PerturbationKind::kZero, 1.0, 0});
  const CausalWeigher w = est.weigher();
  const auto paths = paths_for(mc.encoder, 19);
  Tape tape;
  auto st = encode(tape, paths, params, &w, mc.encoder);
  const Tensor before = st.causal_schedule.back();
  tape.backward(sum(st.h_p));
  for (const Parameter* p : sur->list()) {
    for (double g : p->grad.values()) EXPECT_EQ(g, 0.0) << p->name;
  }
  // Changing the estimator changes the forward weights.
  auto sur2 = tiny::random_surrogate(mc, 99);
  CausalEstimator est2(sur2, {PerturbationKind::kZero, 1.0, 0});
  const CausalWeigher w2 = est2.weigher();
  Tape t2;
  auto st2 = encode(t2, paths, params, &w2, mc.encoder);
  EXPECT_FALSE(st2.causal_schedule.back() == before);
}

TEST(Encoder, ValueOnlyPathMatchesTapePath) {
  const auto mc = tiny::config();
  Rng rng(20);
  EncoderParams params(mc.encoder, rng);
  CausalEstimator est(tiny::random_surrogate(mc, 21), {PerturbationKind::kMean, 1.0, 0});
  const CausalWeigher w = est.weigher();
  const auto paths = paths_for(mc.encoder, 22);
  Tape tape;
  auto st = encode(tape, paths, params, &w, mc.encoder);
  auto plain = encode_values(paths, params, &w, mc.encoder);
  EXPECT_TRUE(plain.h_x == st.h_x.value());
  EXPECT_TRUE(plain.h_p == st.h_p.value());
  EXPECT_EQ(plain.nfe, st.nfe);
}

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "respike/gradcheck.hpp"
#include "respike/ops.hpp"
#include "respike/spiking.hpp"
#include "support.hpp"

using namespace respike;
using testsupport::Gen;

namespace {

// Scalar recurrence: u_pre = x + tau*u; y = u_pre > v_th; u = u_pre*(1-y).
std::vector<double> scalar_lif(const std::vector<double>& xs, double tau, double v_th,
                               std::vector<double>* membrane = nullptr) {
  std::vector<double> y;
  double u = 0;
  for (double x : xs) {
    const double up = x + tau * u;
    const double s = up > v_th ? 1.0 : 0.0;
    u = up * (1 - s);
    y.push_back(s);
    if (membrane) membrane->push_back(u);
  }
  return y;
}

}  // namespace

TEST(Lif, HandWorkedSequence) {
  // tau 0.5, v_th 1: 0.6 -> 0.9 -> 1.05 fires -> 0.6
  LifConfig cfg;
  Tensor<double> x({4, 1}, std::vector<double>{0.6, 0.6, 0.6, 0.6});
  Tensor<double> s = lif_sequence(x, cfg);
  const std::vector<double> expect{0, 0, 1, 0};
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(s[t], expect[t]);
}

TEST(Lif, ThresholdIsStrict) {
  LifConfig cfg;
  cfg.v_th = 0.5;
  Tensor<double> x({1, 1}, std::vector<double>{0.5});
  EXPECT_EQ(lif_sequence(x, cfg)[0], 0.0);
}

TEST(Lif, MatchesScalarRecurrenceOnRandomDraws) {
  for (std::uint64_t c = 0; c < 300; ++c) {
    Gen g(c);
    LifConfig cfg;
    cfg.tau = g.uniform(0.05, 1.0);
    cfg.v_th = g.uniform(0.1, 2.0);
    const std::size_t t = g.index(1, 12), n = g.index(1, 6);
    auto x = g.tensor<double>({t, n}, -1.0, 2.5);
    Tensor<double> s = lif_sequence(x, t, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> xs;
      for (std::size_t k = 0; k < t; ++k) xs.push_back(x[k * n + i]);
      const auto ref = scalar_lif(xs, cfg.tau, cfg.v_th);
      for (std::size_t k = 0; k < t; ++k) ASSERT_EQ(s[k * n + i], ref[k]) << "case " << c;
    }
  }
}

TEST(Lif, MembraneIsExactlyZeroAfterASpike) {
  for (std::uint64_t c = 0; c < 100; ++c) {
    Gen g(1000 + c);
    LifConfig cfg;
    cfg.tau = g.uniform(0.05, 1.0);
    cfg.v_th = g.uniform(0.1, 1.0);
    auto state = MembraneState<float>::zeros({8});
    for (int step = 0; step < 6; ++step) {
      auto x = g.tensor<float>({8}, -0.5, 2.0);
      LifStep<float> r = lif_step(x, state, cfg);
      for (std::size_t i = 0; i < 8; ++i) {
        if (r.spikes[i] == 1.0f) {
          ASSERT_EQ(r.state.u[i], 0.0f);
        }
      }
      state = r.state;
    }
  }
}

TEST(Lif, StepCompositionMatchesSequenceForward) {
  Gen g(5);
  LifConfig cfg;
  cfg.tau = 0.8;
  auto x = g.tensor<double>({5, 7}, -1, 2);
  Tensor<double> seq = lif_sequence(x, 5, cfg);
  auto state = MembraneState<double>::zeros({1, 7});
  for (std::size_t t = 0; t < 5; ++t) {
    Tensor<double> xt({1, 7});
    std::copy_n(x.data().begin() + t * 7, 7, xt.data().begin());
    auto r = lif_step(xt, state, cfg);
    for (std::size_t i = 0; i < 7; ++i) ASSERT_EQ(r.spikes[i], seq[t * 7 + i]);
    state = r.state;
  }
}

// The fused BPTT node must give the same surrogate gradient as unrolling
// lif_step through the generic graph.
TEST(Lif, SequenceBackwardMatchesUnrolledSteps) {
  for (std::uint64_t c = 0; c < 20; ++c) {
    Gen g(40 + c);
    LifConfig cfg;
    cfg.tau = g.uniform(0.2, 1.0);
    cfg.v_th = g.uniform(0.3, 1.5);
    cfg.alpha = g.uniform(1.0, 4.0);
    const std::size_t t = g.index(1, 6), n = 5;
    auto x = g.tensor<double>({t, n}, -1, 2);
    auto w = g.tensor<double>({t, n}, -1, 1);

    Tensor<double> a = x.detach();
    a.set_requires_grad(true);
    backward(ops::sum(ops::mul(lif_sequence(a, t, cfg), w)));

    std::vector<Tensor<double>> xs;
    auto state = MembraneState<double>::zeros({1, n});
    Tensor<double> loss = Tensor<double>::scalar(0.0);
    for (std::size_t k = 0; k < t; ++k) {
      Tensor<double> xk({1, n});
      std::copy_n(x.data().begin() + k * n, n, xk.data().begin());
      xk.set_requires_grad(true);
      xs.push_back(xk);
      Tensor<double> wk({1, n});
      std::copy_n(w.data().begin() + k * n, n, wk.data().begin());
      auto r = lif_step(xk, state, cfg);
      loss = ops::add(loss, ops::reshape(ops::sum(ops::mul(r.spikes, wk)), {1}));
      state = r.state;
    }
    backward(loss);
    for (std::size_t k = 0; k < t; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        const double unrolled = xs[k].has_grad() ? xs[k].grad()[i] : 0.0;
        ASSERT_NEAR(a.grad()[k * n + i], unrolled, 1e-12) << "case " << c;
      }
  }
}

TEST(Lif, SurrogateValues) {
  LifConfig cfg;  // alpha 2
  EXPECT_DOUBLE_EQ(surrogate_derivative(cfg.v_th, cfg), 1.0);
  // (pi/2) alpha (u - v_th) = 1 gives alpha / 4
  const double u = cfg.v_th + 1.0 / (std::numbers::pi / 2.0 * cfg.alpha);
  EXPECT_NEAR(surrogate_derivative(u, cfg), 0.5, 1e-15);
  // integrates to 1 over the real line: check a wide symmetric Riemann sum
  double area = 0;
  for (double v = -2000; v < 2000; v += 0.001) area += surrogate_derivative(v, cfg) * 0.001;
  EXPECT_NEAR(area, 1.0, 1e-3);
}

TEST(Lif, SingleStepGradientIsTheSurrogate) {
  LifConfig cfg;
  Tensor<double> x({3}, std::vector<double>{0.2, 1.0, 1.7});
  x.set_requires_grad(true);
  backward(ops::sum(lif_sequence(x, 1, cfg)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], surrogate_derivative(x[i], cfg), 1e-15);
}

TEST(Lif, GradCheckExcludesNeuronsNearThreshold) {
  LifConfig cfg;
  cfg.exact_gradient = true;
  Tensor<double> x({2}, std::vector<double>{1.0005, 0.3});
  GradCheckResult r = grad_check<double>(
      [&] { return ops::sum(ops::add(lif_sequence(x, 1, cfg), ops::mul(x, x))); }, {x});
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(Lif, RejectsBadConfigAndShapes) {
  LifConfig cfg;
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = LifConfig{};
  EXPECT_THROW(lif_sequence(Tensor<double>({5, 2}), 2, cfg), ShapeError);
}

TEST(SpikeRate, CountsPerNeuronPerSequence) {
  SpikeRateRecorder rec;
  // 2 timesteps x 3 sequences of 2 neurons, 9 spikes
  Tensor<double> s({6, 2}, std::vector<double>{1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 0, 0});
  rec.record("l", s, 2);
  EXPECT_EQ(rec.stats("l").sequences, 3u);
  EXPECT_EQ(rec.stats("l").neurons, 2u);
  EXPECT_DOUBLE_EQ(rec.rate("l"), 8.0 / 6.0);  // may exceed 1 when summed over time
  rec.record("l", Tensor<double>({2, 2}), 2);
  EXPECT_DOUBLE_EQ(rec.rate("l"), 8.0 / 8.0);
  EXPECT_THROW(rec.record("l", Tensor<double>({2, 2}, 0.5), 2), std::invalid_argument);
  EXPECT_THROW(rec.rate("missing"), std::invalid_argument);
}

TEST(MsBlock, IdentityShortcutCarriesFloatingValues) {
  Rng rng(1);
  MsBlock<double> block("b", 4, 4, 1, rng);
  EXPECT_EQ(block.down_conv, nullptr);
  // zero the conv path: output must equal the input exactly
  for (auto& v : block.bn2.gamma.data()) v = 0;
  Gen g(3);
  auto x = g.tensor<double>({6, 4, 5, 5}, -2, 2);
  ForwardContext<double> ctx;
  Tensor<double> y = block.forward(x, 3, LifConfig{}, ctx);
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(MsBlock, StridedBlockProjectsTheShortcut) {
  Rng rng(2);
  MsBlock<float> block("b", 4, 8, 2, rng);
  ASSERT_NE(block.down_conv, nullptr);
  Gen g(4);
  ForwardContext<float> ctx;
  SpikeRateRecorder rec;
  ctx.spikes = &rec;
  Tensor<float> y = block.forward(g.tensor<float>({4, 4, 6, 6}), 2, LifConfig{}, ctx);
  EXPECT_EQ(y.shape(), (Shape{4, 8, 3, 3}));
  EXPECT_TRUE(rec.contains("b.lif1"));
  EXPECT_TRUE(rec.contains("b.lif2"));
  EXPECT_EQ(rec.stats("b.lif1").sequences, 2u);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fnl/diagnostics.hpp"
#include "fnl/layers.hpp"
#include "fnl/regularization.hpp"
#include "oracle.hpp"

using namespace fnl;

TEST(Trace, CsvFormat) {
  MetricTrace t;
  t.add(0, Phase::train, "loss", 0.1);
  t.add(0, Phase::eval, "accuracy", 1.0 / 3.0);
  t.add(5, Phase::train, "loss", 1e-20);
  EXPECT_EQ(t.to_csv(),
            "step,phase,metric,value\n0,train,loss,0.1\n0,eval,accuracy,0.3333333333333333\n5,train,loss,1e-20\n");
  EXPECT_EQ(MetricTrace::from_csv(t.to_csv()), t);
}

TEST(Trace, RejectsBadRows) {
  MetricTrace t;
  t.add(3, Phase::train, "loss", 1.0);
  EXPECT_THROW(t.add(2, Phase::train, "loss", 1.0), std::invalid_argument);
  EXPECT_THROW(t.add(4, Phase::train, "loss", std::nan("")), std::invalid_argument);
  EXPECT_THROW(t.add(4, Phase::train, "a,b", 1.0), std::invalid_argument);
  t.add(0, Phase::eval, "loss", 1.0);  // phases are independent
}

TEST(Trace, SeriesAndLast) {
  MetricTrace t;
  t.add(1, Phase::train, "loss", 3.0);
  t.add(2, Phase::train, "loss", 2.0);
  t.add(2, Phase::eval, "loss", 9.0);
  EXPECT_EQ(t.last(Phase::train, "loss"), 2.0);
  EXPECT_EQ(t.series(Phase::train, "loss"), (std::vector<std::pair<std::int64_t, double>>{{1, 3.0}, {2, 2.0}}));
  EXPECT_THROW(t.last(Phase::eval, "accuracy"), std::out_of_range);
}

TEST(RealFormat, ShortestRoundTrip) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<int>(rng.below(40)) - 20);
    EXPECT_EQ(parse_real(format_real(v)), v);
  }
  EXPECT_EQ(format_real(0.1), "0.1");
  EXPECT_EQ(format_real(2.0), "2");
  EXPECT_EQ(parse_real(format_real(std::numeric_limits<double>::denorm_min())), std::numeric_limits<double>::denorm_min());
  EXPECT_THROW(parse_real("1.0x"), std::invalid_argument);
}

TEST(EffectiveStepSize, Arithmetic) {
  const Tensor w({2, 2}, 1.0);  // ‖W‖² = 4
  EXPECT_DOUBLE_EQ(effective_step_size(std::vector<Tensor>{w}, 0.1), 0.025);
}

TEST(EffectiveStepSize, FactorScaling) {
  FactorizedParam fp = spectral_init(random_gaussian({5, 4}, 1.0, 1), 3);
  const double base = effective_step_size(std::vector<Tensor>{recompose(fp)}, 0.1);
  const double rho = 3.0;
  fp.u *= std::sqrt(rho);
  fp.v *= std::sqrt(rho);
  EXPECT_NEAR(effective_step_size(std::vector<Tensor>{recompose(fp)}, 0.1), base / (rho * rho), 1e-12 * base);
}

TEST(UpdateDirection, ZeroGradientKeepsDirection) {
  const Tensor u = random_gaussian({6, 3}, 1.0, 1), v = random_gaussian({4, 3}, 1.0, 2);
  const Tensor w = matmul_nt(u, v);
  const Tensor what = (1.0 / frobenius_norm(w)) * vec(w);
  EXPECT_LE(max_abs_diff(claim1_predicted_direction(u, v, Tensor({6, 4}), 0.01), what), 1e-15);
  const Claim1Fit fit = claim1_order_check(u, v, Tensor({6, 4}), std::vector<double>{1e-2, 5e-3, 2.5e-3});
  EXPECT_TRUE(fit.exact);
}

TEST(UpdateDirection, AlignedGradientAtBalancedPoint) {
  // Equal singular values: ∇̂ ∝ W, which the projector removes.
  const Tensor q = svd(random_gaussian({5, 5}, 1.0, 3), 3).left;
  FactorizedParam fp;
  fp.u = q;
  fp.v = svd(random_gaussian({4, 4}, 1.0, 4), 3).left;
  const Tensor w = recompose(fp);
  const Tensor what = (1.0 / frobenius_norm(w)) * vec(w);
  EXPECT_LE(max_abs_diff(claim1_predicted_direction(fp.u, fp.v, w, 0.01), what), 1e-12);
}

TEST(UpdateDirection, SecondOrderError) {
  const std::size_t shapes[3][3] = {{6, 4, 3}, {10, 10, 5}, {8, 3, 1}};
  const std::vector<double> lrs{1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4};
  for (const auto& s : shapes) {
    std::vector<double> slopes;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const Tensor u = random_gaussian({s[0], s[2]}, 1.0, seed), v = random_gaussian({s[1], s[2]}, 1.0, seed + 1000);
      const Tensor g = random_gaussian({s[0], s[1]}, 1.0, seed + 2000);
      const Claim1Fit fit = claim1_order_check(u, v, g, lrs);
      ASSERT_FALSE(fit.exact);
      // The fit is the least-squares slope of log e against log η.
      std::vector<double> lx, ly;
      for (std::size_t i = 0; i < lrs.size(); ++i) {
        lx.push_back(std::log(lrs[i]));
        ly.push_back(std::log(fit.errors[i]));
      }
      const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
      const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
      double num = 0, den = 0;
      for (std::size_t i = 0; i < lx.size(); ++i) {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
      }
      EXPECT_NEAR(fit.slope, num / den, 1e-12);
      slopes.push_back(fit.slope);
    }
    std::nth_element(slopes.begin(), slopes.begin() + 25, slopes.end());
    EXPECT_GE(slopes[25], 1.8);
    EXPECT_LE(slopes[25], 2.2);
  }
}

TEST(UpdateDirection, PredictedStepOrthogonalToFirstOrder) {
  const Tensor u = random_gaussian({6, 3}, 1.0, 5), v = random_gaussian({4, 3}, 1.0, 6);
  const Tensor g = random_gaussian({6, 4}, 1.0, 7);
  const Tensor w = matmul_nt(u, v);
  const Tensor what = (1.0 / frobenius_norm(w)) * vec(w);
  std::vector<double> c;
  for (double lr : {1e-2, 5e-3, 2.5e-3}) {
    const double along = std::abs(inner(what, claim1_predicted_direction(u, v, g, lr) - what));
    c.push_back(along / (lr * lr));
  }
  // The projector removes the first-order component, so what remains is at most O(η²).
  for (double ci : c) EXPECT_LE(ci, c[0] * 2 + 1e-9);
}

TEST(NormMatching, RescaleHitsTargetAndKeepsOutputs) {
  FactorizedParam fp = spectral_init(random_gaussian({4, 6}, 1.0, 1), 3);
  const Tensor x = random_gaussian({16, 6}, 10.0, 2);
  const Tensor gamma({4}, 1.0), beta({4});
  const Tensor before = norm_layer_forward(recompose(fp), x, gamma, beta);
  const double target = 2.5 * frobenius_norm(recompose(fp));
  rescale_to_norm(fp, target);
  EXPECT_NEAR(frobenius_norm(recompose(fp)), target, 1e-10);
  EXPECT_LE(max_abs_diff(norm_layer_forward(recompose(fp), x, gamma, beta), before), 1e-6);
  FactorizedParam zero = fp;
  zero.u.fill(0.0);
  EXPECT_THROW(rescale_to_norm(zero, 1.0), std::invalid_argument);
}

TEST(NuclearTrace, CoincidesAtSpectralInit) {
  const FactorizedParam a = spectral_init(random_gaussian({6, 5}, 1.0, 1), 2);
  const FactorizedParam b = spectral_init(random_gaussian({4, 7}, 1.0, 2), 3);
  const std::vector<const FactorizedParam*> ls{&a, &b};
  const NuclearStats s = nuclear_trace(ls);
  EXPECT_NEAR(s.nuclear_mean, s.bound_mean, 1e-8);
  EXPECT_NEAR(s.nuclear_mean, 0.5 * (oracle::nuclear(recompose(a)) + oracle::nuclear(recompose(b))), 1e-9);
}

TEST(NuclearTrace, BoundDominates) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    FactorizedParam a = default_factor_init(5, 4, 3, 0, seed);
    const std::vector<const FactorizedParam*> ls{&a};
    const NuclearStats s = nuclear_trace(ls);
    EXPECT_GE(s.bound_mean - s.nuclear_mean, -1e-9);
  }
}

namespace {

BoundInputs stack(std::size_t layers, std::uint64_t seed) {
  BoundInputs in;
  for (std::size_t i = 0; i < layers; ++i) in.weights.push_back(random_gaussian({5, 5}, 0.5, seed + i));
  in.margin = 0.7;
  in.data_bound = 2.0;
  in.samples = 1000;
  in.width = 5;
  return in;
}

}  // namespace

TEST(Bounds, ZeroWeightsLeaveConfidenceTerm) {
  BoundInputs in = stack(3, 1);
  for (auto& w : in.weights) w.fill(0.0);
  const double want = std::sqrt(std::log(3.0 * 1000 / 0.01) / (0.49 * 1000));
  EXPECT_NEAR(cor1_bound(in, 4), want, 1e-14);
  EXPECT_NEAR(cor2_bound(in), want, 1e-14);
}

TEST(Bounds, RankTermMonotone) {
  const BoundInputs in = stack(3, 2);
  double prev = 0.0;
  for (std::size_t r = 1; r <= 5; ++r) {
    const double b = cor1_bound(in, r);
    EXPECT_GE(b, prev);
    prev = b;
  }
}

TEST(Bounds, FrobeniusFormulaTwoLayers) {
  const BoundInputs in = stack(2, 3);
  const auto s0 = oracle::singular_values(in.weights[0]), s1 = oracle::singular_values(in.weights[1]);
  const double sigma = std::max(s0[0], s1[0]);
  const double L = 2, m = 5, B = 2, S = 1000, g = 0.7;
  const double fro = oracle::sumsq(in.weights[0]) + oracle::sumsq(in.weights[1]);
  const double want =
      std::sqrt((B * B * L * L * m * std::pow(sigma, 2 * L - 2) * std::log(L * m) * fro + std::log(L * S / 0.01)) / (g * g * S));
  EXPECT_NEAR(cor2_bound(in), want, 1e-8 * want);
  const double prod = s0[0] * s0[0] * s1[0] * s1[0];
  const double want1 =
      std::sqrt((B * B * L * L * L * m * std::pow(sigma, 2 * L) * 3 * std::log(L * m) * prod + std::log(L * S / 0.01)) / (g * g * S));
  EXPECT_NEAR(cor1_bound(in, 3), want1, 1e-8 * want1);  // σ from power iteration
}

TEST(Bounds, ProductSumIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const BoundInputs in = stack(4, seed * 10);
    const auto [lhs, rhs] = cor2_identity_sides(in.weights);
    EXPECT_NEAR(lhs, rhs, 1e-10 * rhs);
  }
}

TEST(Bounds, PermutationInvariant) {
  BoundInputs in = stack(4, 7);
  const double a = cor1_bound(in, 2), b = cor2_bound(in);
  std::reverse(in.weights.begin(), in.weights.end());
  EXPECT_NEAR(cor1_bound(in, 2), a, 1e-12 * a);
  EXPECT_NEAR(cor2_bound(in), b, 1e-12 * b);
}

TEST(Bounds, MarginMustBePositive) {
  BoundInputs in = stack(2, 1);
  in.margin = 0.0;
  EXPECT_THROW(cor2_bound(in), std::invalid_argument);
}

TEST(MarginLoss, ZeroMarginIsClassificationError) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor s = random_gaussian({64, 5}, 1.0, seed);
    std::vector<int> y(64);
    Rng rng(seed);
    for (auto& v : y) v = static_cast<int>(rng.below(5));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      bool best = true;
      for (std::size_t j = 0; j < 5; ++j) {
        if (j != static_cast<std::size_t>(y[i]) && s(i, j) >= s(i, y[i])) best = false;
      }
      correct += best;
    }
    EXPECT_EQ(margin_loss(s, y, 0.0), 1.0 - static_cast<double>(correct) / 64.0);
  }
}

TEST(MarginLoss, MonotoneAndSaturates) {
  const Tensor s = random_gaussian({50, 4}, 1.0, 3);
  std::vector<int> y(50, 1);
  double prev = 0.0;
  for (double g : {0.0, 0.1, 0.5, 1.0, 2.0, 5.0}) {
    const double l = margin_loss(s, y, g);
    EXPECT_GE(l, prev);
    prev = l;
  }
  EXPECT_EQ(margin_loss(s, y, 1e9), 1.0);
  EXPECT_THROW(margin_loss(s, y, -1.0), std::invalid_argument);
}

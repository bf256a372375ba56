#include <gtest/gtest.h>

#include <cmath>

#include "fnl/optimizers.hpp"
#include "oracle.hpp"

using namespace fnl;

TEST(Sgd, PlainStep) {
  Tensor w = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor g = Tensor::from_rows({{1, -1}, {0.5, 2}});
  Tensor buf = Tensor::zeros_like(w);
  sgd_step(w, g, buf, 0.1, 0.0);
  EXPECT_EQ(w, Tensor::from_rows({{1 - 0.1 * 1, 2 - 0.1 * -1}, {3 - 0.1 * 0.5, 4 - 0.1 * 2}}));
}

TEST(Sgd, QuadraticBowlContracts) {
  Tensor w = random_gaussian({3, 3}, 1.0, 1);
  const Tensor w0 = w;
  Tensor buf = Tensor::zeros_like(w);
  const double lr = 0.2;
  for (int t = 1; t <= 5; ++t) {
    sgd_step(w, w, buf, lr, 0.0);
    EXPECT_LE(max_abs_diff(w, std::pow(1 - lr, t) * w0), 1e-15);
  }
}

TEST(Sgd, MomentumTwoStepsByHand) {
  const double lr = 0.1, mu = 0.9;
  Tensor w = Tensor::from_rows({{1.0, -2.0}});
  const Tensor g1 = Tensor::from_rows({{0.5, 0.25}}), g2 = Tensor::from_rows({{-1.0, 2.0}});
  Tensor buf = Tensor::zeros_like(w);
  sgd_step(w, g1, buf, lr, mu);
  sgd_step(w, g2, buf, lr, mu);
  for (std::size_t i = 0; i < 2; ++i) {
    const double b1 = g1[i], b2 = mu * b1 + g2[i];
    const double want = (i == 0 ? 1.0 : -2.0) - lr * b1 - lr * b2;
    EXPECT_NEAR(w[i], want, 1e-12);
  }
}

TEST(Lamb, NoHistoryNoDecayNoUpdate) {
  Tensor p = random_gaussian({2, 2}, 1.0, 1);
  const Tensor p0 = p;
  MomentBuffers mb = MomentBuffers::zeros_like(p);
  lamb_step(p, Tensor::zeros_like(p), mb, 1, 0.01, 0.0, {});
  EXPECT_EQ(p, p0);
}

TEST(Lamb, PureDecayShrinks) {
  Tensor p = random_gaussian({2, 2}, 1.0, 1);
  MomentBuffers mb = MomentBuffers::zeros_like(p);
  double prev = frobenius_norm(p);
  for (int t = 1; t <= 20; ++t) {
    lamb_step(p, Tensor::zeros_like(p), mb, t, 0.01, 0.1, {});
    const double now = frobenius_norm(p);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Lamb, SingleStepByHand) {
  const LambConfig cfg{0.9, 0.999, 1e-6, 10.0};
  const double lr = 0.01, lambda = 0.05;
  const double p0[4] = {0.5, -1.0, 2.0, 0.25}, g[4] = {0.1, 0.2, -0.3, 0.0};
  Tensor p({2, 2}, std::vector<double>(p0, p0 + 4));
  MomentBuffers mb = MomentBuffers::zeros_like(p);
  lamb_step(p, Tensor({2, 2}, std::vector<double>(g, g + 4)), mb, 1, lr, lambda, cfg);
  double u[4], pn = 0, un = 0;
  for (int i = 0; i < 4; ++i) {
    const double m = (1 - cfg.beta1) * g[i] / (1 - cfg.beta1);
    const double v = (1 - cfg.beta2) * g[i] * g[i] / (1 - cfg.beta2);
    u[i] = m / (std::sqrt(v) + cfg.eps) + lambda * p0[i];
    pn += p0[i] * p0[i];
    un += u[i] * u[i];
  }
  const double phi = std::min(std::sqrt(pn) / std::sqrt(un), cfg.max_trust);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], p0[i] - lr * phi * u[i], 1e-12);
}

TEST(Lamb, TrustRatioScaleConsistent) {
  const double rho = 3.0;
  Tensor p = random_gaussian({3, 3}, 1.0, 1), g = random_gaussian({3, 3}, 1.0, 2);
  MomentBuffers mb = MomentBuffers::zeros_like(p);
  Tensor q = rho * p;
  MomentBuffers mq = MomentBuffers::zeros_like(q);
  const Tensor p0 = p, q0 = q;
  // Moments built from ρ·g are the scaled moments; Adam's direction is unchanged with eps 0.
  lamb_step(p, g, mb, 1, 0.01, 0.0, {0.9, 0.999, 0.0, 10.0});
  lamb_step(q, rho * g, mq, 1, 0.01, 0.0, {0.9, 0.999, 0.0, 10.0});
  EXPECT_LE(max_abs_diff(q - q0, rho * (p - p0)), 1e-14 * frobenius_norm(q0));
}

TEST(Lamb, TrustRatioEdges) {
  EXPECT_EQ(trust_ratio(0.0, 1.0, 10.0), 1.0);
  EXPECT_EQ(trust_ratio(1.0, 0.0, 10.0), 1.0);
  EXPECT_EQ(trust_ratio(100.0, 1.0, 10.0), 10.0);
  EXPECT_EQ(trust_ratio(1.0, 4.0, 10.0), 0.25);
}

namespace {

FactorizedParam balanced(std::size_t m, std::size_t n, std::size_t r, std::uint64_t seed) {
  return spectral_init(random_gaussian({m, n}, 1.0, seed), r);
}

}  // namespace

TEST(Flambe, ZeroLambdaIsLambBitwise) {
  FactorizedParam a = balanced(6, 5, 3, 1), b = a;
  FactorMoments ma = FactorMoments::zeros_like(a);
  MomentBuffers mu = MomentBuffers::zeros_like(b.u), mv = MomentBuffers::zeros_like(b.v);
  for (int t = 1; t <= 10; ++t) {
    FactorGrads g{random_gaussian({6, 3}, 1.0, 100 + t), {}, random_gaussian({5, 3}, 1.0, 200 + t)};
    flambe_step(a, g, ma, t, 0.01, 0.0, {});
    lamb_step(b.u, g.u, mu, t, 0.01, 0.0, {});
    lamb_step(b.v, g.v, mv, t, 0.01, 0.0, {});
    ASSERT_EQ(a.u, b.u);
    ASSERT_EQ(a.v, b.v);
  }
}

TEST(Flambe, DecayOnlyShrinksProductNorm) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FactorizedParam fp = balanced(6, 5, 3, seed);
    FactorMoments mb = FactorMoments::zeros_like(fp);
    const FactorGrads zero = FactorGrads::zeros_like(fp);
    double prev = frobenius_norm(recompose(fp));
    for (int t = 1; t <= 100; ++t) {
      flambe_step(fp, zero, mb, t, 0.01, 0.5, {});
      const double now = frobenius_norm(recompose(fp));
      EXPECT_LE(now, prev);
      prev = now;
    }
  }
}

TEST(Flambe, OrthonormalRightFactorMatchesLambOnLeft) {
  FactorizedParam fp;
  fp.u = random_gaussian({4, 3}, 1.0, 1);
  fp.v = svd(random_gaussian({5, 3}, 1.0, 2), 3).left;  // orthonormal columns
  // VᵀV = I up to rounding, so the decay terms agree to rounding.
  const FactorGrads fd = fd_gradients(fp, 0.2);
  EXPECT_LE(max_abs_diff(fd.u, 0.2 * fp.u), 1e-14);
  Tensor lu = fp.u;
  MomentBuffers mu = MomentBuffers::zeros_like(lu);
  FactorMoments mb = FactorMoments::zeros_like(fp);
  const Tensor g = random_gaussian({4, 3}, 1.0, 3);
  flambe_step(fp, {g, {}, Tensor::zeros_like(fp.v)}, mb, 1, 0.01, 0.2, {});
  lamb_step(lu, g, mu, 1, 0.01, 0.2, {});
  EXPECT_LE(max_abs_diff(fp.u, lu), 1e-14);
}

TEST(Schedule, StepDecay) {
  LrSchedule s{LrSchedule::Kind::step_decay, 0.1, {10, 20}, 0};
  for (std::int64_t t = 1; t <= 30; ++t) {
    const double want = 0.1 * (t > 10 ? 0.1 : 1.0) * (t > 20 ? 0.1 : 1.0);
    EXPECT_DOUBLE_EQ(s.at(t), want) << t;
  }
  EXPECT_EQ(s.at(5), 0.1);
}

TEST(Schedule, Warmup) {
  LrSchedule s{LrSchedule::Kind::warmup_const, 0.2, {}, 10};
  EXPECT_DOUBLE_EQ(s.at(5), 0.1);
  for (std::int64_t t = 1; t <= 30; ++t) EXPECT_DOUBLE_EQ(s.at(t), 0.2 * std::min(1.0, t / 10.0));
}

TEST(Schedule, Names) {
  EXPECT_EQ(lr_kind_from_string(to_string(LrSchedule::Kind::warmup_const)), LrSchedule::Kind::warmup_const);
  EXPECT_THROW(lr_kind_from_string("cosine"), std::invalid_argument);
}

// ---------------------------------------------------------------------------

namespace {

struct Toy {
  Tensor dense, dense_grad;
  FactorizedParam fp;
  FactorGrads fg;

  explicit Toy(std::uint64_t seed)
      : dense(random_gaussian({3, 2}, 1.0, seed)),
        dense_grad(random_gaussian({3, 2}, 1.0, seed + 1)),
        fp(balanced(5, 4, 2, seed + 2)),
        fg{random_gaussian({5, 2}, 1.0, seed + 3), {}, random_gaussian({4, 2}, 1.0, seed + 4)} {}

  ParamSet params() { return {{{"d", &dense, &dense_grad}}, {{"f", &fp, &fg, FactorRole::layer}}}; }
};

}  // namespace

TEST(Optimizer, SgdCouplesFrobeniusDecay) {
  Toy a(1), b(1);
  Optimizer opt({OptimizerKind::sgd, 0.0, {}, 0.0}, {DecayMode::fd, 0.1, MhaTarget::ov_only});
  opt.step(a.params(), 0.05);
  const FactorGrads fd = fd_gradients(b.fp, 0.1);
  EXPECT_LE(max_abs_diff(a.fp.u, b.fp.u - 0.05 * (b.fg.u + fd.u)), 1e-15);
  EXPECT_LE(max_abs_diff(a.dense, b.dense - 0.05 * (b.dense_grad + 0.1 * b.dense)), 1e-15);
}

TEST(Optimizer, CompressionScaledLambda) {
  Optimizer opt({}, {DecayMode::crs, 0.01, MhaTarget::ov_only}, 0.25);
  EXPECT_DOUBLE_EQ(opt.effective_lambda(), 0.0025);
  EXPECT_EQ(Optimizer({}, {DecayMode::none, 0.01, MhaTarget::ov_only}).effective_lambda(), 0.0);
}

TEST(Optimizer, FlambeEqualsLambAtZeroLambda) {
  Toy a(4), b(4);
  Optimizer fl({OptimizerKind::flambe, 0.9, {}, 0.0}, {DecayMode::wd, 0.0, MhaTarget::ov_only});
  Optimizer la({OptimizerKind::lamb, 0.9, {}, 0.0}, {DecayMode::wd, 0.0, MhaTarget::ov_only});
  for (int t = 0; t < 5; ++t) {
    fl.step(a.params(), 0.01);
    la.step(b.params(), 0.01);
  }
  EXPECT_EQ(a.fp.u, b.fp.u);
  EXPECT_EQ(a.fp.v, b.fp.v);
  EXPECT_EQ(a.dense, b.dense);
}

TEST(Optimizer, FlambeUsesFrobeniusTermInTrustRatio) {
  Toy a(5), b(5);
  Optimizer fl({OptimizerKind::flambe, 0.9, {}, 0.0}, {DecayMode::wd, 0.1, MhaTarget::ov_only});
  fl.step(a.params(), 0.01);
  FactorMoments mb = FactorMoments::zeros_like(b.fp);
  flambe_step(b.fp, b.fg, mb, 1, 0.01, 0.1, {});
  EXPECT_EQ(a.fp.u, b.fp.u);
  EXPECT_EQ(a.fp.v, b.fp.v);
}

TEST(Optimizer, CoupledFrobeniusDescendsPenalty) {
  FactorizedParam fp = balanced(6, 5, 3, 9);
  FactorGrads zero = FactorGrads::zeros_like(fp);
  Optimizer opt({OptimizerKind::sgd, 0.0, {}, 0.0}, {DecayMode::fd, 1.0, MhaTarget::ov_only});
  for (int t = 0; t < 50; ++t) {
    const FactorizedParam before = fp;
    opt.step({{}, {{"f", &fp, &zero, FactorRole::layer}}}, 0.01);
    // Directional derivative of the penalty along the update, by central differences.
    auto penalty_at = [&](double s) {
      FactorizedParam q = before;
      q.u.axpy(s, fp.u - before.u);
      q.v.axpy(s, fp.v - before.v);
      return fd_penalty(q, 1.0);
    };
    EXPECT_LT((penalty_at(1e-4) - penalty_at(-1e-4)) / 2e-4, 0.0);
  }
}

TEST(Optimizer, AttentionQueryKeyTargeting) {
  Toy a(6), b(6);
  auto set = [](Toy& t) { return ParamSet{{}, {{"qk", &t.fp, &t.fg, FactorRole::attention_qk}}}; };
  Optimizer ov({OptimizerKind::sgd, 0.0, {}, 0.0}, {DecayMode::fd, 0.1, MhaTarget::ov_only});
  Optimizer both({OptimizerKind::sgd, 0.0, {}, 0.0}, {DecayMode::fd, 0.1, MhaTarget::ov_and_qk});
  const Toy ref(6);
  ov.step(set(a), 0.1);
  both.step(set(b), 0.1);
  // ov_only decays untargeted forms factor-wise.
  EXPECT_LE(max_abs_diff(a.fp.u, ref.fp.u - 0.1 * (ref.fg.u + 0.1 * ref.fp.u)), 1e-15);
  EXPECT_LE(max_abs_diff(b.fp.u, ref.fp.u - 0.1 * (ref.fg.u + fd_gradients(ref.fp, 0.1).u)), 1e-15);
}

TEST(Optimizer, ClipsGlobalNorm) {
  Tensor p({2}, 0.0), g = Tensor({2}, std::vector<double>{3, 4});
  Optimizer opt({OptimizerKind::sgd, 0.0, {}, 1.0}, {});
  opt.step({{{"p", &p, &g}}, {}}, 1.0);
  EXPECT_NEAR(p[0], -0.6, 1e-15);
  EXPECT_NEAR(p[1], -0.8, 1e-15);
}

TEST(Optimizer, RejectsBadSettings) {
  EXPECT_THROW(Optimizer({OptimizerKind::sgd, 1.0, {}, 0.0}, {}), std::invalid_argument);
  EXPECT_THROW(Optimizer({}, {}, 0.0), std::invalid_argument);
  EXPECT_THROW(optimizer_kind_from_string("adam"), std::invalid_argument);
}

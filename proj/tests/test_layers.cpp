#include <gtest/gtest.h>

#include <cmath>

#include "fnl/layers.hpp"
#include "oracle.hpp"

using namespace fnl;

namespace {

// Scalar loss Σ y ⊙ R for a fixed random R.
double project(const Tensor& y, const Tensor& r) { return inner(y, r); }

}  // namespace

TEST(Fc, IdentityWeight) {
  const Tensor x = random_gaussian({4, 3}, 1.0, 1);
  EXPECT_EQ(fc_forward(Tensor::identity(3), x), x);
}

TEST(Fc, ZeroBatch) {
  const Tensor w = random_gaussian({2, 3}, 1.0, 1);
  const Tensor x({4, 3});
  EXPECT_EQ(fc_forward(w, x), Tensor({4, 2}));
  EXPECT_EQ(fc_backward(w, x, random_gaussian({4, 2}, 1.0, 2)).dw, Tensor({2, 3}));
}

TEST(Fc, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor w = random_gaussian({4, 5}, 1.0, seed);
    Tensor x = random_gaussian({3, 5}, 1.0, seed + 50);
    const Tensor r = random_gaussian({3, 4}, 1.0, seed + 99);
    const FcGrads g = fc_backward(w, x, r);
    auto f = [&] { return project(fc_forward(w, x), r); };
    EXPECT_LE(oracle::rel_error(g.dw, oracle::numeric_grad(f, w)), 1e-6);
    EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-6);
  }
}

TEST(FactorizedFc, EqualsDenseProduct) {
  const Tensor u = random_gaussian({4, 2}, 1.0, 1), v = random_gaussian({5, 2}, 1.0, 2);
  const Tensor x = random_gaussian({3, 5}, 1.0, 3);
  EXPECT_LE(max_abs_diff(factorized_fc_forward(u, v, x), fc_forward(oracle::naive_matmul(u, transpose(v)), x)), 1e-12);
}

TEST(FactorizedFc, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor u = random_gaussian({4, 2}, 1.0, seed), v = random_gaussian({5, 2}, 1.0, seed + 1);
    Tensor x = random_gaussian({3, 5}, 1.0, seed + 2);
    const Tensor r = random_gaussian({3, 4}, 1.0, seed + 3);
    const FactorPairGrads g = factorized_fc_backward(u, v, x, r);
    auto f = [&] { return project(factorized_fc_forward(u, v, x), r); };
    EXPECT_LE(oracle::rel_error(g.dleft, oracle::numeric_grad(f, u)), 1e-6);
    EXPECT_LE(oracle::rel_error(g.dright, oracle::numeric_grad(f, v)), 1e-6);
    EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-6);
  }
}

TEST(Conv, UnitKernelIsIdentity) {
  const Tensor x = random_gaussian({2, 1, 5, 5}, 1.0, 1);
  EXPECT_EQ(conv2d_forward(Tensor({1, 1, 1, 1}, 1.0), x), x);
}

TEST(Conv, ZeroKernel) {
  const Tensor x = random_gaussian({2, 3, 5, 5}, 1.0, 1);
  EXPECT_EQ(conv2d_forward(Tensor({4, 3, 3, 3}), x), Tensor({2, 4, 5, 5}));
}

TEST(Conv, MatchesDirectLoop) {
  for (std::size_t stride : {1u, 2u}) {
    const Tensor k = random_gaussian({4, 3, 3, 3}, 1.0, stride);
    const Tensor x = random_gaussian({2, 3, 7, 6}, 1.0, 10 + stride);
    EXPECT_LE(max_abs_diff(conv2d_forward(k, x, stride), oracle::direct_conv(k, x, stride)), 1e-12);
  }
}

TEST(Conv, EvenKernelRejected) {
  EXPECT_THROW(conv2d_forward(Tensor({1, 1, 2, 2}), Tensor({1, 1, 4, 4})), std::invalid_argument);
}

TEST(Conv, GradientsMatchFiniteDifferences) {
  for (std::size_t stride : {1u, 2u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor k = random_gaussian({2, 3, 3, 3}, 1.0, seed);
      Tensor x = random_gaussian({2, 3, 5, 5}, 1.0, seed + 1);
      const std::size_t o = conv_output_size(5, 3, stride);
      const Tensor r = random_gaussian({2, 2, o, o}, 1.0, seed + 2);
      const ConvGrads g = conv2d_backward(k, x, r, stride);
      auto f = [&] { return project(conv2d_forward(k, x, stride), r); };
      EXPECT_LE(oracle::rel_error(g.dkernel, oracle::numeric_grad(f, k)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-5);
    }
  }
}

TEST(Conv, KernelMatrixRoundTrip) {
  const Tensor k = random_gaussian({4, 3, 5, 5}, 1.0, 1);
  const Tensor m = conv_kernel_to_matrix(k);
  EXPECT_EQ(m.shape(), (Shape{20, 15}));
  // Row (o, kh), column (c, kw).
  EXPECT_EQ(m(2 * 5 + 1, 1 * 5 + 3), k[((2 * 3 + 1) * 5 + 1) * 5 + 3]);
  EXPECT_EQ(matrix_to_conv_kernel(m, 4, 3, 5), k);
}

TEST(FactorizedConv, EqualsReshapedDirectConv) {
  const std::size_t shapes[3][3] = {{4, 3, 3}, {8, 8, 3}, {6, 4, 5}};
  for (const auto& s : shapes) {
    const std::size_t co = s[0], ci = s[1], k = s[2];
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      for (std::size_t r : {std::size_t{1}, ci * k}) {
        const Tensor u = random_gaussian({co * k, r}, 1.0, seed), v = random_gaussian({ci * k, r}, 1.0, seed + 7);
        const Tensor x = random_gaussian({2, ci, 7, 7}, 1.0, seed + 9);
        const Tensor kern = matrix_to_conv_kernel(oracle::naive_matmul(u, transpose(v)), co, ci, k);
        for (std::size_t stride : {1u, 2u}) {
          EXPECT_LE(max_abs_diff(factorized_conv_forward(u, v, x, k, stride), oracle::direct_conv(kern, x, stride)), 1e-10);
        }
      }
    }
  }
}

TEST(FactorizedConv, ZeroRightFactor) {
  const Tensor u = random_gaussian({9, 2}, 1.0, 1);
  const Tensor x = random_gaussian({1, 2, 5, 5}, 1.0, 2);
  EXPECT_EQ(factorized_conv_forward(u, Tensor({6, 2}), x, 3), Tensor({1, 3, 5, 5}));
}

TEST(FactorizedConv, ParameterCountBelowDenseUnderThreshold) {
  const std::size_t co = 16, ci = 8, k = 3;
  for (std::size_t r = 1; r < k * co * ci / (co + ci); ++r) EXPECT_LT(k * r * (co + ci), k * k * co * ci);
}

TEST(FactorizedConv, GradientsMatchFiniteDifferences) {
  for (std::size_t stride : {1u, 2u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor u = random_gaussian({6, 2}, 1.0, seed), v = random_gaussian({9, 2}, 1.0, seed + 1);
      Tensor x = random_gaussian({2, 3, 5, 5}, 1.0, seed + 2);
      const std::size_t o = conv_output_size(5, 3, stride);
      const Tensor r = random_gaussian({2, 2, o, o}, 1.0, seed + 3);
      const FactorPairGrads g = factorized_conv_backward(u, v, x, r, 3, stride);
      auto f = [&] { return project(factorized_conv_forward(u, v, x, 3, stride), r); };
      EXPECT_LE(oracle::rel_error(g.dleft, oracle::numeric_grad(f, u)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.dright, oracle::numeric_grad(f, v)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-5);
    }
  }
}

TEST(NormLayer, ScaleInvariant) {
  const Tensor w = random_gaussian({4, 6}, 1.0, 1), x = random_gaussian({16, 6}, 2.0, 2);
  const Tensor gamma({4}, 1.5), beta({4}, 0.2);
  const Tensor y = norm_layer_forward(w, x, gamma, beta);
  const Tensor y7 = norm_layer_forward(7.0 * w, x, gamma, beta);
  EXPECT_LE(frobenius_norm(y7 - y), 1e-6 * frobenius_norm(y));
}

TEST(NormLayer, StandardizedStatistics) {
  const Tensor x = random_gaussian({32, 5}, 3.0, 4);
  Tensor rm({5}), rv({5}, 1.0);
  const Tensor y = batch_norm_forward(x, Tensor({5}, 1.0), Tensor({5}), rm, rv, true, nullptr);
  for (std::size_t c = 0; c < 5; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 32; ++i) m += y(i, c);
    m /= 32;
    for (std::size_t i = 0; i < 32; ++i) v += (y(i, c) - m) * (y(i, c) - m);
    v /= 32;
    EXPECT_LE(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-4);  // epsilon-limited
  }
}

TEST(NormLayer, SingleSampleTrainingRejected) {
  Tensor rm({2}), rv({2}, 1.0);
  EXPECT_THROW(batch_norm_forward(Tensor({1, 2}), Tensor({2}, 1.0), Tensor({2}), rm, rv, true, nullptr),
               std::invalid_argument);
}

TEST(NormLayer, ArgmaxInvariantUnderRescale) {
  const Tensor w = random_gaussian({4, 6}, 1.0, 1), head = random_gaussian({3, 4}, 1.0, 2);
  const Tensor x = random_gaussian({20, 6}, 1.0, 3);
  const Tensor gamma({4}, 1.0), beta({4});
  auto labels = [&](double rho) {
    const Tensor s = fc_forward(head, norm_layer_forward(rho * w, x, gamma, beta));
    std::vector<int> out;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      int best = 0;
      for (int j = 1; j < 3; ++j) {
        if (s(i, j) > s(i, best)) best = j;
      }
      out.push_back(best);
    }
    return out;
  };
  EXPECT_EQ(labels(0.1), labels(1.0));
  EXPECT_EQ(labels(10.0), labels(1.0));
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_gaussian({4, 3, 2, 2}, 1.0, seed);
    Tensor gamma = random_gaussian({3}, 1.0, seed + 1), beta = random_gaussian({3}, 1.0, seed + 2);
    const Tensor r = random_gaussian({4, 3, 2, 2}, 1.0, seed + 3);
    auto f = [&] {
      Tensor rm({3}), rv({3}, 1.0);
      return project(batch_norm_forward(x, gamma, beta, rm, rv, true, nullptr), r);
    };
    Tensor rm({3}), rv({3}, 1.0);
    NormCache cache;
    batch_norm_forward(x, gamma, beta, rm, rv, true, &cache);
    const NormGrads g = batch_norm_backward(r, gamma, cache);
    EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-5);
    EXPECT_LE(oracle::rel_error(g.dgamma, oracle::numeric_grad(f, gamma)), 1e-5);
    EXPECT_LE(oracle::rel_error(g.dbeta, oracle::numeric_grad(f, beta)), 1e-5);
  }
}

TEST(CrossEntropy, UniformLogits) {
  const LossAndGrad lg = softmax_cross_entropy(Tensor({3, 4}), std::vector<int>{0, 1, 3});
  EXPECT_NEAR(lg.loss, std::log(4.0), 1e-15);
}

TEST(CrossEntropy, GradientRowsSumToZero) {
  const LossAndGrad lg = softmax_cross_entropy(random_gaussian({5, 4}, 3.0, 1), std::vector<int>{0, 1, 2, 3, 0});
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += lg.grad(i, j);
    EXPECT_LE(std::abs(s), 1e-12);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  const std::vector<int> y{2, 0, 1};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor z = random_gaussian({3, 3}, 2.0, seed);
    const Tensor g = softmax_cross_entropy(z, y).grad;
    EXPECT_LE(oracle::rel_error(g, oracle::numeric_grad([&] { return softmax_cross_entropy(z, y).loss; }, z)), 1e-7);
  }
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 3}), std::vector<int>{3}), std::out_of_range);
}

TEST(CrossEntropy, StableForLargeLogits) {
  const LossAndGrad lg = softmax_cross_entropy(Tensor::from_rows({{1000, 0}}), std::vector<int>{1});
  EXPECT_NEAR(lg.loss, 1000.0, 1e-9);
}

TEST(Attention, ZeroQueryKeyIsUniformAverage) {
  const std::size_t t = 5, d = 4, r = 2;
  AttentionHead h{Tensor({d, r}), Tensor({d, r}), random_gaussian({d, r}, 1.0, 1), random_gaussian({d, r}, 1.0, 2)};
  const Tensor x = random_gaussian({t, d}, 1.0, 3);
  const Tensor y = mha_forward(std::vector<AttentionHead>{h}, x);
  const Tensor xvo = oracle::naive_matmul(oracle::naive_matmul(x, h.v), transpose(h.o));
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < t; ++i) mean += xvo(i, j) / t;
    for (std::size_t i = 0; i < t; ++i) EXPECT_NEAR(y(i, j), mean, 1e-12);
  }
}

TEST(Attention, MatchesClosedForm) {
  const std::size_t t = 5, d = 8, heads = 2, r = d / heads;
  std::vector<AttentionHead> hs;
  for (std::size_t h = 0; h < heads; ++h) {
    hs.push_back({random_gaussian({d, r}, 0.5, 4 * h), random_gaussian({d, r}, 0.5, 4 * h + 1),
                  random_gaussian({d, r}, 0.5, 4 * h + 2), random_gaussian({d, r}, 0.5, 4 * h + 3)});
  }
  const Tensor x = random_gaussian({t, d}, 1.0, 99);
  MhaCache cache;
  const Tensor y = mha_forward(hs, x, &cache);
  const oracle::Mat xe = oracle::to_eigen(x);
  oracle::Mat want = oracle::Mat::Zero(t, d);
  for (std::size_t h = 0; h < heads; ++h) {
    oracle::Mat s = xe * oracle::to_eigen(hs[h].q) * oracle::to_eigen(hs[h].k).transpose() * xe.transpose() / std::sqrt(double(r));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      s.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
      s.row(i) /= s.row(i).sum();
      EXPECT_NEAR(s.row(i).sum(), 1.0, 1e-12);
    }
    want += s * xe * oracle::to_eigen(hs[h].v) * oracle::to_eigen(hs[h].o).transpose();
  }
  EXPECT_LE(max_abs_diff(y, oracle::from_eigen(want)), 1e-12);
  for (const Tensor& p : cache.probs) {
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < p.cols(); ++j) s += p(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  const std::size_t t = 5, d = 8, heads = 2, r = 4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<AttentionHead> hs;
    for (std::size_t h = 0; h < heads; ++h) {
      hs.push_back({random_gaussian({d, r}, 0.5, seed * 10 + 4 * h), random_gaussian({d, r}, 0.5, seed * 10 + 4 * h + 1),
                    random_gaussian({d, r}, 0.5, seed * 10 + 4 * h + 2), random_gaussian({d, r}, 0.5, seed * 10 + 4 * h + 3)});
    }
    Tensor x = random_gaussian({t, d}, 1.0, seed + 1000);
    const Tensor rr = random_gaussian({t, d}, 1.0, seed + 2000);
    MhaCache cache;
    mha_forward(hs, x, &cache);
    const MhaGrads g = mha_backward(hs, cache, rr);
    auto f = [&] { return project(mha_forward(hs, x), rr); };
    for (std::size_t h = 0; h < heads; ++h) {
      EXPECT_LE(oracle::rel_error(g.heads[h].q, oracle::numeric_grad(f, hs[h].q)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.heads[h].k, oracle::numeric_grad(f, hs[h].k)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.heads[h].v, oracle::numeric_grad(f, hs[h].v)), 1e-5);
      EXPECT_LE(oracle::rel_error(g.heads[h].o, oracle::numeric_grad(f, hs[h].o)), 1e-5);
    }
    EXPECT_LE(oracle::rel_error(g.dx, oracle::numeric_grad(f, x)), 1e-5);
  }
}

TEST(Attention, DimensionMismatchRejected) {
  AttentionHead h{Tensor({4, 2}), Tensor({4, 2}), Tensor({4, 2}), Tensor({4, 2})};
  EXPECT_THROW(mha_forward(std::vector<AttentionHead>{h}, Tensor({3, 5})), ShapeError);
}

TEST(FiniteDiff, LinearModelIsExact) {
  Tensor w = random_gaussian({3, 4}, 1.0, 1);
  const Tensor x = random_gaussian({4, 4}, 1.0, 2);
  const Tensor r = random_gaussian({4, 3}, 1.0, 3);
  const Tensor g = fc_backward(w, x, r).dw;
  EXPECT_LT(finite_diff_check([&] { return project(fc_forward(w, x), r); }, w, g, 1e-5), 1e-9);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  Tensor w = random_gaussian({2, 2}, 1.0, 1);
  const Tensor wrong = 2.0 * w;
  EXPECT_GT(finite_diff_check([&] { return 0.5 * oracle::sumsq(w); }, w, wrong, 1e-5), 0.4);
}

TEST(FiniteDiff, EpsilonRange) {
  Tensor w({1}, 1.0);
  EXPECT_THROW(finite_diff_check([] { return 0.0; }, w, Tensor({1}), 0.0), std::invalid_argument);
  EXPECT_THROW(finite_diff_check([] { return 0.0; }, w, Tensor({1}), 1e-2), std::invalid_argument);
}

#include "fnl/checks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fnl/diagnostics.hpp"
#include "fnl/experiment.hpp"
#include "fnl/layers.hpp"
#include "fnl/model.hpp"
#include "fnl/optimizers.hpp"
#include "fnl/regularization.hpp"

namespace fnl {

namespace {

constexpr double kEps = 1e-6;

Tensor gaussian(const Shape& s, Rng& rng, double stddev = 1.0) { return random_gaussian(s, stddev, rng); }

/// Worst error over several parameters of one objective.
double worst_of(const std::function<double()>& loss, std::vector<std::pair<Tensor*, Tensor>> params) {
  double worst = 0.0;
  for (auto& [p, g] : params) worst = std::max(worst, finite_diff_check(loss, *p, g, kEps));
  return worst;
}

double fc_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = gaussian({4, 5}, rng), x = gaussian({3, 5}, rng);
  const Tensor r = gaussian({3, 4}, rng);
  auto loss = [&] { return inner(r, fc_forward(w, x)); };
  const FcGrads g = fc_backward(w, x, r);
  return worst_of(loss, {{&w, g.dw}, {&x, g.dx}});
}

double factorized_fc_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor l = gaussian({4, 2}, rng), rt = gaussian({5, 2}, rng), x = gaussian({3, 5}, rng);
  const Tensor r = gaussian({3, 4}, rng);
  auto loss = [&] { return inner(r, factorized_fc_forward(l, rt, x)); };
  const FactorPairGrads g = factorized_fc_backward(l, rt, x, r);
  return worst_of(loss, {{&l, g.dleft}, {&rt, g.dright}, {&x, g.dx}});
}

double conv_case(std::uint64_t seed, std::size_t stride) {
  Rng rng(seed);
  Tensor k = gaussian({3, 2, 3, 3}, rng), x = gaussian({2, 2, 5, 5}, rng);
  const std::size_t o = conv_output_size(5, 3, stride);
  const Tensor r = gaussian({2, 3, o, o}, rng);
  auto loss = [&] { return inner(r, conv2d_forward(k, x, stride)); };
  const ConvGrads g = conv2d_backward(k, x, r, stride);
  return worst_of(loss, {{&k, g.dkernel}, {&x, g.dx}});
}

double factorized_conv_case(std::uint64_t seed, std::size_t stride) {
  Rng rng(seed);
  Tensor l = gaussian({9, 4}, rng), rt = gaussian({6, 4}, rng), x = gaussian({2, 2, 5, 5}, rng);
  const std::size_t o = conv_output_size(5, 3, stride);
  const Tensor r = gaussian({2, 3, o, o}, rng);
  auto loss = [&] { return inner(r, factorized_conv_forward(l, rt, x, 3, stride)); };
  const FactorPairGrads g = factorized_conv_backward(l, rt, x, r, 3, stride);
  return worst_of(loss, {{&l, g.dleft}, {&rt, g.dright}, {&x, g.dx}});
}

double batchnorm_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = gaussian({4, 3, 2, 2}, rng), gamma = gaussian({3}, rng), beta = gaussian({3}, rng);
  const Tensor r = gaussian({4, 3, 2, 2}, rng);
  auto loss = [&] {
    Tensor rm({3}), rv({3}, 1.0);
    return inner(r, batch_norm_forward(x, gamma, beta, rm, rv, true, nullptr));
  };
  Tensor rm({3}), rv({3}, 1.0);
  NormCache cache;
  batch_norm_forward(x, gamma, beta, rm, rv, true, &cache);
  const NormGrads g = batch_norm_backward(r, gamma, cache);
  return worst_of(loss, {{&x, g.dx}, {&gamma, g.dgamma}, {&beta, g.dbeta}});
}

double cross_entropy_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor logits = gaussian({5, 4}, rng);
  Labels y(5);
  for (auto& v : y) v = static_cast<int>(rng.below(4));
  auto loss = [&] { return softmax_cross_entropy(logits, y).loss; };
  const Tensor g = softmax_cross_entropy(logits, y).grad;
  return worst_of(loss, {{&logits, g}});
}

double mha_case(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<AttentionHead> heads(2);
  for (auto& h : heads) {
    h.q = gaussian({4, 3}, rng, 0.5);
    h.k = gaussian({4, 3}, rng, 0.5);
    h.v = gaussian({4, 3}, rng, 0.5);
    h.o = gaussian({4, 3}, rng, 0.5);
  }
  Tensor x = gaussian({5, 4}, rng);
  const Tensor r = gaussian({5, 4}, rng);
  auto loss = [&] { return inner(r, mha_forward(heads, x)); };
  MhaCache cache;
  mha_forward(heads, x, &cache);
  const MhaGrads g = mha_backward(heads, cache, r);
  std::vector<std::pair<Tensor*, Tensor>> ps{{&x, g.dx}};
  for (std::size_t i = 0; i < heads.size(); ++i) {
    ps.push_back({&heads[i].q, g.heads[i].q});
    ps.push_back({&heads[i].k, g.heads[i].k});
    ps.push_back({&heads[i].v, g.heads[i].v});
    ps.push_back({&heads[i].o, g.heads[i].o});
  }
  return worst_of(loss, ps);
}

FactorizedParam random_factors(std::size_t m, std::size_t n, std::size_t r, std::size_t depth, Rng& rng) {
  FactorizedParam fp;
  fp.u = gaussian({m, r}, rng);
  fp.v = gaussian({n, r}, rng);
  for (std::size_t j = 0; j < depth; ++j) fp.inner.push_back(gaussian({r, r}, rng, 0.7));
  return fp;
}

double factor_penalty_case(std::uint64_t seed, std::size_t depth, bool frobenius) {
  Rng rng(seed);
  FactorizedParam fp = random_factors(5, 4, 3, depth, rng);
  const double lambda = 0.3;
  auto loss = [&] { return frobenius ? fd_penalty(fp, lambda) : wd_penalty(fp, lambda); };
  const FactorGrads g = frobenius ? fd_gradients(fp, lambda) : wd_gradients(fp, lambda);
  std::vector<std::pair<Tensor*, Tensor>> ps{{&fp.u, g.u}, {&fp.v, g.v}};
  for (std::size_t j = 0; j < depth; ++j) ps.push_back({&fp.inner[j], g.inner[j]});
  return worst_of(loss, ps);
}

double mha_decay_case(std::uint64_t seed, MhaTarget target) {
  Rng rng(seed);
  std::vector<AttentionForms> heads(2);
  for (auto& h : heads) {
    h.qk = random_factors(4, 4, 2, 0, rng);
    h.ov = random_factors(4, 4, 2, 0, rng);
  }
  DecayConfig cfg{DecayMode::fd, 0.2, target};
  auto loss = [&] {
    double s = 0.0;
    for (const auto& h : heads) {
      s += fd_penalty(h.ov, cfg.lambda);
      if (target == MhaTarget::ov_and_qk) s += fd_penalty(h.qk, cfg.lambda);
    }
    return s;
  };
  const auto g = mha_decay(heads, cfg);
  std::vector<std::pair<Tensor*, Tensor>> ps;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    ps.push_back({&heads[i].ov.u, g[i].ov.u});
    ps.push_back({&heads[i].ov.v, g[i].ov.v});
    ps.push_back({&heads[i].qk.u, g[i].qk.u});
    ps.push_back({&heads[i].qk.v, g[i].qk.v});
  }
  return worst_of(loss, ps);
}

double deep_linear_case(std::uint64_t seed, std::size_t depth) {
  Rng rng(seed);
  Linear layer("fc", 4, 5, true);
  FactorizedParam fp = random_factors(5, 4, 3, depth, rng);
  fp.mode = FactorMode::lowrank;
  layer.w.set_factors(fp);
  layer.b.value = gaussian({5}, rng);
  const Tensor x = gaussian({3, 4}, rng), r = gaussian({3, 5}, rng);
  auto loss = [&] { return inner(r, layer.forward(x, true)); };
  layer.zero_grad();
  layer.forward(x, true);
  layer.backward(r);
  const FactorGrads g = layer.w.factor_grads;
  std::vector<std::pair<Tensor*, Tensor>> ps{{&layer.w.factors.u, g.u}, {&layer.w.factors.v, g.v}, {&layer.b.value, layer.b.grad}};
  for (std::size_t j = 0; j < depth; ++j) ps.push_back({&layer.w.factors.inner[j], g.inner[j]});
  return worst_of(loss, ps);
}

std::string fmt(double v) { return format_real(v); }

CheckResult make(std::string name, bool ok, std::string detail) { return {std::move(name), ok, std::move(detail)}; }

}  // namespace

std::vector<GradientCase> gradient_cases() {
  return {
      {"fc", fc_case},
      {"factorized_fc", factorized_fc_case},
      {"conv_stride1", [](std::uint64_t s) { return conv_case(s, 1); }},
      {"conv_stride2", [](std::uint64_t s) { return conv_case(s, 2); }},
      {"factorized_conv_stride1", [](std::uint64_t s) { return factorized_conv_case(s, 1); }},
      {"factorized_conv_stride2", [](std::uint64_t s) { return factorized_conv_case(s, 2); }},
      {"batchnorm", batchnorm_case},
      {"cross_entropy", cross_entropy_case},
      {"attention", mha_case},
      {"deep_linear_d1", [](std::uint64_t s) { return deep_linear_case(s, 1); }},
      {"deep_linear_d2", [](std::uint64_t s) { return deep_linear_case(s, 2); }},
      {"wd_d0", [](std::uint64_t s) { return factor_penalty_case(s, 0, false); }},
      {"fd_d0", [](std::uint64_t s) { return factor_penalty_case(s, 0, true); }},
      {"fd_d1", [](std::uint64_t s) { return factor_penalty_case(s, 1, true); }},
      {"fd_d2", [](std::uint64_t s) { return factor_penalty_case(s, 2, true); }},
      {"attention_fd_ov", [](std::uint64_t s) { return mha_decay_case(s, MhaTarget::ov_only); }},
      {"attention_fd_ov_qk", [](std::uint64_t s) { return mha_decay_case(s, MhaTarget::ov_and_qk); }},
  };
}

std::vector<CheckResult> run_checks(std::size_t seeds) {
  std::vector<CheckResult> out;

  for (const auto& c : gradient_cases()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) worst = std::max(worst, c.worst_error(1000 + s));
    out.push_back(make("gradient/" + c.name, worst <= 1e-5, "worst relative error " + fmt(worst)));
  }

  {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(2000 + s);
      const Tensor l = gaussian({12, 3}, rng), r = gaussian({9, 3}, rng), x = gaussian({2, 3, 6, 6}, rng);
      for (std::size_t stride : {1, 2}) {
        const Tensor direct = conv2d_forward(matrix_to_conv_kernel(matmul_nt(l, r), 4, 3, 3), x, stride);
        worst = std::max(worst, max_abs_diff(direct, factorized_conv_forward(l, r, x, 3, stride)));
      }
    }
    out.push_back(make("conv_factorization_equivalence", worst <= 1e-10, "max abs deviation " + fmt(worst)));
  }

  {
    double worst = 0.0, worst_full = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(3000 + s);
      const Tensor w = gaussian({7, 5}, rng);
      const auto sv = singular_values(w);
      for (std::size_t r : {1, 3, 5}) {
        const Tensor res = w - recompose(spectral_init(w, r));
        double tail = 0.0;
        for (std::size_t i = r; i < sv.size(); ++i) tail += sv[i] * sv[i];
        const double err = inner(res, res);
        if (tail > 0.0) worst = std::max(worst, std::abs(err - tail) / tail);
        if (r == 5) worst_full = std::max(worst_full, max_abs_diff(w, recompose(spectral_init(w, r))));
      }
    }
    out.push_back(make("spectral_init_residual", worst <= 1e-7 && worst_full <= 1e-8,
                       "relative residual error " + fmt(worst) + ", full-rank error " + fmt(worst_full)));
  }

  {
    double min_gap = 1e300, max_si_gap = 0.0;
    for (std::size_t s = 0; s < seeds * 20; ++s) {
      Rng rng(4000 + s);
      const FactorizedParam fp = random_factors(6, 4, 1 + s % 5, 0, rng);
      min_gap = std::min(min_gap, nuclear_bound_gap(fp).gap);
      const FactorizedParam si = spectral_init(gaussian({6, 4}, rng), 1 + s % 4);
      max_si_gap = std::max(max_si_gap, std::abs(nuclear_bound_gap(si).gap));
    }
    out.push_back(make("nuclear_bound", min_gap >= -1e-9 && max_si_gap <= 1e-8,
                       "min gap " + fmt(min_gap) + ", max gap at SI " + fmt(max_si_gap)));
  }

  {
    std::vector<double> slopes;
    const std::vector<double> lrs{1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4};
    for (std::size_t s = 0; s < seeds * 4; ++s) {
      Rng rng(5000 + s);
      const Tensor u = gaussian({6, 3}, rng), v = gaussian({4, 3}, rng), g = gaussian({6, 4}, rng);
      slopes.push_back(claim1_order_check(u, v, g, lrs).slope);
    }
    std::sort(slopes.begin(), slopes.end());
    const double median = slopes[slopes.size() / 2];
    out.push_back(make("claim1_order", median >= 1.8 && median <= 2.2, "median slope " + fmt(median)));
  }

  {
    bool same = true;
    Rng rng(6000);
    FactorizedParam a = random_factors(5, 4, 3, 0, rng);
    FactorizedParam b = a;
    FactorMoments ma = FactorMoments::zeros_like(a), mb = FactorMoments::zeros_like(b);
    MomentBuffers mu = ma.u, mv = ma.v;
    for (std::int64_t t = 1; t <= 10; ++t) {
      FactorGrads g{gaussian({5, 3}, rng), {}, gaussian({4, 3}, rng)};
      flambe_step(a, g, ma, t, 0.01, 0.0, {});
      lamb_step(b.u, g.u, mu, t, 0.01, 0.0, {});
      lamb_step(b.v, g.v, mv, t, 0.01, 0.0, {});
      same = same && a.u == b.u && a.v == b.v;
    }
    bool monotone = true;
    FactorizedParam c = random_factors(5, 4, 3, 0, rng);
    FactorMoments mc = FactorMoments::zeros_like(c);
    const FactorGrads zero = FactorGrads::zeros_like(c);
    double prev = frobenius_norm(recompose(c));
    for (std::int64_t t = 1; t <= 100; ++t) {
      flambe_step(c, zero, mc, t, 0.01, 0.5, {});
      const double now = frobenius_norm(recompose(c));
      monotone = monotone && now <= prev;
      prev = now;
    }
    out.push_back(make("flambe", same && monotone,
                       std::string(same ? "" : "differs from lamb at lambda 0; ") + (monotone ? "decay-only norm nonincreasing" : "decay-only norm increased")));
  }

  {
    Rng rng(7000);
    BoundInputs in;
    for (int i = 0; i < 4; ++i) in.weights.push_back(gaussian({5, 5}, rng));
    in.samples = 100;
    in.width = 5;
    bool monotone = true;
    for (std::size_t r = 1; r < 5; ++r) monotone = monotone && cor1_bound(in, r) <= cor1_bound(in, r + 1);
    const auto [lhs, rhs] = cor2_identity_sides(in.weights);
    const double rel = std::abs(lhs - rhs) / std::abs(rhs);
    const Tensor scores = gaussian({64, 4}, rng);
    Labels y(64);
    for (auto& v : y) v = static_cast<int>(rng.below(4));
    const bool margin = margin_loss(scores, y, 0.0) == 1.0 - accuracy(scores, y);
    out.push_back(make("bounds", monotone && rel <= 1e-10 && margin,
                       "identity relative error " + fmt(rel) + (monotone ? "" : ", cor1 not monotone in r") +
                           (margin ? "" : ", margin loss differs from error rate")));
  }

  {
    LrSchedule s;
    s.kind = LrSchedule::Kind::step_decay;
    s.base_lr = 0.5;
    s.milestones = {10, 20};
    bool ok = s.at(10) == 0.5 && std::abs(s.at(11) - 0.05) < 1e-15 && std::abs(s.at(21) - 0.005) < 1e-15;
    s.kind = LrSchedule::Kind::warmup_const;
    s.warmup_steps = 8;
    ok = ok && s.at(4) == 0.25 && s.at(8) == 0.5 && s.at(100) == 0.5;
    out.push_back(make("lr_schedule", ok, ok ? "closed form matches" : "schedule differs from closed form"));
  }

  {
    ExperimentConfig cfg;
    cfg.task.n_train = 128;
    cfg.task.n_eval = 64;
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.factorize.mode = "lowrank";
    cfg.factorize.rank = 4;
    cfg.decay = {DecayMode::fd, 1e-3, MhaTarget::ov_only};
    const TrainResult full = train(cfg);
    const TrainResult again = train(cfg);
    TrainOptions half;
    half.stop_after_epoch = 2;
    const TrainResult first = train(cfg, half);
    const Checkpoint restored = Checkpoint::from_json(first.checkpoint.to_json());
    TrainOptions resume;
    resume.resume = &restored;
    const TrainResult second = train(cfg, resume);
    const bool repro = full.trace.to_csv() == again.trace.to_csv();
    const bool ckpt = full.trace.to_csv() == second.trace.to_csv();
    const bool csv = MetricTrace::from_csv(full.trace.to_csv()) == full.trace;
    out.push_back(make("reproducibility", repro && ckpt && csv,
                       std::string(repro ? "rerun identical" : "rerun differs") + (ckpt ? ", resume identical" : ", resume differs") +
                           (csv ? ", csv round-trips" : ", csv does not round-trip")));
  }
  return out;
}

}  // namespace fnl

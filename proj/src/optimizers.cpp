#include "fnl/optimizers.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace fnl {

void sgd_step(Tensor& p, const Tensor& g, Tensor& momentum_buf, double lr, double momentum) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (p.shape() != g.shape() || p.shape() != momentum_buf.shape()) throw ShapeError("sgd_step: shape mismatch");
  auto pd = p.data();
  auto gd = g.data();
  auto bd = momentum_buf.data();
  for (std::size_t i = 0; i < pd.size(); ++i) {
    bd[i] = momentum * bd[i] + gd[i];
    pd[i] -= lr * bd[i];
  }
}

double trust_ratio(double param_norm, double step_norm, double max_trust) {
  if (param_norm == 0.0 || step_norm == 0.0) return 1.0;
  return std::clamp(param_norm / step_norm, 0.0, max_trust);
}

void lamb_update(Tensor& p, const Tensor& g, MomentBuffers& mb, std::int64_t step, double lr, const LambConfig& cfg,
                 const Tensor* decay) {
  if (!(lr > 0.0)) throw std::invalid_argument("lamb_update: learning rate must be positive");
  if (step < 1) throw std::invalid_argument("lamb_update: step counts from 1");
  if (p.shape() != g.shape() || p.shape() != mb.first.shape() || p.shape() != mb.second.shape() ||
      (decay && decay->shape() != p.shape())) {
    throw ShapeError("lamb_update: shape mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  auto gd = g.data();
  auto m = mb.first.data();
  auto v = mb.second.data();
  Tensor update = Tensor::zeros_like(p);
  auto ud = update.data();
  for (std::size_t i = 0; i < gd.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
    ud[i] = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
  }
  if (decay) update += *decay;
  const double phi = trust_ratio(frobenius_norm(p), frobenius_norm(update), cfg.max_trust);
  p.axpy(-lr * phi, update);
}

void lamb_step(Tensor& p, const Tensor& g, MomentBuffers& mb, std::int64_t step, double lr, double lambda,
               const LambConfig& cfg) {
  if (lambda == 0.0) {
    lamb_update(p, g, mb, step, lr, cfg, nullptr);
    return;
  }
  const Tensor decay = lambda * p;
  lamb_update(p, g, mb, step, lr, cfg, &decay);
}

FactorMoments FactorMoments::zeros_like(const FactorizedParam& fp) {
  FactorMoments fm;
  fm.u = MomentBuffers::zeros_like(fp.u);
  fm.v = MomentBuffers::zeros_like(fp.v);
  for (const auto& m : fp.inner) fm.inner.push_back(MomentBuffers::zeros_like(m));
  return fm;
}

void flambe_step(FactorizedParam& fp, const FactorGrads& g, FactorMoments& mb, std::int64_t step, double lr,
                 double lambda, const LambConfig& cfg) {
  if (lambda == 0.0) {
    lamb_update(fp.u, g.u, mb.u, step, lr, cfg, nullptr);
    for (std::size_t j = 0; j < fp.depth(); ++j) lamb_update(fp.inner[j], g.inner[j], mb.inner[j], step, lr, cfg, nullptr);
    lamb_update(fp.v, g.v, mb.v, step, lr, cfg, nullptr);
    return;
  }
  const FactorGrads decay = fd_gradients(fp, lambda);
  lamb_update(fp.u, g.u, mb.u, step, lr, cfg, &decay.u);
  for (std::size_t j = 0; j < fp.depth(); ++j) lamb_update(fp.inner[j], g.inner[j], mb.inner[j], step, lr, cfg, &decay.inner[j]);
  lamb_update(fp.v, g.v, mb.v, step, lr, cfg, &decay.v);
}

double LrSchedule::at(std::int64_t step) const {
  switch (kind) {
    case Kind::constant: return base_lr;
    case Kind::step_decay: {
      double lr = base_lr;
      for (auto m : milestones) {
        if (step > m) lr *= 0.1;
      }
      return lr;
    }
    case Kind::warmup_const:
      if (warmup_steps <= 0) return base_lr;
      return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
  }
  return base_lr;
}

std::string to_string(LrSchedule::Kind kind) {
  switch (kind) {
    case LrSchedule::Kind::constant: return "constant";
    case LrSchedule::Kind::step_decay: return "step_decay";
    case LrSchedule::Kind::warmup_const: return "warmup_const";
  }
  return "constant";
}

LrSchedule::Kind lr_kind_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::Kind::constant;
  if (s == "step_decay") return LrSchedule::Kind::step_decay;
  if (s == "warmup_const") return LrSchedule::Kind::warmup_const;
  throw std::invalid_argument("unknown learning-rate schedule '" + s + "'");
}

std::vector<DenseSlot> ParamSet::flatten() const {
  std::vector<DenseSlot> out = dense;
  for (const auto& f : factors) {
    out.push_back({f.name + ".u", &f.value->u, &f.grad->u});
    for (std::size_t j = 0; j < f.value->depth(); ++j) {
      out.push_back({f.name + ".m" + std::to_string(j + 1), &f.value->inner[j], &f.grad->inner[j]});
    }
    out.push_back({f.name + ".v", &f.value->v, &f.grad->v});
  }
  return out;
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::lamb: return "lamb";
    case OptimizerKind::flambe: return "flambe";
  }
  return "sgd";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "lamb") return OptimizerKind::lamb;
  if (s == "flambe") return OptimizerKind::flambe;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

Optimizer::Optimizer(OptimizerConfig cfg, DecayConfig decay, double compression_rate)
    : cfg_(cfg), decay_(decay), compression_rate_(compression_rate) {
  decay_.validate();
  if (!(compression_rate_ > 0.0)) throw std::invalid_argument("optimizer: compression rate must be positive");
  if (cfg_.momentum < 0.0 || cfg_.momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must be in [0, 1)");
}

double Optimizer::effective_lambda() const {
  if (decay_.mode == DecayMode::none) return 0.0;
  if (decay_.mode == DecayMode::crs) return decay_.lambda * compression_rate_;
  return decay_.lambda;
}

bool Optimizer::frobenius_target(FactorRole role) const {
  const bool frob = decay_.mode == DecayMode::fd || cfg_.kind == OptimizerKind::flambe;
  if (!frob || decay_.mode == DecayMode::none) return false;
  if (role == FactorRole::attention_qk) return decay_.mha_target == MhaTarget::ov_and_qk;
  return true;
}

void Optimizer::ensure_state(const std::vector<DenseSlot>& flat) {
  auto& bufs = cfg_.kind == OptimizerKind::sgd ? state_.momentum : state_.first;
  if (bufs.size() == flat.size()) {
    for (std::size_t i = 0; i < flat.size(); ++i) {
      if (bufs[i].shape() != flat[i].value->shape()) throw ShapeError("optimizer: parameter set changed shape");
    }
    return;
  }
  if (!bufs.empty()) throw std::invalid_argument("optimizer: parameter set changed size");
  for (const auto& s : flat) {
    if (cfg_.kind == OptimizerKind::sgd) {
      state_.momentum.push_back(Tensor::zeros_like(*s.value));
    } else {
      state_.first.push_back(Tensor::zeros_like(*s.value));
      state_.second.push_back(Tensor::zeros_like(*s.value));
    }
  }
}

void Optimizer::step(const ParamSet& params, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  const std::vector<DenseSlot> flat = params.flatten();
  ensure_state(flat);
  ++state_.step;

  std::vector<Tensor> grads;
  grads.reserve(flat.size());
  for (const auto& s : flat) grads.push_back(*s.grad);
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads) sq += inner(g, g);
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      for (auto& g : grads) g *= cfg_.clip_norm / norm;
    }
  }

  const double lambda = effective_lambda();
  // decay[i] holds the decay term for flat[i]; empty when there is none.
  std::vector<Tensor> decay(flat.size());
  if (lambda != 0.0) {
    for (std::size_t i = 0; i < params.dense.size(); ++i) decay[i] = lambda * *flat[i].value;
    std::size_t idx = params.dense.size();
    for (const auto& f : params.factors) {
      FactorGrads fg = frobenius_target(f.role) ? fd_gradients(*f.value, lambda) : wd_gradients(*f.value, lambda);
      decay[idx++] = std::move(fg.u);
      for (auto& m : fg.inner) decay[idx++] = std::move(m);
      decay[idx++] = std::move(fg.v);
    }
  }
  if (cfg_.kind == OptimizerKind::flambe && params.factors.empty() && !warned_) {
    std::cerr << "warning: flambe with no factorized parameters behaves as lamb\n";
    warned_ = true;
  }

  // Which tensors take their decay coupled into the gradient.
  std::vector<bool> coupled(flat.size(), cfg_.kind == OptimizerKind::sgd);
  if (cfg_.kind == OptimizerKind::lamb && decay_.mode == DecayMode::fd) {
    std::size_t idx = params.dense.size();
    for (const auto& f : params.factors) {
      const std::size_t n = f.value->depth() + 2;
      for (std::size_t k = 0; k < n; ++k) coupled[idx + k] = frobenius_target(f.role);
      idx += n;
    }
  }

  for (std::size_t i = 0; i < flat.size(); ++i) {
    const bool has_decay = !decay[i].empty();
    if (has_decay && coupled[i]) grads[i] += decay[i];
    if (cfg_.kind == OptimizerKind::sgd) {
      sgd_step(*flat[i].value, grads[i], state_.momentum[i], lr, cfg_.momentum);
    } else {
      MomentBuffers mb{std::move(state_.first[i]), std::move(state_.second[i])};
      lamb_update(*flat[i].value, grads[i], mb, state_.step, lr, cfg_.lamb,
                  has_decay && !coupled[i] ? &decay[i] : nullptr);
      state_.first[i] = std::move(mb.first);
      state_.second[i] = std::move(mb.second);
    }
  }
}

}  // namespace fnl

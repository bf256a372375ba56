#include "fnl/regularization.hpp"

#include <cmath>
#include <stdexcept>

namespace fnl {

std::string to_string(DecayMode mode) {
  switch (mode) {
    case DecayMode::none: return "none";
    case DecayMode::wd: return "wd";
    case DecayMode::crs: return "crs";
    case DecayMode::fd: return "fd";
  }
  return "none";
}

DecayMode decay_mode_from_string(const std::string& s) {
  if (s == "none") return DecayMode::none;
  if (s == "wd") return DecayMode::wd;
  if (s == "crs") return DecayMode::crs;
  if (s == "fd") return DecayMode::fd;
  throw std::invalid_argument("unknown decay mode '" + s + "'");
}

std::string to_string(MhaTarget target) { return target == MhaTarget::ov_only ? "ov_only" : "ov_and_qk"; }

MhaTarget mha_target_from_string(const std::string& s) {
  if (s == "ov_only") return MhaTarget::ov_only;
  if (s == "ov_and_qk") return MhaTarget::ov_and_qk;
  throw std::invalid_argument("unknown attention decay target '" + s + "'");
}

void DecayConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("decay lambda must be >= 0");
}

double wd_penalty(const FactorizedParam& fp, double lambda) {
  double s = inner(fp.u, fp.u) + inner(fp.v, fp.v);
  for (const auto& m : fp.inner) s += inner(m, m);
  return 0.5 * lambda * s;
}

FactorGrads wd_gradients(const FactorizedParam& fp, double lambda) {
  FactorGrads g;
  g.u = lambda * fp.u;
  g.v = lambda * fp.v;
  for (const auto& m : fp.inner) g.inner.push_back(lambda * m);
  return g;
}

double fd_penalty(const FactorizedParam& fp, double lambda) {
  const Tensor w = recompose(fp);
  return 0.5 * lambda * inner(w, w);
}

FactorGrads fd_gradients(const FactorizedParam& fp, double lambda) {
  const std::size_t d = fp.depth();
  // prefix[j] = U·M_1···M_j, suffix[j] = M_{j+1}···M_d (r×r), suffix[d] = I.
  std::vector<Tensor> prefix{fp.u};
  for (const auto& m : fp.inner) prefix.push_back(matmul(prefix.back(), m));
  std::vector<Tensor> suffix(d + 1);
  suffix[d] = Tensor::identity(fp.rank());
  for (std::size_t j = d; j-- > 0;) suffix[j] = matmul(fp.inner[j], suffix[j + 1]);

  const Tensor w = matmul_nt(prefix[d], fp.v);  // U·P·Vᵀ
  FactorGrads g;
  // ∇U = λ·W·V·Pᵀ with P = suffix[0]
  g.u = lambda * matmul_nt(matmul(w, fp.v), suffix[0]);
  // ∇V = λ·Wᵀ·(U·P)
  g.v = lambda * matmul_tn(w, prefix[d]);
  for (std::size_t j = 0; j < d; ++j) {
    // A = prefix[j], Bᵀ = V·suffix[j+1]ᵀ
    const Tensor b_t = matmul_nt(fp.v, suffix[j + 1]);
    g.inner.push_back(lambda * matmul_tn(prefix[j], matmul(w, b_t)));
  }
  return g;
}

double crs_lambda(double lambda, const CompressionReport& report) {
  if (!(report.rate > 0.0)) throw std::invalid_argument("crs_lambda: compression rate must be positive");
  return lambda * report.rate;
}

NuclearBoundGap nuclear_bound_gap(const FactorizedParam& fp) {
  if (fp.depth() != 0) throw std::invalid_argument("nuclear_bound_gap: needs a depth-0 factorization");
  NuclearBoundGap out;
  out.lhs = 0.5 * (inner(fp.u, fp.u) + inner(fp.v, fp.v));
  out.rhs = nuclear_norm(recompose(fp));
  out.gap = out.lhs - out.rhs;
  return out;
}

std::vector<AttentionFormGrads> mha_decay(std::span<const AttentionForms> heads, const DecayConfig& cfg) {
  if (cfg.mode != DecayMode::fd) throw std::invalid_argument("mha_decay: decay mode must be fd");
  cfg.validate();
  std::vector<AttentionFormGrads> out;
  out.reserve(heads.size());
  for (const auto& h : heads) {
    AttentionFormGrads g;
    g.ov = fd_gradients(h.ov, cfg.lambda);
    g.qk = cfg.mha_target == MhaTarget::ov_and_qk ? fd_gradients(h.qk, cfg.lambda) : FactorGrads::zeros_like(h.qk);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace fnl

#include "fnl/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fnl {

std::string to_string(FactorMode mode) {
  switch (mode) {
    case FactorMode::lowrank: return "lowrank";
    case FactorMode::full: return "full";
    case FactorMode::deep: return "deep";
    case FactorMode::wide: return "wide";
  }
  return "lowrank";
}

FactorMode factor_mode_from_string(const std::string& s) {
  if (s == "lowrank") return FactorMode::lowrank;
  if (s == "full") return FactorMode::full;
  if (s == "deep") return FactorMode::deep;
  if (s == "wide") return FactorMode::wide;
  throw std::invalid_argument("unknown factorization mode '" + s + "'");
}

std::size_t FactorizedParam::param_count() const {
  std::size_t n = u.size() + v.size();
  for (const auto& m : inner) n += m.size();
  return n;
}

void FactorizedParam::validate() const {
  if (!u.is_matrix() || !v.is_matrix() || u.cols() != v.cols()) {
    throw ShapeError("factorized parameter: U " + shape_string(u.shape()) + " and V " + shape_string(v.shape()) +
                     " must share their column count");
  }
  const std::size_t r = rank(), m = rows(), n = cols();
  for (const auto& mj : inner) {
    if (mj.shape() != Shape{r, r}) throw ShapeError("factorized parameter: inner factor must be r×r");
  }
  switch (mode) {
    case FactorMode::lowrank:
      if (r > std::min(m, n)) throw std::invalid_argument("lowrank factorization needs r <= min(m, n)");
      break;
    case FactorMode::full:
      if (r != m || depth() != 0) throw std::invalid_argument("full factorization needs r = m and no inner factor");
      break;
    case FactorMode::deep:
      if (r != m || depth() != 1) throw std::invalid_argument("deep factorization needs r = m and one inner factor");
      break;
    case FactorMode::wide:
      if (r != 3 * m || depth() != 0) throw std::invalid_argument("wide factorization needs r = 3m and no inner factor");
      break;
  }
}

FactorGrads FactorGrads::zeros_like(const FactorizedParam& fp) {
  FactorGrads g;
  g.u = Tensor::zeros_like(fp.u);
  g.v = Tensor::zeros_like(fp.v);
  for (const auto& m : fp.inner) g.inner.push_back(Tensor::zeros_like(m));
  return g;
}

void FactorGrads::zero() {
  u.fill(0.0);
  v.fill(0.0);
  for (auto& m : inner) m.fill(0.0);
}

FactorGrads& FactorGrads::operator+=(const FactorGrads& other) {
  u += other.u;
  v += other.v;
  for (std::size_t j = 0; j < inner.size(); ++j) inner[j] += other.inner[j];
  return *this;
}

Tensor recompose(const FactorizedParam& fp) {
  Tensor left = fp.u;
  for (const auto& m : fp.inner) left = matmul(left, m);
  return matmul_nt(left, fp.v);
}

FactorizedParam spectral_init(const Tensor& w, std::size_t r) {
  const SvdResult s = svd(w, r);  // validates r
  std::vector<double> root(r);
  for (std::size_t i = 0; i < r; ++i) root[i] = std::sqrt(s.singular_values[i]);
  FactorizedParam fp;
  fp.u = scale_columns(s.left, root);
  fp.v = scale_columns(s.right, root);
  fp.mode = FactorMode::lowrank;
  return fp;
}

FactorizedParam default_factor_init(std::size_t m, std::size_t n, std::size_t r, std::size_t depth,
                                    std::uint64_t seed, std::size_t fan_in) {
  if (r < 1) throw std::invalid_argument("default_factor_init: rank must be at least 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in ? fan_in : n));
  Rng rng(seed);
  FactorizedParam fp;
  fp.u = random_gaussian({m, r}, stddev, rng);
  fp.v = random_gaussian({n, r}, stddev, rng);
  for (std::size_t j = 0; j < depth; ++j) fp.inner.push_back(Tensor::identity(r));
  if (depth == 1 && r == m) {
    fp.mode = FactorMode::deep;
  } else if (depth == 0 && r == 3 * m) {
    fp.mode = FactorMode::wide;
  } else if (depth == 0 && r == m && m > n) {
    fp.mode = FactorMode::full;
  } else {
    fp.mode = FactorMode::lowrank;
  }
  return fp;
}

std::size_t overcomplete_rank(FactorMode mode, std::size_t m) {
  switch (mode) {
    case FactorMode::full:
    case FactorMode::deep: return m;
    case FactorMode::wide: return 3 * m;
    case FactorMode::lowrank: break;
  }
  throw std::invalid_argument("overcomplete_rank: lowrank has no implied rank");
}

std::size_t rank_from_scale(double scale, std::size_t c_out, std::size_t k, std::size_t c_in) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("rank_from_scale: scale must be positive");
  const double target = scale * static_cast<double>(c_out * k);
  // Nearest integer with ties going down.
  double r = std::ceil(target - 0.5);
  const double hi = static_cast<double>(std::min(c_out * k, c_in * k));
  r = std::clamp(r, 1.0, hi);
  return static_cast<std::size_t>(r);
}

CompressionReport CompressionReport::from_counts(std::size_t original, std::size_t factorized) {
  if (original == 0 || factorized == 0) throw std::invalid_argument("compression report needs positive counts");
  return {original, factorized, static_cast<double>(factorized) / static_cast<double>(original)};
}

}  // namespace fnl

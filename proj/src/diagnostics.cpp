#include "fnl/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace fnl {

std::string to_string(Phase phase) { return phase == Phase::train ? "train" : "eval"; }

Phase phase_from_string(const std::string& s) {
  if (s == "train") return Phase::train;
  if (s == "eval") return Phase::eval;
  throw std::invalid_argument("unknown phase '" + s + "'");
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_real(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::invalid_argument("bad real '" + s + "'");
  return v;
}

void MetricTrace::add(std::int64_t step, Phase phase, std::string metric, double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("metric '" + metric + "' is not finite");
  if (metric.empty() || metric.find_first_of(",\n\r") != std::string::npos) {
    throw std::invalid_argument("metric name must be nonempty without commas or newlines");
  }
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (it->phase != phase) continue;
    if (step < it->step) throw std::invalid_argument("metric steps must not decrease within a phase");
    break;
  }
  rows_.push_back({step, phase, std::move(metric), value});
}

double MetricTrace::last(Phase phase, const std::string& metric) const {
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (it->phase == phase && it->metric == metric) return it->value;
  }
  throw std::out_of_range("no metric '" + metric + "' in phase " + to_string(phase));
}

std::vector<std::pair<std::int64_t, double>> MetricTrace::series(Phase phase, const std::string& metric) const {
  std::vector<std::pair<std::int64_t, double>> out;
  for (const auto& r : rows_) {
    if (r.phase == phase && r.metric == metric) out.emplace_back(r.step, r.value);
  }
  return out;
}

std::string MetricTrace::to_csv() const {
  std::ostringstream os;
  write_csv(os);
  return os.str();
}

void MetricTrace::write_csv(std::ostream& os) const {
  os << "step,phase,metric,value\n";
  for (const auto& r : rows_) os << r.step << ',' << to_string(r.phase) << ',' << r.metric << ',' << format_real(r.value) << '\n';
}

MetricTrace MetricTrace::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "step,phase,metric,value") throw std::invalid_argument("metric csv: bad header");
  MetricTrace t;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != 4) throw std::invalid_argument("metric csv: expected 4 fields in '" + line + "'");
    t.add(std::stoll(f[0]), phase_from_string(f[1]), f[2], parse_real(f[3]));
  }
  return t;
}

// ---------------------------------------------------------------------------

double effective_step_size(std::span<const Tensor> weights, double lr) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& w : weights) {
    const double sq = inner(w, w);
    if (sq == 0.0) {
      std::cerr << "warning: effective_step_size skips a zero-norm layer\n";
      continue;
    }
    sum += lr / sq;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("effective_step_size: no layer with nonzero norm");
  return sum / static_cast<double>(n);
}

Tensor claim1_predicted_direction(const Tensor& u, const Tensor& v, const Tensor& grad_w, double lr) {
  const Tensor w = matmul_nt(u, v);
  if (grad_w.shape() != w.shape()) throw ShapeError("claim1: gradient must match U·Vᵀ");
  const double rho = frobenius_norm(w);
  if (rho == 0.0) throw std::invalid_argument("claim1: U·Vᵀ is zero");
  const Tensor g_hat = rho * grad_w;
  const Tensor nabla = matmul_nt(matmul(g_hat, v), v) + matmul(u, matmul_tn(u, g_hat));
  Tensor w_hat = vec(w);
  w_hat *= 1.0 / rho;
  const Tensor n = vec(nabla);
  Tensor proj = n;
  proj.axpy(-inner(w_hat, n), w_hat);
  Tensor out = w_hat;
  out.axpy(-lr / (rho * rho), proj);
  return out;
}

Tensor claim1_actual_direction(const Tensor& u, const Tensor& v, const Tensor& grad_w, double lr) {
  Tensor u2 = u;
  u2.axpy(-lr, matmul(grad_w, v));
  Tensor v2 = v;
  v2.axpy(-lr, matmul_tn(grad_w, u));
  Tensor w = vec(matmul_nt(u2, v2));
  const double n = frobenius_norm(w);
  if (n == 0.0) throw std::invalid_argument("claim1: updated product is zero");
  w *= 1.0 / n;
  return w;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need two or more points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw std::invalid_argument("loglog_slope: x values coincide");
  return sxy / sxx;
}

Claim1Fit claim1_order_check(const Tensor& u, const Tensor& v, const Tensor& grad_w, std::span<const double> lrs) {
  Claim1Fit fit;
  for (double lr : lrs) {
    if (!(lr > 0.0)) throw std::invalid_argument("claim1_order_check: learning rates must be positive");
    fit.errors.push_back(
        frobenius_norm(claim1_actual_direction(u, v, grad_w, lr) - claim1_predicted_direction(u, v, grad_w, lr)));
  }
  fit.exact = std::all_of(fit.errors.begin(), fit.errors.end(), [](double e) { return e < 1e-14; });
  if (!fit.exact) {
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < lrs.size(); ++i) {
      if (fit.errors[i] >= 1e-14) {
        xs.push_back(lrs[i]);
        ys.push_back(fit.errors[i]);
      }
    }
    fit.slope = xs.size() >= 2 ? loglog_slope(xs, ys) : std::numeric_limits<double>::quiet_NaN();
  }
  return fit;
}

void rescale_to_norm(FactorizedParam& fp, double target) {
  if (!(target >= 0.0)) throw std::invalid_argument("rescale_to_norm: target must be nonnegative");
  const double current = frobenius_norm(recompose(fp));
  if (current == 0.0) throw std::invalid_argument("rescale_to_norm: current norm is zero");
  const double s = std::sqrt(target / current);
  fp.u *= s;
  fp.v *= s;
}

NuclearStats nuclear_trace(std::span<const FactorizedParam* const> layers) {
  NuclearStats st;
  if (layers.empty()) return st;
  for (const auto* fp : layers) {
    if (fp->depth() != 0) throw std::invalid_argument("nuclear_trace: needs depth-0 factorizations");
    st.nuclear_mean += nuclear_norm(recompose(*fp));
    st.bound_mean += 0.5 * (inner(fp->u, fp->u) + inner(fp->v, fp->v));
  }
  st.nuclear_mean /= static_cast<double>(layers.size());
  st.bound_mean /= static_cast<double>(layers.size());
  return st;
}

// ---------------------------------------------------------------------------

namespace {

void check_bound_inputs(const BoundInputs& in) {
  if (!(in.margin > 0.0)) throw std::invalid_argument("bound: margin must be positive");
  if (in.samples < 1) throw std::invalid_argument("bound: need at least one sample");
  if (in.weights.empty()) throw std::invalid_argument("bound: need at least one layer");
  if (!(in.delta > 0.0 && in.delta < 1.0)) throw std::invalid_argument("bound: delta must be in (0, 1)");
  for (const auto& w : in.weights) {
    if (!w.all_finite()) throw std::invalid_argument("bound: layer matrix is not finite");
  }
}

double bound_from_data_term(const BoundInputs& in, double data_term) {
  const double L = static_cast<double>(in.depth());
  const double S = static_cast<double>(in.samples);
  return std::sqrt((data_term + std::log(L * S / in.delta)) / (in.margin * in.margin * S));
}

}  // namespace

double cor1_bound(const BoundInputs& in, std::size_t r) {
  check_bound_inputs(in);
  const double L = static_cast<double>(in.depth());
  const double m = static_cast<double>(in.width);
  double sigma = 0.0, prod = 1.0;
  for (const auto& w : in.weights) {
    const double s = spectral_norm(w);
    sigma = std::max(sigma, s);
    prod *= s * s;
  }
  const double data = in.data_bound * in.data_bound * L * L * L * m * std::pow(sigma, 2.0 * L) *
                      static_cast<double>(r) * std::log(L * m) * prod;
  return bound_from_data_term(in, data);
}

double cor2_bound(const BoundInputs& in) {
  check_bound_inputs(in);
  const double L = static_cast<double>(in.depth());
  const double m = static_cast<double>(in.width);
  double sigma = 0.0, fro = 0.0;
  for (const auto& w : in.weights) {
    sigma = std::max(sigma, spectral_norm(w));
    fro += inner(w, w);
  }
  const double data =
      in.data_bound * in.data_bound * L * L * m * std::pow(sigma, 2.0 * L - 2.0) * std::log(L * m) * fro;
  return bound_from_data_term(in, data);
}

std::pair<double, double> cor2_identity_sides(std::span<const Tensor> weights) {
  std::vector<double> spec, fro;
  for (const auto& w : weights) {
    const double s = spectral_norm(w);
    if (s == 0.0) throw std::invalid_argument("cor2 identity: zero layer");
    spec.push_back(s * s);
    fro.push_back(inner(w, w));
  }
  double prod = 1.0, ratio_sum = 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    prod *= spec[i];
    ratio_sum += fro[i] / spec[i];
  }
  double rhs = 0.0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    double p = fro[i];
    for (std::size_t j = 0; j < spec.size(); ++j) {
      if (j != i) p *= spec[j];
    }
    rhs += p;
  }
  return {prod * ratio_sum, rhs};
}

double margin_loss(const Tensor& scores, std::span<const int> labels, double gamma) {
  if (!(gamma >= 0.0)) throw std::invalid_argument("margin_loss: gamma must be nonnegative");
  if (!scores.is_matrix() || scores.rows() != labels.size()) throw ShapeError("margin_loss: one label per row");
  if (labels.empty()) throw std::invalid_argument("margin_loss: empty dataset");
  const std::size_t c = scores.cols();
  std::size_t bad = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw std::out_of_range("margin_loss: label out of range");
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (j != static_cast<std::size_t>(y)) best = std::max(best, scores(i, j));
    }
    if (scores(i, static_cast<std::size_t>(y)) <= gamma + best) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(labels.size());
}

}  // namespace fnl

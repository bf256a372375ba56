#include "fnl/tensor.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace fnl {

namespace {

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void require_matrix(const Tensor& a, const char* op) {
  if (!a.is_matrix()) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(a.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  if (data_.size() != shape_product(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw ShapeError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::diag(std::span<const double> values) {
  const std::size_t n = values.size();
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = values[i];
  return t;
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(*this, other, "+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(*this, other, "-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

Tensor& Tensor::axpy(double s, const Tensor& other) {
  require_same_shape(*this, other, "axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  return *this;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double s, Tensor a) { return a *= s; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  // i-p-j order: each c(i, j) still accumulates over p = 0..k-1 in sequence.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul_tn: leading dimensions differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = pa + p * m;
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (b.dim(1) != a.dim(1)) {
    throw ShapeError("matmul_nt: trailing dimensions differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  // Same summation order as the dot-product loop; the transpose lets the inner loop vectorize.
  return matmul(a, transpose(b));
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

double inner(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "inner");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double trace(const Tensor& a) {
  require_matrix(a, "trace");
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) s += a(i, i);
  return s;
}

Tensor chain_product(std::span<const Tensor> factors) {
  if (factors.empty()) throw ShapeError("chain_product: empty chain");
  Tensor acc = factors[0];
  for (std::size_t i = 1; i < factors.size(); ++i) acc = matmul(acc, factors[i]);
  return acc;
}

Tensor scale_columns(const Tensor& a, std::span<const double> s) {
  require_matrix(a, "scale_columns");
  if (s.size() != a.cols()) throw ShapeError("scale_columns: length mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j) c(i, j) *= s[j];
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

Tensor SvdResult::reconstruct() const {
  return matmul_nt(scale_columns(left, singular_values), right);
}

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kOrthTol = 1e-12;

// Column-major working storage for the Jacobi sweeps.
struct Columns {
  std::size_t len = 0;
  std::vector<std::vector<double>> cols;
};

Columns columns_of(const Tensor& a, bool transposed) {
  Columns c;
  const std::size_t m = a.rows(), n = a.cols();
  if (!transposed) {
    c.len = m;
    c.cols.assign(n, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c.cols[j][i] = a(i, j);
  } else {
    c.len = n;
    c.cols.assign(m, std::vector<double>(n));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c.cols[i][j] = a(i, j);
  }
  return c;
}

double dot(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

void rotate(std::vector<double>& x, std::vector<double>& y, double c, double s) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i], yi = y[i];
    x[i] = c * xi - s * yi;
    y[i] = s * xi + c * yi;
  }
}

// Replaces vectors flagged in `bad` with an orthonormal completion of the rest.
void complete_basis(std::vector<std::vector<double>>& vecs, const std::vector<bool>& bad) {
  const std::size_t len = vecs.empty() ? 0 : vecs[0].size();
  std::vector<std::size_t> good;
  for (std::size_t j = 0; j < vecs.size(); ++j)
    if (!bad[j]) good.push_back(j);
  std::size_t next_axis = 0;
  for (std::size_t j = 0; j < vecs.size(); ++j) {
    if (!bad[j]) continue;
    while (next_axis < len) {
      std::vector<double> v(len, 0.0);
      v[next_axis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (auto g : good) {
          const double p = dot(vecs[g], v);
          for (std::size_t i = 0; i < len; ++i) v[i] -= p * vecs[g][i];
        }
      }
      const double nv = std::sqrt(dot(v, v));
      if (nv > 0.5) {
        for (auto& x : v) x /= nv;
        vecs[j] = std::move(v);
        good.push_back(j);
        break;
      }
    }
  }
}

struct FullSvd {
  std::vector<std::vector<double>> left, right;  // column vectors
  std::vector<double> sigma;
};

FullSvd jacobi_svd(const Tensor& a) {
  require_matrix(a, "svd");
  if (!a.all_finite()) throw std::invalid_argument("svd: input has non-finite entries");
  const bool transposed = a.rows() < a.cols();
  Columns g = columns_of(a, transposed);
  const std::size_t k = g.cols.size();  // min(m, n)
  std::vector<std::vector<double>> acc(k, std::vector<double>(k, 0.0));
  for (std::size_t j = 0; j < k; ++j) acc[j][j] = 1.0;

  const double fro = frobenius_norm(a);
  const double abs_floor = (1e-16 * fro) * (1e-16 * fro);
  bool converged = false;
  double residual = 0.0;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    residual = 0.0;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        const double alpha = dot(g.cols[p], g.cols[p]);
        const double beta = dot(g.cols[q], g.cols[q]);
        const double gamma = dot(g.cols[p], g.cols[q]);
        const double scale = std::sqrt(alpha * beta);
        if (scale <= 0.0 || std::abs(gamma) <= abs_floor) continue;
        const double rel = std::abs(gamma) / scale;
        residual = std::max(residual, rel);
        if (rel <= kOrthTol) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(g.cols[p], g.cols[q], c, s);
        rotate(acc[p], acc[q], c, s);
      }
    }
  }
  if (!converged) {
    throw ConvergenceError("svd: one-sided Jacobi did not converge in " + std::to_string(kMaxSweeps) +
                               " sweeps",
                           residual);
  }

  std::vector<double> sigma(k);
  for (std::size_t j = 0; j < k; ++j) sigma[j] = std::sqrt(dot(g.cols[j], g.cols[j]));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  FullSvd out;
  out.sigma.resize(k);
  std::vector<std::vector<double>> normalized(k), rotations(k);
  std::vector<bool> bad(k, false);
  const double smax = k ? sigma[order[0]] : 0.0;
  for (std::size_t idx = 0; idx < k; ++idx) {
    const std::size_t j = order[idx];
    out.sigma[idx] = sigma[j];
    rotations[idx] = acc[j];
    normalized[idx] = g.cols[j];
    if (sigma[j] <= 1e-14 * smax || sigma[j] == 0.0) {
      bad[idx] = true;
      out.sigma[idx] = (sigma[j] == 0.0) ? 0.0 : sigma[j];
    } else {
      for (auto& x : normalized[idx]) x /= sigma[j];
    }
  }
  complete_basis(normalized, bad);
  if (!transposed) {
    out.left = std::move(normalized);
    out.right = std::move(rotations);
  } else {
    out.left = std::move(rotations);
    out.right = std::move(normalized);
  }
  // Sign convention on the left vectors.
  for (std::size_t j = 0; j < k; ++j) {
    auto& u = out.left[j];
    std::size_t best = 0;
    for (std::size_t i = 1; i < u.size(); ++i)
      if (std::abs(u[i]) > std::abs(u[best])) best = i;
    if (u[best] < 0.0) {
      for (auto& x : u) x = -x;
      for (auto& x : out.right[j]) x = -x;
    }
  }
  return out;
}

}  // namespace

SvdResult svd(const Tensor& a, std::size_t r) {
  require_matrix(a, "svd");
  const std::size_t m = a.rows(), n = a.cols();
  if (r < 1 || r > std::min(m, n)) {
    throw std::invalid_argument("svd: rank " + std::to_string(r) + " outside [1, " +
                                std::to_string(std::min(m, n)) + "]");
  }
  FullSvd full = jacobi_svd(a);
  SvdResult res{Tensor({m, r}), std::vector<double>(full.sigma.begin(), full.sigma.begin() + r), Tensor({n, r})};
  for (std::size_t j = 0; j < r; ++j) {
    for (std::size_t i = 0; i < m; ++i) res.left(i, j) = full.left[j][i];
    for (std::size_t i = 0; i < n; ++i) res.right(i, j) = full.right[j][i];
  }
  return res;
}

std::vector<double> singular_values(const Tensor& a) { return jacobi_svd(a).sigma; }

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  return std::sqrt(s);
}

double spectral_norm(const Tensor& a) {
  require_matrix(a, "spectral_norm");
  if (frobenius_norm(a) == 0.0) return 0.0;
  const std::size_t n = a.cols();
  Rng rng(0x5eedULL);
  Tensor x({n, 1});
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.normal();
  x *= 1.0 / frobenius_norm(x);
  double mu_prev = -1.0, delta_prev = 0.0;
  constexpr int kMaxIter = 20000;
  for (int it = 0; it < kMaxIter; ++it) {
    const Tensor ax = matmul(a, x);
    const double mu = inner(ax, ax);  // Rayleigh quotient of AᵀA at unit x
    Tensor y = matmul_tn(a, ax);
    const double ny = frobenius_norm(y);
    if (ny == 0.0) break;
    if (mu_prev >= 0.0) {
      // Increments shrink geometrically, so the remaining error is about delta·q/(1 − q).
      const double delta = std::abs(mu - mu_prev);
      const double q = delta_prev > 0.0 ? std::min(delta / delta_prev, 0.999) : 0.999;
      if (delta * q / (1.0 - q) <= 1e-11 * mu || delta <= 1e-15 * mu) return std::sqrt(mu);
      delta_prev = delta;
    }
    mu_prev = mu;
    x = std::move(y);
    x *= 1.0 / ny;
  }
  // Degenerate start vector or a stalled iteration.
  return singular_values(a).front();
}

double nuclear_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : singular_values(a)) s += v;
  return s;
}

Tensor vec(const Tensor& a) {
  require_matrix(a, "vec");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor v({m * n});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) v[j * m + i] = a(i, j);
  return v;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Rng::State Rng::state() const { return State{{s_[0], s_[1], s_[2], s_[3]}, has_spare_, spare_}; }

void Rng::set_state(const State& st) {
  for (int i = 0; i < 4; ++i) s_[i] = st.s[i];
  has_spare_ = st.has_spare;
  spare_ = st.spare;
}

Tensor random_gaussian(const Shape& shape, double stddev, Rng& rng) {
  if (!(stddev > 0.0) || !std::isfinite(stddev)) {
    throw std::invalid_argument("random_gaussian: stddev must be positive and finite");
  }
  Tensor t(shape);
  for (auto& x : t.data()) x = stddev * rng.normal();
  return t;
}

Tensor random_gaussian(const Shape& shape, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  return random_gaussian(shape, stddev, rng);
}

}  // namespace fnl

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fnl {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an iterative routine exhausts its iteration cap.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

std::string shape_string(const Shape& shape);

/// Dense row-major n-dimensional array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Builds a matrix from nested rows, e.g. Tensor::from_rows({{1, 2}, {3, 4}}).
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor diag(std::span<const double> values);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_matrix() const { return shape_.size() == 2; }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Same data, new shape. The element count must not change.
  Tensor reshaped(Shape shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);
  /// this += s * other
  Tensor& axpy(double s, const Tensor& other);
  void fill(double v);

  bool all_finite() const;
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double s, Tensor a);

/// Exact matrix product with sequential summation over the inner index.
Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ·b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a·bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);
/// Sum of elementwise products, i.e. trace(aᵀb) for matrices.
double inner(const Tensor& a, const Tensor& b);
double trace(const Tensor& a);
/// Product of a chain of matrices, multiplied left to right.
Tensor chain_product(std::span<const Tensor> factors);
/// Scales column j of a by s[j].
Tensor scale_columns(const Tensor& a, std::span<const double> s);
double max_abs_diff(const Tensor& a, const Tensor& b);

struct SvdResult {
  Tensor left;                        // m×r, orthonormal columns
  std::vector<double> singular_values;  // nonincreasing, length r
  Tensor right;                       // n×r, orthonormal columns

  Tensor reconstruct() const;
};

/// Top-r singular triplets by one-sided Jacobi. Each left singular vector has its
/// largest-magnitude entry nonnegative (lowest index wins ties).
SvdResult svd(const Tensor& a, std::size_t r);
/// All min(m, n) singular values, nonincreasing.
std::vector<double> singular_values(const Tensor& a);

double frobenius_norm(const Tensor& a);
double spectral_norm(const Tensor& a);
double nuclear_norm(const Tensor& a);

/// Column-major stacking of a matrix.
Tensor vec(const Tensor& a);

/// xoshiro256** seeded through splitmix64; normals via Box–Muller.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  struct State {
    std::uint64_t s[4];
    bool has_spare;
    double spare;
    bool operator==(const State&) const = default;
  };
  State state() const;
  void set_state(const State& st);

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor random_gaussian(const Shape& shape, double stddev, std::uint64_t seed);
Tensor random_gaussian(const Shape& shape, double stddev, Rng& rng);

}  // namespace fnl

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fnl/tensor.hpp"

namespace fnl {

enum class FactorMode { lowrank, full, deep, wide };

std::string to_string(FactorMode mode);
FactorMode factor_mode_from_string(const std::string& s);

/// W = U·(M_1···M_d)·Vᵀ with U m×r, each M_j r×r and V n×r.
struct FactorizedParam {
  Tensor u;
  std::vector<Tensor> inner;
  Tensor v;
  FactorMode mode = FactorMode::lowrank;

  std::size_t rows() const { return u.rows(); }
  std::size_t cols() const { return v.rows(); }
  std::size_t rank() const { return u.cols(); }
  std::size_t depth() const { return inner.size(); }
  std::size_t param_count() const;

  /// Throws if the factor shapes or the mode invariants do not hold.
  void validate() const;
};

/// Gradient buffers shaped like a FactorizedParam's factors.
struct FactorGrads {
  Tensor u;
  std::vector<Tensor> inner;
  Tensor v;

  static FactorGrads zeros_like(const FactorizedParam& fp);
  void zero();
  FactorGrads& operator+=(const FactorGrads& other);
};

/// U·(∏M_j)·Vᵀ, multiplied left to right.
Tensor recompose(const FactorizedParam& fp);

/// U = Ũ·√Σ, V = Ṽ·√Σ from the rank-r SVD of w.
FactorizedParam spectral_init(const Tensor& w, std::size_t r);

/// Gaussian U and V with std √(2/fan_in) and identity inner factors. fan_in
/// defaults to n when zero.
FactorizedParam default_factor_init(std::size_t m, std::size_t n, std::size_t r, std::size_t depth,
                                    std::uint64_t seed, std::size_t fan_in = 0);

/// Rank implied by the mode: full and deep use r = m, wide uses 3m.
std::size_t overcomplete_rank(FactorMode mode, std::size_t m);

/// clamp(round(scale·c_out·k), 1, min(c_out·k, c_in·k)); exact .5 ties round down.
std::size_t rank_from_scale(double scale, std::size_t c_out, std::size_t k, std::size_t c_in);

struct CompressionReport {
  std::size_t original_params = 0;
  std::size_t factorized_params = 0;
  double rate = 0.0;

  static CompressionReport from_counts(std::size_t original, std::size_t factorized);
};

}  // namespace fnl

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fnl/tensor.hpp"

namespace fnl {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}
  void zero_grad() { grad.fill(0.0); }
};

using Labels = std::vector<int>;

// ---------------------------------------------------------------------------
// Fully connected: y = x·Wᵀ with W m×n and x B×n.

Tensor fc_forward(const Tensor& w, const Tensor& x);

struct FcGrads {
  Tensor dw;
  Tensor dx;
};
FcGrads fc_backward(const Tensor& w, const Tensor& x, const Tensor& dy);

/// Gradients of a layer whose weight is left·rightᵀ, computed on the factored path.
struct FactorPairGrads {
  Tensor dleft;
  Tensor dright;
  Tensor dx;
};

/// y = x·right·leftᵀ, i.e. the fc layer with W = left·rightᵀ (left m×r, right n×r).
Tensor factorized_fc_forward(const Tensor& left, const Tensor& right, const Tensor& x);
FactorPairGrads factorized_fc_backward(const Tensor& left, const Tensor& right, const Tensor& x,
                                       const Tensor& dy);

// ---------------------------------------------------------------------------
// 2d convolution, NCHW, zero "same" padding of (k-1)/2, stride 1 or 2.

Tensor conv2d_forward(const Tensor& kernel, const Tensor& x, std::size_t stride = 1);

struct ConvGrads {
  Tensor dkernel;
  Tensor dx;
};
ConvGrads conv2d_backward(const Tensor& kernel, const Tensor& x, const Tensor& dy, std::size_t stride = 1);

/// (c_out, c_in, k, k) -> (c_out·k) × (c_in·k); rows are (output channel, kernel row),
/// columns are (input channel, kernel column).
Tensor conv_kernel_to_matrix(const Tensor& kernel);
Tensor matrix_to_conv_kernel(const Tensor& w, std::size_t c_out, std::size_t c_in, std::size_t k);

/// Two 1d convolutions: rightᵀ (r × c_in·k) along the width axis, then left
/// (c_out·k × r) along the height axis. Equals conv2d_forward with the kernel
/// matrix_to_conv_kernel(left·rightᵀ).
Tensor factorized_conv_forward(const Tensor& left, const Tensor& right, const Tensor& x, std::size_t k,
                               std::size_t stride = 1);
FactorPairGrads factorized_conv_backward(const Tensor& left, const Tensor& right, const Tensor& x,
                                         const Tensor& dy, std::size_t k, std::size_t stride = 1);

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride);

// ---------------------------------------------------------------------------
// Batch normalization over axis 1 of a (B, C) or (B, C, H, W) tensor.

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kNormMomentum = 0.1;

struct NormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

/// Training mode normalizes with batch statistics and updates the running ones;
/// evaluation mode uses the running statistics. `cache` may be null.
Tensor batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, bool training, NormCache* cache);

struct NormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};
NormGrads batch_norm_backward(const Tensor& dy, const Tensor& gamma, const NormCache& cache);

/// Standardized pre-activation x·Wᵀ with a per-feature affine map, batch statistics.
/// g(ρW, x) = g(W, x) for every ρ > 0 up to the epsilon in the variance.
Tensor norm_layer_forward(const Tensor& w, const Tensor& x, const Tensor& gamma, const Tensor& beta);

// ---------------------------------------------------------------------------

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

/// Mean negative log-softmax of the labelled class; grad = (softmax - onehot) / B.
LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Row-wise softmax of a matrix.
Tensor softmax_rows(const Tensor& logits);

// ---------------------------------------------------------------------------
// Multi-head attention: Σ_h softmax(x·Q_h·K_hᵀ·xᵀ / √r)·x·V_h·O_hᵀ.

struct AttentionHead {
  Tensor q, k, v, o;  // each d × r
};

struct MhaCache {
  Tensor x;
  std::vector<Tensor> xq, xk, xv, probs, mixed;  // per head
};

Tensor mha_forward(std::span<const AttentionHead> heads, const Tensor& x, MhaCache* cache = nullptr);

struct MhaGrads {
  std::vector<AttentionHead> heads;
  Tensor dx;
};
MhaGrads mha_backward(std::span<const AttentionHead> heads, const MhaCache& cache, const Tensor& dy);

// ---------------------------------------------------------------------------

/// Compares `analytic` against central differences of `loss` taken by perturbing
/// `param` in place one coordinate at a time. Returns the worst relative error;
/// coordinates whose absolute discrepancy is at most 1e-8 count as exact.
double finite_diff_check(const std::function<double()>& loss, Tensor& param, const Tensor& analytic, double eps);

}  // namespace fnl

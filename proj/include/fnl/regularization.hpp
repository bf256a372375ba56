#pragma once

#include <span>
#include <string>
#include <vector>

#include "fnl/factorization.hpp"

namespace fnl {

enum class DecayMode { none, wd, crs, fd };
enum class MhaTarget { ov_only, ov_and_qk };

std::string to_string(DecayMode mode);
DecayMode decay_mode_from_string(const std::string& s);
std::string to_string(MhaTarget target);
MhaTarget mha_target_from_string(const std::string& s);

struct DecayConfig {
  DecayMode mode = DecayMode::none;
  double lambda = 0.0;
  MhaTarget mha_target = MhaTarget::ov_only;

  void validate() const;
};

/// (λ/2)(‖U‖² + ‖V‖² + Σ‖M_j‖²)
double wd_penalty(const FactorizedParam& fp, double lambda);
/// λ·P for every factor P.
FactorGrads wd_gradients(const FactorizedParam& fp, double lambda);

/// (λ/2)‖U(∏M_j)Vᵀ‖²
double fd_penalty(const FactorizedParam& fp, double lambda);
/// With P = ∏M_j and W = U·P·Vᵀ: ∇U = λ·W·V·Pᵀ, ∇V = λ·Wᵀ·U·P and
/// ∇M_j = λ·Aᵀ·W·Bᵀ where A = U·M_1···M_{j-1}, B = M_{j+1}···M_d·Vᵀ.
FactorGrads fd_gradients(const FactorizedParam& fp, double lambda);

/// Weight decay coefficient scaled by the compression rate.
double crs_lambda(double lambda, const CompressionReport& report);

struct NuclearBoundGap {
  double lhs = 0.0;  // (‖U‖² + ‖V‖²) / 2
  double rhs = 0.0;  // ‖U·Vᵀ‖_*
  double gap = 0.0;
};
/// Requires a depth-0 factorization.
NuclearBoundGap nuclear_bound_gap(const FactorizedParam& fp);

/// The two quadratic forms of one attention head: QK (u = Q, v = K) and OV (u = V, v = O).
struct AttentionForms {
  FactorizedParam qk;
  FactorizedParam ov;
};

struct AttentionFormGrads {
  FactorGrads qk;
  FactorGrads ov;
};

/// Frobenius decay on each head's OV form, and on its QK form when the target
/// includes it. Untargeted forms get zero gradients.
std::vector<AttentionFormGrads> mha_decay(std::span<const AttentionForms> heads, const DecayConfig& cfg);

}  // namespace fnl

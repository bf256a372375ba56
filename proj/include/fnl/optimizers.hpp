#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fnl/factorization.hpp"
#include "fnl/regularization.hpp"

namespace fnl {

// ---------------------------------------------------------------------------
// Single-tensor update rules.

/// buf ← momentum·buf + g; p ← p − lr·buf. With momentum 0 this is p − lr·g.
void sgd_step(Tensor& p, const Tensor& g, Tensor& momentum_buf, double lr, double momentum);

struct LambConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double max_trust = 10.0;
};

struct MomentBuffers {
  Tensor first;
  Tensor second;

  static MomentBuffers zeros_like(const Tensor& t) { return {Tensor::zeros_like(t), Tensor::zeros_like(t)}; }
};

/// ‖p‖ / ‖step‖ clamped to [0, max_trust]; 1 when either norm is zero.
double trust_ratio(double param_norm, double step_norm, double max_trust);

/// Adam moments from g, u = m̂/(√v̂ + ε), then p ← p − lr·φ·(u + decay) with
/// φ = trust_ratio(‖p‖, ‖u + decay‖). `decay` may be null. `step` counts from 1.
void lamb_update(Tensor& p, const Tensor& g, MomentBuffers& mb, std::int64_t step, double lr,
                 const LambConfig& cfg, const Tensor* decay);

/// LAMB with decoupled decay λ·p.
void lamb_step(Tensor& p, const Tensor& g, MomentBuffers& mb, std::int64_t step, double lr, double lambda,
               const LambConfig& cfg);

struct FactorMoments {
  MomentBuffers u;
  std::vector<MomentBuffers> inner;
  MomentBuffers v;

  static FactorMoments zeros_like(const FactorizedParam& fp);
};

/// LAMB with λ·P replaced by the Frobenius gradients λ·U·Vᵀ·V (for U) and
/// λ·V·Uᵀ·U (for V), both evaluated before either factor moves.
void flambe_step(FactorizedParam& fp, const FactorGrads& g, FactorMoments& mb, std::int64_t step, double lr,
                 double lambda, const LambConfig& cfg);

// ---------------------------------------------------------------------------
// Learning-rate schedules.

struct LrSchedule {
  enum class Kind { constant, step_decay, warmup_const };
  Kind kind = Kind::constant;
  double base_lr = 0.1;
  std::vector<std::int64_t> milestones;  // step_decay: multiply by 0.1 once step passes each
  std::int64_t warmup_steps = 0;         // warmup_const: linear ramp length

  /// Learning rate of update number `step`, counting from 1.
  double at(std::int64_t step) const;
};

std::string to_string(LrSchedule::Kind kind);
LrSchedule::Kind lr_kind_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Model-level optimizer over a set of dense and factorized parameters.

struct DenseSlot {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

enum class FactorRole { layer, attention_ov, attention_qk };

struct FactorSlot {
  std::string name;
  FactorizedParam* value;
  FactorGrads* grad;
  FactorRole role = FactorRole::layer;
};

struct ParamSet {
  std::vector<DenseSlot> dense;
  std::vector<FactorSlot> factors;

  /// Every trainable tensor in a fixed order: dense slots, then each factor's U, M_j..., V.
  std::vector<DenseSlot> flatten() const;
};

enum class OptimizerKind { sgd, lamb, flambe };
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;
  LambConfig lamb;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

/// Per-parameter buffers and the step counter.
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<Tensor> momentum;  // SGD, one per flattened tensor
  std::vector<Tensor> first;     // LAMB/FLAMBé
  std::vector<Tensor> second;
};

/// Applies the decay scheme with the optimizer's semantics: SGD adds decay
/// gradients to the data gradients; LAMB and FLAMBé apply decay in the
/// trust-ratio term, except that LAMB with Frobenius decay adds the Frobenius
/// gradients to the data gradients.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, DecayConfig decay, double compression_rate = 1.0);

  void step(const ParamSet& params, double lr);

  const OptimizerConfig& config() const { return cfg_; }
  const DecayConfig& decay() const { return decay_; }
  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }
  /// λ after compression-rate scaling.
  double effective_lambda() const;

 private:
  bool frobenius_target(FactorRole role) const;
  void ensure_state(const std::vector<DenseSlot>& flat);

  OptimizerConfig cfg_;
  DecayConfig decay_;
  double compression_rate_;
  OptimizerState state_;
  bool warned_ = false;
};

}  // namespace fnl

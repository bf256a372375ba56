#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fnl/factorization.hpp"

namespace fnl {

enum class Phase { train, eval };
std::string to_string(Phase phase);
Phase phase_from_string(const std::string& s);

struct MetricRow {
  std::int64_t step = 0;
  Phase phase = Phase::train;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

/// Metric rows in emission order. Steps never decrease within a phase and
/// values are always finite.
class MetricTrace {
 public:
  void add(std::int64_t step, Phase phase, std::string metric, double value);
  const std::vector<MetricRow>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  /// Last value of `metric` in `phase`, or throws if absent.
  double last(Phase phase, const std::string& metric) const;
  /// (step, value) pairs of one series.
  std::vector<std::pair<std::int64_t, double>> series(Phase phase, const std::string& metric) const;

  /// `step,phase,metric,value` with shortest round-trip reals and \n endings.
  std::string to_csv() const;
  void write_csv(std::ostream& os) const;
  static MetricTrace from_csv(const std::string& text);

  bool operator==(const MetricTrace&) const = default;

 private:
  std::vector<MetricRow> rows_;
};

/// Shortest decimal string that parses back to exactly `v`.
std::string format_real(double v);
double parse_real(const std::string& s);

// ---------------------------------------------------------------------------

/// Mean over layers of lr / ‖W_i‖². Zero-norm layers are skipped with a warning.
double effective_step_size(std::span<const Tensor> weights, double lr);

/// ŵ − (lr/ρ²)(I − ŵŵᵀ)vec(∇̂) with ρ = ‖UVᵀ‖, ŵ = vec(UVᵀ)/ρ,
/// ∇̂ = ∇·V·Vᵀ + U·Uᵀ·∇ and ∇ = ρ·grad_w.
Tensor claim1_predicted_direction(const Tensor& u, const Tensor& v, const Tensor& grad_w, double lr);

/// vec(W')/‖W'‖ after U ← U − lr·G·V, V ← V − lr·Gᵀ·U applied simultaneously.
Tensor claim1_actual_direction(const Tensor& u, const Tensor& v, const Tensor& grad_w, double lr);

struct Claim1Fit {
  double slope = 0.0;
  bool exact = false;           // every error below 1e-14
  std::vector<double> errors;   // ‖actual − predicted‖ per learning rate
};
Claim1Fit claim1_order_check(const Tensor& u, const Tensor& v, const Tensor& grad_w, std::span<const double> lrs);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

/// Scales U and V by √(target/‖W‖) so that ‖W‖ = target.
void rescale_to_norm(FactorizedParam& fp, double target);

struct NuclearStats {
  double nuclear_mean = 0.0;  // mean of ‖U·Vᵀ‖_*
  double bound_mean = 0.0;    // mean of (‖U‖² + ‖V‖²)/2
};
NuclearStats nuclear_trace(std::span<const FactorizedParam* const> layers);

// ---------------------------------------------------------------------------
// Margin bound terms with unit constants.

struct BoundInputs {
  std::vector<Tensor> weights;  // recomposed layer matrices
  double margin = 1.0;          // γ
  double data_bound = 1.0;      // B
  std::size_t samples = 1;      // |S|
  std::size_t width = 1;        // m
  double delta = 0.01;

  std::size_t depth() const { return weights.size(); }
};

/// √((B²L³mσ^{2L}·r·log(Lm)·∏‖W_i‖₂² + log(L|S|/δ)) / (γ²|S|)), σ = max ‖W_i‖₂.
double cor1_bound(const BoundInputs& in, std::size_t r);
/// √((B²L²mσ^{2L−2}·log(Lm)·Σ‖W_i‖_F² + log(L|S|/δ)) / (γ²|S|)).
double cor2_bound(const BoundInputs& in);

/// Both sides of (∏‖W_i‖₂²)·Σ‖W_i‖_F²/‖W_i‖₂² = Σ‖W_i‖_F²·∏_{j≠i}‖W_j‖₂².
std::pair<double, double> cor2_identity_sides(std::span<const Tensor> weights);

/// Fraction of rows whose labelled score is at most γ plus the best other score.
double margin_loss(const Tensor& scores, std::span<const int> labels, double gamma);

}  // namespace fnl

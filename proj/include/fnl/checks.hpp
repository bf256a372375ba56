#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace fnl {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// A gradient case: for one seed, compares analytic gradients of a scalar
/// objective against central differences and returns the worst relative error.
struct GradientCase {
  std::string name;
  std::function<double(std::uint64_t seed)> worst_error;
};

/// Every layer and decay gradient the library defines.
std::vector<GradientCase> gradient_cases();

/// Runs the built-in verifiers. `seeds` sets the repetitions per randomized check.
std::vector<CheckResult> run_checks(std::size_t seeds = 5);

}  // namespace fnl

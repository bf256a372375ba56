#pragma once

#include <string>
#include <vector>

#include "fnl/experiment.hpp"

namespace fnl {

struct SuiteCell {
  std::string name;
  std::string overrides = "{}";  // JSON merge patch over the base config
};

/// Compares cell means of one metric. "ge": mean(left) ≥ mean(right) − k·se;
/// "gt": mean(left) − mean(right) > k·se; "le": mean(left) − mean(right) ≤ k·se.
/// se is the pooled standard error. With an empty `right`, compares
/// mean(left) against `value`.
struct SuiteAssertion {
  std::string left;
  std::string right;
  std::string metric = "eval_accuracy";
  std::string op = "ge";
  double k = 0.0;
  double value = 0.0;
};

struct SuiteGrid {
  std::string name = "suite";
  std::string base_json = "{}";
  std::vector<SuiteCell> cells;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::string> metrics{"eval_accuracy", "eval_loss"};
  std::vector<SuiteAssertion> assertions;
  std::size_t threads = 1;
};

SuiteGrid grid_from_json(const std::string& text);
SuiteGrid load_grid(const std::string& path);

struct CellStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  std::size_t n = 0;
};

struct SuiteRun {
  std::string cell;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::map<std::string, double> metrics;
};

struct SuiteResult {
  std::vector<SuiteRun> runs;  // cell-major, then seed order
  std::vector<std::string> assertion_failures;
  std::vector<std::string> assertion_reports;

  CellStats stats(const std::string& cell, const std::string& metric) const;
  /// `cell,seed,<metric>...`: one row per run and one `summary` row per cell with mean±std.
  std::string to_csv(const std::vector<std::string>& metrics, const std::vector<std::string>& cells) const;
  bool ok() const;
};

/// Runs every cell for every seed. A failed run is recorded and the suite continues.
SuiteResult run_suite(const SuiteGrid& grid);

}  // namespace fnl

#include "fnl/suite.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace fnl {

using nlohmann::json;

SuiteGrid grid_from_json(const std::string& text) {
  const json j = json::parse(text);
  for (const auto& [key, _] : j.items()) {
    static const std::vector<std::string> allowed{"name", "base", "cells", "seeds", "metrics", "assertions", "threads"};
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument("grid: unknown key '" + key + "'");
    }
  }
  SuiteGrid g;
  if (j.contains("name")) g.name = j["name"].get<std::string>();
  if (j.contains("base")) g.base_json = j["base"].dump();
  if (j.contains("seeds")) g.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  if (j.contains("metrics")) g.metrics = j["metrics"].get<std::vector<std::string>>();
  if (j.contains("threads")) g.threads = j["threads"].get<std::size_t>();
  if (j.contains("cells")) {
    for (const auto& c : j["cells"]) {
      SuiteCell cell;
      cell.name = c.at("name").get<std::string>();
      if (c.contains("overrides")) cell.overrides = c["overrides"].dump();
      g.cells.push_back(cell);
    }
  } else {
    g.cells.push_back({"base", "{}"});
  }
  if (j.contains("assertions")) {
    for (const auto& a : j["assertions"]) {
      SuiteAssertion s;
      s.left = a.at("left").get<std::string>();
      if (a.contains("right")) s.right = a["right"].get<std::string>();
      if (a.contains("metric")) s.metric = a["metric"].get<std::string>();
      if (a.contains("op")) s.op = a["op"].get<std::string>();
      if (a.contains("k")) s.k = a["k"].get<double>();
      if (a.contains("value")) s.value = a["value"].get<double>();
      if (s.op != "ge" && s.op != "gt" && s.op != "le") throw std::invalid_argument("grid: assertion op must be ge, gt or le");
      g.assertions.push_back(s);
    }
  }
  if (g.seeds.empty()) throw std::invalid_argument("grid: need at least one seed");
  if (g.threads < 1) g.threads = 1;
  // Fail early on bad cells rather than once per run.
  for (const auto& c : g.cells) {
    ExperimentConfig base = config_from_json(g.base_json);
    apply_overrides(base, c.overrides);
  }
  return g;
}

SuiteGrid load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return grid_from_json(ss.str());
}

CellStats SuiteResult::stats(const std::string& cell, const std::string& metric) const {
  std::vector<double> xs;
  for (const auto& r : runs) {
    if (r.cell != cell || !r.ok) continue;
    auto it = r.metrics.find(metric);
    if (it != r.metrics.end()) xs.push_back(it->second);
  }
  CellStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

std::string SuiteResult::to_csv(const std::vector<std::string>& metrics, const std::vector<std::string>& cells) const {
  std::ostringstream os;
  os << "cell,seed";
  for (const auto& m : metrics) os << ',' << m;
  os << '\n';
  for (const auto& cell : cells) {
    for (const auto& r : runs) {
      if (r.cell != cell) continue;
      os << r.cell << ',' << r.seed;
      for (const auto& m : metrics) {
        os << ',';
        if (!r.ok) {
          os << "error";
          continue;
        }
        auto it = r.metrics.find(m);
        if (it != r.metrics.end()) os << format_real(it->second);
      }
      os << '\n';
    }
    os << cell << ",summary";
    for (const auto& m : metrics) {
      const CellStats s = stats(cell, m);
      os << ',';
      if (s.n > 0) os << format_real(s.mean) << "±" << format_real(s.stddev);
    }
    os << '\n';
  }
  return os.str();
}

bool SuiteResult::ok() const {
  if (!assertion_failures.empty()) return false;
  for (const auto& r : runs) {
    if (!r.ok) return false;
  }
  return true;
}

SuiteResult run_suite(const SuiteGrid& grid) {
  const ExperimentConfig base = config_from_json(grid.base_json);
  struct Job {
    std::string cell;
    ExperimentConfig cfg;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& c : grid.cells) {
    const ExperimentConfig cell_cfg = apply_overrides(base, c.overrides);
    for (auto seed : grid.seeds) {
      ExperimentConfig cfg = cell_cfg;
      cfg.seed = seed;
      jobs.push_back({c.name, cfg, seed});
    }
  }
  SuiteResult res;
  res.runs.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i; (i = next++) < jobs.size();) {
      SuiteRun& run = res.runs[i];
      run.cell = jobs[i].cell;
      run.seed = jobs[i].seed;
      try {
        run.metrics = train(jobs[i].cfg).final_metrics;
        run.ok = true;
      } catch (const std::exception& e) {
        run.error = e.what();
      }
    }
  };
  const std::size_t n_threads = std::min(grid.threads, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& a : grid.assertions) {
    const CellStats l = res.stats(a.left, a.metric);
    std::ostringstream msg;
    bool pass;
    if (l.n == 0) {
      pass = false;
      msg << a.left << ": no successful runs for " << a.metric;
    } else if (a.right.empty()) {
      pass = a.op == "le" ? l.mean <= a.value : (a.op == "gt" ? l.mean > a.value : l.mean >= a.value);
      msg << a.metric << ": " << a.left << " " << format_real(l.mean) << " " << a.op << " " << format_real(a.value);
    } else {
      const CellStats r = res.stats(a.right, a.metric);
      const double se = std::sqrt((l.n ? l.stddev * l.stddev / static_cast<double>(l.n) : 0.0) +
                                  (r.n ? r.stddev * r.stddev / static_cast<double>(r.n) : 0.0));
      const double diff = l.mean - r.mean;
      if (r.n == 0) {
        pass = false;
      } else if (a.op == "gt") {
        pass = diff > a.k * se;
      } else if (a.op == "le") {
        pass = diff <= a.k * se;
      } else {
        pass = diff >= -a.k * se;
      }
      msg << a.metric << ": " << a.left << " " << format_real(l.mean) << " " << a.op << " " << a.right << " "
          << format_real(r.mean) << " (k=" << format_real(a.k) << ", pooled se " << format_real(se) << ")";
    }
    res.assertion_reports.push_back((pass ? "PASS " : "FAIL ") + msg.str());
    if (!pass) res.assertion_failures.push_back(msg.str());
  }
  return res;
}

}  // namespace fnl

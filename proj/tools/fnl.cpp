#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "fnl/checks.hpp"
#include "fnl/diagnostics.hpp"
#include "fnl/experiment.hpp"
#include "fnl/suite.hpp"

namespace fs = std::filesystem;
using namespace fnl;

namespace {

std::string default_out_dir() {
  const char* env = std::getenv("FNL_OUT_DIR");
  return env && *env ? env : "runs";
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, std::string out,
              const std::string& resume_path, bool quiet) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  if (out.empty()) out = (fs::path(default_out_dir()) / (fs::path(config_path).stem().string() + "_seed" + std::to_string(cfg.seed))).string();
  fs::create_directories(out);

  Checkpoint resume;
  TrainOptions opts;
  opts.verbose = !quiet;
  if (!resume_path.empty()) {
    resume = Checkpoint::load(resume_path);
    opts.resume = &resume;
  }
  const std::string ckpt_path = (fs::path(out) / "checkpoint.json").string();
  opts.on_epoch = [&](const Checkpoint& c) { c.save(ckpt_path); };
  const TrainResult res = train(cfg, opts);
  write_run(out, cfg, res);
  for (const auto& [k, v] : res.final_metrics) std::cout << k << " " << format_real(v) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_suite(const std::string& grid_path, std::string out, std::size_t threads) {
  SuiteGrid grid = load_grid(grid_path);
  if (threads > 0) grid.threads = threads;
  const SuiteResult res = run_suite(grid);
  std::vector<std::string> cells;
  for (const auto& c : grid.cells) cells.push_back(c.name);
  const std::string csv = res.to_csv(grid.metrics, cells);
  if (out.empty()) out = (fs::path(default_out_dir()) / (grid.name + ".csv")).string();
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream(out, std::ios::binary) << csv;
  std::cout << csv;
  for (const auto& r : res.runs) {
    if (!r.ok) std::cout << "run failed: " << r.cell << " seed " << r.seed << ": " << r.error << "\n";
  }
  for (const auto& line : res.assertion_reports) std::cout << line << "\n";
  std::cout << "wrote " << out << "\n";
  return res.ok() ? 0 : 1;
}

int cmd_check(std::size_t seeds) {
  int failed = 0;
  for (const auto& r : run_checks(seeds)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    if (!r.passed) ++failed;
  }
  std::cout << (failed ? std::to_string(failed) + " check(s) failed" : "all checks passed") << "\n";
  return failed ? 1 : 0;
}

int cmd_diagnose(const std::string& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const ExperimentConfig cfg = config_from_json(ckpt.config_json);
  Model model = model_from_checkpoint(ckpt);
  std::cout << "config " << ckpt.config_hash << "  step " << ckpt.step << "  epoch " << ckpt.epoch << "\n";
  std::cout << "parameters " << model.param_count() << "  compression rate " << format_real(compression_rate(cfg, model)) << "\n\n";

  std::cout << "layer norms (frobenius, spectral, nuclear, factor bound gap)\n";
  BoundInputs bound;
  std::vector<Tensor> normalized;
  for (auto& l : model.layers()) {
    const Weight* w = l->weight();
    if (!w) continue;
    const Tensor m = l->weight_matrix();
    std::cout << "  " << l->name() << (w->factorized ? " [" + to_string(w->factors.mode) + " r=" + std::to_string(w->factors.rank()) + "]" : " [dense]")
              << "  " << format_real(frobenius_norm(m)) << "  " << format_real(spectral_norm(m)) << "  "
              << format_real(nuclear_norm(m));
    if (w->factorized && w->factors.depth() == 0) std::cout << "  " << format_real(nuclear_bound_gap(w->factors).gap);
    std::cout << "\n";
    bound.weights.push_back(m);
    bound.width = std::max({bound.width, m.rows(), m.cols()});
    if (w->factorized && l->normalized) normalized.push_back(m);
  }
  const double lr = cfg.optimizer.lr;
  if (!normalized.empty()) std::cout << "\neffective step size at lr " << format_real(lr) << ": " << format_real(effective_step_size(normalized, lr)) << "\n";

  const DataSplit data = make_datasets(cfg);
  const Tensor logits = eval_logits(model, data.eval);
  std::cout << "\neval accuracy " << format_real(accuracy(logits, data.eval.y)) << "\n";
  for (double g : {0.0, 0.5, 1.0, 2.0}) std::cout << "  margin loss at gamma " << g << ": " << format_real(margin_loss(logits, data.eval.y, g)) << "\n";

  if (!bound.weights.empty()) {
    bound.samples = data.train.size();
    double b = 0.0;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const std::size_t per = data.train.x.size() / data.train.size();
      double sq = 0.0;
      for (std::size_t j = 0; j < per; ++j) sq += data.train.x[i * per + j] * data.train.x[i * per + j];
      b = std::max(b, std::sqrt(sq));
    }
    bound.data_bound = b;
    std::size_t rank = 0;
    for (const auto& m : bound.weights) rank = std::max(rank, std::min(m.rows(), m.cols()));
    std::cout << "\nrelative bound terms (unit constants, margin 1, delta 0.01)\n";
    std::cout << "  rank-based: " << format_real(cor1_bound(bound, rank)) << "\n";
    std::cout << "  frobenius-based: " << format_real(cor2_bound(bound)) << "\n";
  }

  std::cout << "\neffective step-size update check (log-log slope of prediction error)\n";
  Rng rng(ckpt.step);
  const std::vector<double> lrs{1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4};
  for (auto& l : model.layers()) {
    Weight* w = l->weight();
    if (!w || !w->factorized || w->factors.depth() != 0) continue;
    const Tensor g = random_gaussian({w->factors.rows(), w->factors.cols()}, 1.0, rng);
    const Claim1Fit fit = claim1_order_check(w->factors.u, w->factors.v, g, lrs);
    std::cout << "  " << l->name() << ": " << (fit.exact ? "exact" : format_real(fit.slope)) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorized layer training, regularization and diagnostics"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train one configuration");
  std::string config_path, out, resume_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  train->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--out", out, "Output directory (default: $FNL_OUT_DIR or ./runs, plus a per-run folder)");
  train->add_option("--resume", resume_path, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_flag("--quiet", quiet, "No per-epoch progress");

  auto* suite = app.add_subcommand("suite", "Run a grid of configs over seeds");
  std::string grid_path, suite_out;
  std::size_t threads = 0;
  suite->add_option("--grid", grid_path, "Grid file (JSON)")->required()->check(CLI::ExistingFile);
  suite->add_option("--out", suite_out, "Summary CSV path (default: $FNL_OUT_DIR or ./runs, <grid name>.csv)");
  suite->add_option("--threads", threads, "Worker threads (default: from the grid)");

  auto* check = app.add_subcommand("check", "Run the built-in oracle and invariant verifiers");
  std::size_t seeds = 5;
  check->add_option("--seeds", seeds, "Repetitions per randomized check")->check(CLI::PositiveNumber);

  auto* diagnose = app.add_subcommand("diagnose", "Report norms, bounds and step-size checks for a checkpoint");
  std::string ckpt_path;
  diagnose->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config_path, seed, out, resume_path, quiet);
    if (*suite) return cmd_suite(grid_path, suite_out, threads);
    if (*check) return cmd_check(seeds);
    if (*diagnose) return cmd_diagnose(ckpt_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

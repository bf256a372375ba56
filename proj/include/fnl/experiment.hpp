#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fnl/data.hpp"
#include "fnl/diagnostics.hpp"
#include "fnl/model.hpp"
#include "fnl/optimizers.hpp"
#include "fnl/regularization.hpp"

namespace fnl {

struct TaskConfig {
  std::string name = "blobs_cls";  // blobs_cls | patches_cls | seq_copy
  std::size_t n_train = 512;
  std::size_t n_eval = 256;
  std::size_t classes = 4;
  std::size_t dim = 8;        // blobs
  double spread = 1.0;        // blobs
  double noise = 0.5;         // patches
  std::size_t seq_len = 8;    // seq_copy
  std::size_t vocab = 8;      // seq_copy
  std::uint64_t data_seed = 1;
};

struct OptimSettings {
  std::string name = "sgd";  // sgd | lamb | flambe
  double lr = 0.1;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  std::string schedule = "constant";  // constant | step_decay | warmup_const
  std::vector<std::int64_t> milestones;  // in epochs
  std::int64_t warmup_steps = 0;
  double clip_norm = 0.0;
};

struct ExperimentConfig {
  TaskConfig task;
  ArchConfig arch;
  FactorizePolicy factorize;
  DecayConfig decay;
  OptimSettings optimizer;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Train without decay on the normalized factorized layers, rescaling them
  /// after every step to the norms of the same run with decay.
  bool norm_match = false;

  void validate() const;
  InputSpec input_spec() const;
};

std::string config_to_json(const ExperimentConfig& cfg);
/// Missing keys take their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Applies a JSON merge patch to the config's JSON form.
ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::string& patch_json);
/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct Checkpoint {
  std::string config_json;
  std::string config_hash;
  std::int64_t step = 0;
  std::size_t epoch = 0;  // completed epochs
  Rng::State rng{};
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, Tensor>> optimizer_tensors;
  std::vector<std::int64_t> optimizer_steps;
  MetricTrace trace;

  std::string to_json() const;
  static Checkpoint from_json(const std::string& text);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

struct TrainOptions {
  /// Continue from this checkpoint instead of initializing.
  const Checkpoint* resume = nullptr;
  /// Stop after this many completed epochs (0 keeps the configured count).
  std::size_t stop_after_epoch = 0;
  /// Called with a checkpoint after every epoch.
  std::function<void(const Checkpoint&)> on_epoch;
  /// Prints one progress line per epoch to stderr.
  bool verbose = false;
};

struct TrainResult {
  std::map<std::string, double> final_metrics;
  MetricTrace trace;
  Checkpoint checkpoint;
  Model model;
  Dataset eval_set;
};

struct DataSplit {
  Dataset train;
  Dataset eval;
};
DataSplit make_datasets(const ExperimentConfig& cfg);

/// Mean cross-entropy and accuracy on a dataset in evaluation mode.
std::pair<double, double> evaluate(Model& model, const Dataset& data);
/// Eval-mode logits for the whole dataset.
Tensor eval_logits(Model& model, const Dataset& data);

double compression_rate(const ExperimentConfig& cfg, const Model& model);

TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts = {});

/// Writes metrics.csv, config.json and checkpoint.json under dir.
void write_run(const std::string& dir, const ExperimentConfig& cfg, const TrainResult& result);

/// Rebuilds the model stored in a checkpoint.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace fnl

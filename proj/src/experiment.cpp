#include "fnl/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fnl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization.

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json to_j(const ExperimentConfig& c) {
  json j;
  j["task"] = {{"name", c.task.name},       {"n_train", c.task.n_train}, {"n_eval", c.task.n_eval},
               {"classes", c.task.classes}, {"dim", c.task.dim},         {"spread", c.task.spread},
               {"noise", c.task.noise},     {"seq_len", c.task.seq_len}, {"vocab", c.task.vocab},
               {"data_seed", c.task.data_seed}};
  j["arch"] = {{"name", c.arch.name},       {"channels", c.arch.channels}, {"strides", c.arch.strides},
               {"hidden", c.arch.hidden},   {"d_model", c.arch.d_model},   {"heads", c.arch.heads},
               {"attn_rank", c.arch.attn_rank}, {"residual", c.arch.residual}};
  j["factorize"] = {{"mode", c.factorize.mode},
                    {"rank_scale", c.factorize.rank_scale},
                    {"target_rate", c.factorize.target_rate},
                    {"rank", c.factorize.rank},
                    {"spectral", c.factorize.spectral}};
  j["decay"] = {{"mode", to_string(c.decay.mode)},
                {"lambda", c.decay.lambda},
                {"mha_target", to_string(c.decay.mha_target)}};
  j["optimizer"] = {{"name", c.optimizer.name},         {"lr", c.optimizer.lr},
                    {"momentum", c.optimizer.momentum}, {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},       {"eps", c.optimizer.eps},
                    {"schedule", c.optimizer.schedule}, {"milestones", c.optimizer.milestones},
                    {"warmup_steps", c.optimizer.warmup_steps}, {"clip_norm", c.optimizer.clip_norm}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["norm_match"] = c.norm_match;
  return j;
}

ExperimentConfig from_j(const json& j) {
  ExperimentConfig c;
  reject_unknown(j, {"task", "arch", "factorize", "decay", "optimizer", "epochs", "batch_size", "seed", "norm_match"},
                 "config");
  if (j.contains("task")) {
    const json& t = j["task"];
    reject_unknown(t, {"name", "n_train", "n_eval", "classes", "dim", "spread", "noise", "seq_len", "vocab", "data_seed"},
                   "task");
    read(t, "name", c.task.name);
    read(t, "n_train", c.task.n_train);
    read(t, "n_eval", c.task.n_eval);
    read(t, "classes", c.task.classes);
    read(t, "dim", c.task.dim);
    read(t, "spread", c.task.spread);
    read(t, "noise", c.task.noise);
    read(t, "seq_len", c.task.seq_len);
    read(t, "vocab", c.task.vocab);
    read(t, "data_seed", c.task.data_seed);
  }
  if (j.contains("arch")) {
    const json& a = j["arch"];
    reject_unknown(a, {"name", "channels", "strides", "hidden", "d_model", "heads", "attn_rank", "residual"}, "arch");
    read(a, "name", c.arch.name);
    read(a, "channels", c.arch.channels);
    read(a, "strides", c.arch.strides);
    read(a, "hidden", c.arch.hidden);
    read(a, "d_model", c.arch.d_model);
    read(a, "heads", c.arch.heads);
    read(a, "attn_rank", c.arch.attn_rank);
    read(a, "residual", c.arch.residual);
  }
  if (j.contains("factorize")) {
    const json& f = j["factorize"];
    reject_unknown(f, {"mode", "rank_scale", "rank", "target_rate", "spectral"}, "factorize");
    read(f, "mode", c.factorize.mode);
    read(f, "rank_scale", c.factorize.rank_scale);
    read(f, "target_rate", c.factorize.target_rate);
    read(f, "rank", c.factorize.rank);
    read(f, "spectral", c.factorize.spectral);
  }
  if (j.contains("decay")) {
    const json& d = j["decay"];
    reject_unknown(d, {"mode", "lambda", "mha_target"}, "decay");
    if (d.contains("mode")) c.decay.mode = decay_mode_from_string(d["mode"].get<std::string>());
    read(d, "lambda", c.decay.lambda);
    if (d.contains("mha_target")) c.decay.mha_target = mha_target_from_string(d["mha_target"].get<std::string>());
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    reject_unknown(o, {"name", "lr", "momentum", "beta1", "beta2", "eps", "schedule", "milestones", "warmup_steps",
                       "clip_norm"},
                   "optimizer");
    read(o, "name", c.optimizer.name);
    read(o, "lr", c.optimizer.lr);
    read(o, "momentum", c.optimizer.momentum);
    read(o, "beta1", c.optimizer.beta1);
    read(o, "beta2", c.optimizer.beta2);
    read(o, "eps", c.optimizer.eps);
    read(o, "schedule", c.optimizer.schedule);
    read(o, "milestones", c.optimizer.milestones);
    read(o, "warmup_steps", c.optimizer.warmup_steps);
    read(o, "clip_norm", c.optimizer.clip_norm);
  }
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "norm_match", c.norm_match);
  c.validate();
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (task.name != "blobs_cls" && task.name != "patches_cls" && task.name != "seq_copy") {
    throw std::invalid_argument("config: unknown task '" + task.name + "'");
  }
  if (arch.name != "mlp" && arch.name != "smallcnn" && arch.name != "tiny_attn") {
    throw std::invalid_argument("config: unknown arch '" + arch.name + "'");
  }
  const bool seq = task.name == "seq_copy";
  if (seq != (arch.name == "tiny_attn")) throw std::invalid_argument("config: seq_copy pairs with tiny_attn only");
  if (task.name == "patches_cls" && arch.name != "smallcnn") throw std::invalid_argument("config: patches_cls needs smallcnn");
  if (task.name == "blobs_cls" && arch.name != "mlp") throw std::invalid_argument("config: blobs_cls needs mlp");
  if (batch_size < 2) throw std::invalid_argument("config: batch_size must be at least 2");
  if (task.n_train < batch_size) throw std::invalid_argument("config: n_train must be at least batch_size");
  if (task.n_eval < 1) throw std::invalid_argument("config: n_eval must be positive");
  if (!(optimizer.lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
  optimizer_kind_from_string(optimizer.name);
  lr_kind_from_string(optimizer.schedule);
  decay.validate();
  if (norm_match && decay.mode == DecayMode::none) {
    throw std::invalid_argument("config: norm_match needs a decay to take reference norms from");
  }
}

InputSpec ExperimentConfig::input_spec() const {
  InputSpec in;
  in.features = task.dim;
  in.classes = task.name == "seq_copy" ? task.vocab : task.classes;
  in.seq_len = task.seq_len;
  in.vocab = task.vocab;
  return in;
}

std::string config_to_json(const ExperimentConfig& cfg) { return to_j(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_json(const std::string& text) { return from_j(json::parse(text)); }

ExperimentConfig load_config(const std::string& path) { return config_from_json(read_file(path)); }

ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::string& patch_json) {
  json j = to_j(cfg);
  j.merge_patch(json::parse(patch_json));
  return from_j(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string canon = to_j(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

json tensor_to_j(const Tensor& t) {
  json data = json::array();
  for (double v : t.data()) data.push_back(format_real(v));
  return {{"shape", t.shape()}, {"data", data}};
}

Tensor tensor_from_j(const json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data;
  for (const auto& s : j.at("data")) data.push_back(parse_real(s.get<std::string>()));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

std::string Checkpoint::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["config"] = json::parse(config_json);
  j["step"] = step;
  j["epoch"] = epoch;
  j["rng"] = {{"s", {std::to_string(rng.s[0]), std::to_string(rng.s[1]), std::to_string(rng.s[2]),
                     std::to_string(rng.s[3])}},
              {"has_spare", rng.has_spare},
              {"spare", format_real(rng.spare)}};
  json params = json::array();
  for (const auto& [name, t] : tensors) params.push_back({{"name", name}, {"tensor", tensor_to_j(t)}});
  j["parameters"] = params;
  json opt = json::array();
  for (const auto& [name, t] : optimizer_tensors) opt.push_back({{"name", name}, {"tensor", tensor_to_j(t)}});
  j["optimizer"] = {{"steps", optimizer_steps}, {"buffers", opt}};
  json rows = json::array();
  for (const auto& r : trace.rows()) rows.push_back({r.step, to_string(r.phase), r.metric, format_real(r.value)});
  j["trace"] = rows;
  return j.dump(1) + "\n";
}

Checkpoint Checkpoint::from_json(const std::string& text) {
  const json j = json::parse(text);
  Checkpoint c;
  c.config_hash = j.at("config_hash").get<std::string>();
  c.config_json = j.at("config").dump();
  c.step = j.at("step").get<std::int64_t>();
  c.epoch = j.at("epoch").get<std::size_t>();
  const json& r = j.at("rng");
  for (int i = 0; i < 4; ++i) c.rng.s[i] = std::stoull(r.at("s").at(i).get<std::string>());
  c.rng.has_spare = r.at("has_spare").get<bool>();
  c.rng.spare = parse_real(r.at("spare").get<std::string>());
  for (const auto& p : j.at("parameters")) c.tensors.emplace_back(p.at("name").get<std::string>(), tensor_from_j(p.at("tensor")));
  c.optimizer_steps = j.at("optimizer").at("steps").get<std::vector<std::int64_t>>();
  for (const auto& p : j.at("optimizer").at("buffers")) {
    c.optimizer_tensors.emplace_back(p.at("name").get<std::string>(), tensor_from_j(p.at("tensor")));
  }
  for (const auto& row : j.at("trace")) {
    c.trace.add(row.at(0).get<std::int64_t>(), phase_from_string(row.at(1).get<std::string>()),
                row.at(2).get<std::string>(), parse_real(row.at(3).get<std::string>()));
  }
  const ExperimentConfig cfg = config_from_json(c.config_json);
  if (fnl::config_hash(cfg) != c.config_hash) throw std::invalid_argument("checkpoint: config hash does not match its config");
  return c;
}

void Checkpoint::save(const std::string& path) const { write_file(path, to_json()); }
Checkpoint Checkpoint::load(const std::string& path) { return from_json(read_file(path)); }

// ---------------------------------------------------------------------------
// Training.

DataSplit make_datasets(const ExperimentConfig& cfg) {
  const auto& t = cfg.task;
  const std::uint64_t eval_seed = t.data_seed ^ 0xa5a5a5a5deadbeefULL;
  DataSplit s;
  if (t.name == "blobs_cls") {
    // Both splits share the class centers, so draw them together.
    Dataset all = gen_blobs_cls(t.n_train + t.n_eval, t.classes, t.dim, t.spread, t.data_seed);
    std::vector<std::size_t> a(t.n_train), b(t.n_eval);
    for (std::size_t i = 0; i < t.n_train; ++i) a[i] = i;
    for (std::size_t i = 0; i < t.n_eval; ++i) b[i] = t.n_train + i;
    s.train = all.subset(a);
    s.eval = all.subset(b);
  } else if (t.name == "patches_cls") {
    s.train = gen_patches_cls(t.n_train, t.classes, t.noise, t.data_seed);
    s.eval = gen_patches_cls(t.n_eval, t.classes, t.noise, eval_seed);
  } else {
    s.train = gen_seq_copy(t.n_train, t.seq_len, t.vocab, t.data_seed);
    s.eval = gen_seq_copy(t.n_eval, t.seq_len, t.vocab, eval_seed);
  }
  return s;
}

Tensor eval_logits(Model& model, const Dataset& data) {
  constexpr std::size_t chunk = 256;
  std::vector<double> all;
  std::size_t cols = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor logits = model.forward(data.subset(idx).x, false);
    cols = logits.cols();
    all.insert(all.end(), logits.data().begin(), logits.data().end());
  }
  const std::size_t rows = all.size() / cols;
  return Tensor({rows, cols}, std::move(all));
}

std::pair<double, double> evaluate(Model& model, const Dataset& data) {
  const Tensor logits = eval_logits(model, data);
  return {softmax_cross_entropy(logits, data.y).loss, accuracy(logits, data.y)};
}

double compression_rate(const ExperimentConfig& cfg, const Model& model) {
  const Model dense = build_unfactorized(cfg.arch, cfg.input_spec(), cfg.seed);
  return CompressionReport::from_counts(dense.param_count(), model.param_count()).rate;
}

namespace {

using NormTable = std::vector<std::vector<double>>;  // [update][normalized factorized layer]

OptimizerConfig optimizer_config(const OptimSettings& o) {
  OptimizerConfig oc;
  oc.kind = optimizer_kind_from_string(o.name);
  oc.momentum = o.momentum;
  oc.lamb.beta1 = o.beta1;
  oc.lamb.beta2 = o.beta2;
  oc.lamb.eps = o.eps;
  oc.clip_norm = o.clip_norm;
  return oc;
}

void emit_weight_metrics(MetricTrace& trace, std::int64_t step, Model& model, double lr) {
  std::vector<Tensor> normalized;
  for (auto& l : model.layers()) {
    if (const Weight* w = l->weight()) {
      const Tensor m = l->weight_matrix();
      trace.add(step, Phase::train, "wnorm/" + l->name(), frobenius_norm(m));
      if (w->factorized && l->normalized) normalized.push_back(m);
    }
    if (auto* att = dynamic_cast<Attention*>(l.get())) {
      for (std::size_t h = 0; h < att->forms.size(); ++h) {
        const std::string base = "wnorm/" + l->name() + ".h" + std::to_string(h);
        trace.add(step, Phase::train, base + ".qk", frobenius_norm(recompose(att->forms[h].qk)));
        trace.add(step, Phase::train, base + ".ov", frobenius_norm(recompose(att->forms[h].ov)));
      }
    }
  }
  if (!normalized.empty()) trace.add(step, Phase::train, "eff_step_size", effective_step_size(normalized, lr));
  const auto fps = model.factorized_weights();
  const bool shallow = !fps.empty() && std::all_of(fps.begin(), fps.end(), [](const FactorizedParam* f) { return f->depth() == 0; });
  if (shallow) {
    std::vector<const FactorizedParam*> cfps(fps.begin(), fps.end());
    const NuclearStats st = nuclear_trace(cfps);
    trace.add(step, Phase::train, "nuclear_mean", st.nuclear_mean);
    trace.add(step, Phase::train, "factor_bound_mean", st.bound_mean);
  }
}

/// Splits the model's parameters for a norm-matched run: the normalized
/// factorized layers go without decay, everything else keeps it.
std::pair<ParamSet, ParamSet> split_params(Model& model, bool norm_match) {
  ParamSet keep, free;
  if (!norm_match) return {model.params(), free};
  std::set<const FactorizedParam*> matched;
  for (auto* fp : model.factorized_weights(true)) matched.insert(fp);
  ParamSet all = model.params();
  keep.dense = all.dense;
  for (auto& f : all.factors) (matched.count(f.value) ? free : keep).factors.push_back(f);
  return {keep, free};
}

void save_opt_state(const Optimizer& opt, std::size_t k, Checkpoint& c) {
  const auto& st = opt.state();
  const std::string p = "opt" + std::to_string(k) + ".";
  for (std::size_t i = 0; i < st.momentum.size(); ++i) c.optimizer_tensors.emplace_back(p + "momentum." + std::to_string(i), st.momentum[i]);
  for (std::size_t i = 0; i < st.first.size(); ++i) c.optimizer_tensors.emplace_back(p + "first." + std::to_string(i), st.first[i]);
  for (std::size_t i = 0; i < st.second.size(); ++i) c.optimizer_tensors.emplace_back(p + "second." + std::to_string(i), st.second[i]);
  c.optimizer_steps.push_back(st.step);
}

void load_opt_state(Optimizer& opt, std::size_t k, const Checkpoint& c) {
  auto& st = opt.state();
  st = OptimizerState{};
  st.step = c.optimizer_steps.at(k);
  const std::string p = "opt" + std::to_string(k) + ".";
  for (const auto& [name, t] : c.optimizer_tensors) {
    if (name.rfind(p, 0) != 0) continue;
    const std::string rest = name.substr(p.size());
    if (rest.rfind("momentum.", 0) == 0) st.momentum.push_back(t);
    else if (rest.rfind("first.", 0) == 0) st.first.push_back(t);
    else if (rest.rfind("second.", 0) == 0) st.second.push_back(t);
  }
}

void restore_model(Model& model, const Checkpoint& c) {
  auto state = model.state();
  if (state.size() != c.tensors.size()) throw std::invalid_argument("checkpoint: tensor count does not match the model");
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state[i].name != c.tensors[i].first || state[i].tensor->shape() != c.tensors[i].second.shape()) {
      throw std::invalid_argument("checkpoint: tensor '" + c.tensors[i].first + "' does not match the model");
    }
    *state[i].tensor = c.tensors[i].second;
  }
}

TrainResult train_impl(const ExperimentConfig& cfg, const TrainOptions& opts, const NormTable* reference,
                       NormTable* record) {
  cfg.validate();
  const DataSplit data = make_datasets(cfg);
  Model model = build_model(cfg.arch, cfg.input_spec(), cfg.factorize, cfg.seed);
  const double rate = compression_rate(cfg, model);

  auto [params, matched] = split_params(model, reference != nullptr);
  if (cfg.optimizer.name == "flambe" && params.factors.empty() && matched.factors.empty()) {
    throw std::invalid_argument("config: flambe needs factorized parameters");
  }
  const OptimizerConfig oc = optimizer_config(cfg.optimizer);
  Optimizer opt(oc, cfg.decay, rate);
  Optimizer opt_matched(oc, DecayConfig{}, rate);

  const std::size_t steps_per_epoch = data.train.size() / cfg.batch_size;
  LrSchedule sched;
  sched.kind = lr_kind_from_string(cfg.optimizer.schedule);
  sched.base_lr = cfg.optimizer.lr;
  for (auto m : cfg.optimizer.milestones) sched.milestones.push_back(m * static_cast<std::int64_t>(steps_per_epoch));
  sched.warmup_steps = cfg.optimizer.warmup_steps;

  Rng rng(cfg.seed ^ 0xbb67ae8584caa73bULL);
  MetricTrace trace;
  std::int64_t step = 0;
  std::size_t epoch = 0;

  auto make_checkpoint = [&](std::size_t completed) {
    Checkpoint c;
    c.config_json = to_j(cfg).dump();
    c.config_hash = config_hash(cfg);
    c.step = step;
    c.epoch = completed;
    c.rng = rng.state();
    for (const auto& nt : model.state()) c.tensors.emplace_back(nt.name, *nt.tensor);
    save_opt_state(opt, 0, c);
    save_opt_state(opt_matched, 1, c);
    c.trace = trace;
    return c;
  };

  if (opts.resume) {
    const Checkpoint& c = *opts.resume;
    if (c.config_hash != config_hash(cfg)) throw std::invalid_argument("resume: checkpoint belongs to another config");
    restore_model(model, c);
    load_opt_state(opt, 0, c);
    load_opt_state(opt_matched, 1, c);
    rng.set_state(c.rng);
    step = c.step;
    epoch = c.epoch;
    trace = c.trace;
  } else {
    trace.add(0, Phase::train, "compression_rate", rate);
    trace.add(0, Phase::train, "param_count", static_cast<double>(model.param_count()));
    emit_weight_metrics(trace, 0, model, sched.at(1));
    const auto [loss, acc] = evaluate(model, data.eval);
    trace.add(0, Phase::eval, "loss", loss);
    trace.add(0, Phase::eval, "accuracy", acc);
  }

  const std::size_t last_epoch = opts.stop_after_epoch > 0 ? std::min(opts.stop_after_epoch, cfg.epochs) : cfg.epochs;
  std::vector<std::size_t> perm(data.train.size());
  for (; epoch < last_epoch; ++epoch) {
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
    double loss_sum = 0.0;
    double correct = 0.0, total = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::span<const std::size_t> idx(perm.data() + s * cfg.batch_size, cfg.batch_size);
      const Dataset batch = data.train.subset(idx);
      model.zero_grad();
      const Tensor logits = model.forward(batch.x, true);
      const LossAndGrad lg = softmax_cross_entropy(logits, batch.y);
      if (!std::isfinite(lg.loss)) {
        throw std::runtime_error("non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                                 std::to_string(epoch + 1) + ")");
      }
      model.backward(lg.grad);
      const double lr = sched.at(step + 1);
      opt.step(params, lr);
      if (!matched.factors.empty()) opt_matched.step(matched, lr);
      ++step;
      if (reference) {
        const auto fps = model.factorized_weights(true);
        const auto& targets = reference->at(static_cast<std::size_t>(step - 1));
        for (std::size_t i = 0; i < fps.size(); ++i) rescale_to_norm(*fps[i], targets.at(i));
      }
      if (record) {
        std::vector<double> norms;
        for (const auto* fp : model.factorized_weights(true)) norms.push_back(frobenius_norm(recompose(*fp)));
        record->push_back(std::move(norms));
      }
      loss_sum += lg.loss;
      correct += accuracy(logits, batch.y) * static_cast<double>(batch.y.size());
      total += static_cast<double>(batch.y.size());
    }
    trace.add(step, Phase::train, "loss", loss_sum / static_cast<double>(steps_per_epoch));
    trace.add(step, Phase::train, "accuracy", correct / total);
    trace.add(step, Phase::train, "lr", sched.at(step));
    emit_weight_metrics(trace, step, model, sched.at(step));
    const auto [loss, acc] = evaluate(model, data.eval);
    trace.add(step, Phase::eval, "loss", loss);
    trace.add(step, Phase::eval, "accuracy", acc);
    if (opts.verbose) {
      std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << "  train loss " << format_real(loss_sum / static_cast<double>(steps_per_epoch))
                << "  eval acc " << format_real(acc) << "\n";
    }
    if (opts.on_epoch) opts.on_epoch(make_checkpoint(epoch + 1));
  }

  TrainResult res;
  const bool overcomplete = cfg.factorize.mode == "full" || cfg.factorize.mode == "deep" || cfg.factorize.mode == "wide";
  if (overcomplete && epoch == cfg.epochs) {
    Model compact = collapse(model);
    const auto a = predictions(eval_logits(model, data.eval));
    const auto b = predictions(eval_logits(compact, data.eval));
    double same = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1.0 : 0.0;
    trace.add(step, Phase::eval, "collapse_agreement", same / static_cast<double>(a.size()));
    res.final_metrics["collapse_agreement"] = same / static_cast<double>(a.size());
    res.final_metrics["collapsed_eval_accuracy"] = evaluate(compact, data.eval).second;
  }
  const auto [eval_loss, eval_acc] = evaluate(model, data.eval);
  res.final_metrics["eval_loss"] = eval_loss;
  res.final_metrics["eval_accuracy"] = eval_acc;
  res.final_metrics["compression_rate"] = rate;
  res.final_metrics["param_count"] = static_cast<double>(model.param_count());
  res.final_metrics["steps"] = static_cast<double>(step);
  for (const char* m : {"loss", "accuracy"}) {
    const auto s = trace.series(Phase::train, m);
    if (!s.empty()) res.final_metrics[std::string("train_") + m] = s.back().second;
  }
  for (const char* m : {"eff_step_size", "nuclear_mean", "factor_bound_mean"}) {
    const auto s = trace.series(Phase::train, m);
    if (!s.empty()) res.final_metrics[m] = s.back().second;
  }
  res.checkpoint = make_checkpoint(epoch);
  res.trace = std::move(trace);
  res.model = std::move(model);
  res.eval_set = data.eval;
  return res;
}

}  // namespace

TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts) {
  if (!cfg.norm_match) return train_impl(cfg, opts, nullptr, nullptr);
  ExperimentConfig ref_cfg = cfg;
  ref_cfg.norm_match = false;
  NormTable norms;
  TrainOptions ref_opts;
  ref_opts.stop_after_epoch = opts.stop_after_epoch;
  train_impl(ref_cfg, ref_opts, nullptr, &norms);
  return train_impl(cfg, opts, &norms, nullptr);
}

void write_run(const std::string& dir, const ExperimentConfig& cfg, const TrainResult& result) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path p(dir);
  write_file((p / "metrics.csv").string(), result.trace.to_csv());
  write_file((p / "config.json").string(), config_to_json(cfg));
  result.checkpoint.save((p / "checkpoint.json").string());
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const ExperimentConfig cfg = config_from_json(ckpt.config_json);
  Model model = build_model(cfg.arch, cfg.input_spec(), cfg.factorize, cfg.seed);
  restore_model(model, ckpt);
  return model;
}

}  // namespace fnl

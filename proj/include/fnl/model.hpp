#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fnl/factorization.hpp"
#include "fnl/layers.hpp"
#include "fnl/optimizers.hpp"

namespace fnl {

/// A layer weight stored either densely or as factors U·(∏M_j)·Vᵀ.
struct Weight {
  bool factorized = false;
  Parameter dense;
  FactorizedParam factors;
  FactorGrads factor_grads;

  /// U·M_1···M_d.
  Tensor left() const;
  /// Routes gradients of left and V back into the factors.
  void accumulate(const Tensor& dleft, const Tensor& dright);
  void zero_grad();
  std::size_t param_count() const;
  void set_factors(FactorizedParam fp);
  void set_dense(Tensor w);
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual void collect(ParamSet&) {}
  /// Every tensor that defines the layer, trainable or not, in a fixed order.
  virtual void state(std::vector<NamedTensor>&) {}
  virtual void zero_grad() {}
  virtual std::size_t param_count() const { return 0; }

  /// The fc or conv weight, if this layer has one.
  virtual Weight* weight() { return nullptr; }
  const Weight* weight() const { return const_cast<Layer*>(this)->weight(); }
  /// The weight as a 2d matrix (conv kernels use the (c_out·k)×(c_in·k) layout).
  virtual Tensor weight_matrix() const { return {}; }

  const std::string& name() const { return name_; }
  /// Followed by a normalization layer, so invariant to rescaling its weight.
  bool normalized = false;

 private:
  std::string name_;
};

class Linear : public Layer {
 public:
  Linear(std::string name, std::size_t in, std::size_t out, bool bias);

  std::string kind() const override { return "linear"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }
  void collect(ParamSet& ps) override;
  void state(std::vector<NamedTensor>& out) override;
  void zero_grad() override;
  std::size_t param_count() const override;
  Weight* weight() override { return &w; }
  Tensor weight_matrix() const override;

  std::size_t in, out;
  Weight w;
  bool has_bias;
  Parameter b;

 private:
  Tensor x_;
  Shape in_shape_;
};

class Conv2d : public Layer {
 public:
  Conv2d(std::string name, std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride);

  std::string kind() const override { return "conv"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  void collect(ParamSet& ps) override;
  void state(std::vector<NamedTensor>& out) override;
  void zero_grad() override;
  std::size_t param_count() const override { return w.param_count(); }
  Weight* weight() override { return &w; }
  Tensor weight_matrix() const override;

  std::size_t c_in, c_out, k, stride;
  Weight w;  // dense: (c_out, c_in, k, k) kernel

 private:
  Tensor x_;
};

class BatchNorm : public Layer {
 public:
  BatchNorm(std::string name, std::size_t channels);

  std::string kind() const override { return "batchnorm"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }
  void collect(ParamSet& ps) override;
  void state(std::vector<NamedTensor>& out) override;
  void zero_grad() override;
  std::size_t param_count() const override { return gamma.value.size() + beta.value.size(); }

  Parameter gamma, beta;
  Tensor running_mean, running_var;

 private:
  NormCache cache_;
};

class Relu : public Layer {
 public:
  using Layer::Layer;
  std::string kind() const override { return "relu"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  Tensor x_;
};

/// (B, C, H, W) -> (B, C) by averaging each channel.
class GlobalAvgPool : public Layer {
 public:
  using Layer::Layer;
  std::string kind() const override { return "pool"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  Shape in_shape_;
};

/// Token ids (B, T) -> (B, T, d): learned table plus a fixed sinusoidal position code.
class Embedding : public Layer {
 public:
  Embedding(std::string name, std::size_t vocab, std::size_t d, std::size_t max_len);

  std::string kind() const override { return "embedding"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Embedding>(*this); }
  void collect(ParamSet& ps) override;
  void state(std::vector<NamedTensor>& out) override;
  void zero_grad() override { table.zero_grad(); }
  std::size_t param_count() const override { return table.value.size(); }

  Parameter table;    // vocab × d
  Tensor positions;   // max_len × d

 private:
  Tensor ids_;
};

/// Multi-head self-attention over (B, T, d), each head stored as its QK and OV
/// factor pairs.
class Attention : public Layer {
 public:
  Attention(std::string name, std::size_t d, std::size_t heads, std::size_t rank, bool residual);

  std::string kind() const override { return "attention"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Attention>(*this); }
  void collect(ParamSet& ps) override;
  void state(std::vector<NamedTensor>& out) override;
  void zero_grad() override;
  std::size_t param_count() const override;

  std::vector<AttentionHead> heads() const;

  std::size_t d, rank;
  bool residual;
  std::vector<AttentionForms> forms;
  std::vector<AttentionFormGrads> grads;

 private:
  std::vector<MhaCache> caches_;
};

class Model {
 public:
  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

  Tensor forward(const Tensor& x, bool training);
  void backward(const Tensor& dlogits);
  void zero_grad();

  ParamSet params();
  std::vector<NamedTensor> state();
  std::size_t param_count() const;

  /// Factorized fc and conv weights, optionally only the normalized ones.
  std::vector<FactorizedParam*> factorized_weights(bool normalized_only = false);
  std::vector<const FactorizedParam*> factorized_weights(bool normalized_only = false) const;
  bool has_attention() const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Builders.

struct ArchConfig {
  std::string name = "mlp";                // mlp | smallcnn | tiny_attn
  std::vector<std::size_t> channels{8, 16};  // smallcnn conv widths
  std::vector<std::size_t> strides;          // smallcnn, defaults to 1
  std::size_t hidden = 32;                 // mlp width
  std::size_t d_model = 16;                // tiny_attn
  std::size_t heads = 1;
  std::size_t attn_rank = 8;
  bool residual = false;
};

struct InputSpec {
  std::size_t features = 0;                 // mlp
  std::size_t channels = 1, height = 8, width = 8;  // smallcnn
  std::size_t classes = 2;
  std::size_t seq_len = 8, vocab = 8;       // tiny_attn
};

struct FactorizePolicy {
  std::string mode = "none";  // none | lowrank | full | deep | wide
  double rank_scale = 0.0;
  std::size_t rank = 0;       // explicit rank, overrides rank_scale
  double target_rate = 0.0;   // > 0: rank_scale found by bisection to hit this compression rate
  bool spectral = false;
};

Model build_unfactorized(const ArchConfig& arch, const InputSpec& in, std::uint64_t seed);

/// Uniform rank scale whose lowrank factorization of `dense` comes closest to
/// the target compression rate.
double rank_scale_for_rate(const Model& dense, double target_rate);

/// Factorizes every fc and conv layer except the first and the last. With
/// `strict` an infeasible rank throws naming the layer; otherwise the layer is
/// left dense with a warning. Attention layers are factorized by construction;
/// SI redraws them as truncated SVDs.
void factorize_model(Model& model, const FactorizePolicy& policy, std::uint64_t seed, bool strict = true);

Model build_model(const ArchConfig& arch, const InputSpec& in, const FactorizePolicy& policy, std::uint64_t seed);

/// Replaces factorized fc and conv weights by their recomposed matrices.
Model collapse(const Model& model);

/// Index of the largest score per row, lowest index on ties.
std::vector<int> predictions(const Tensor& logits);
/// Fraction of rows whose labelled score strictly exceeds every other score.
double accuracy(const Tensor& logits, std::span<const int> labels);

}  // namespace fnl

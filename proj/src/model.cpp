#include "fnl/model.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace fnl {

Tensor Weight::left() const {
  Tensor l = factors.u;
  for (const auto& m : factors.inner) l = matmul(l, m);
  return l;
}

void Weight::accumulate(const Tensor& dleft, const Tensor& dright) {
  const std::size_t d = factors.depth();
  if (d == 0) {
    factor_grads.u += dleft;
  } else {
    // left = U·M_1···M_d; prefix[j] = U·M_1···M_j, suffix[j] = M_{j+1}···M_d.
    std::vector<Tensor> prefix{factors.u};
    for (const auto& m : factors.inner) prefix.push_back(matmul(prefix.back(), m));
    std::vector<Tensor> suffix(d + 1);
    suffix[d] = Tensor::identity(factors.rank());
    for (std::size_t j = d; j-- > 0;) suffix[j] = matmul(factors.inner[j], suffix[j + 1]);
    factor_grads.u += matmul_nt(dleft, suffix[0]);
    for (std::size_t j = 0; j < d; ++j) {
      factor_grads.inner[j] += matmul_tn(prefix[j], matmul_nt(dleft, suffix[j + 1]));
    }
  }
  factor_grads.v += dright;
}

void Weight::zero_grad() {
  if (factorized) {
    factor_grads.zero();
  } else {
    dense.zero_grad();
  }
}

std::size_t Weight::param_count() const { return factorized ? factors.param_count() : dense.value.size(); }

void Weight::set_factors(FactorizedParam fp) {
  fp.validate();
  factorized = true;
  factor_grads = FactorGrads::zeros_like(fp);
  factors = std::move(fp);
  dense = Parameter{};
}

void Weight::set_dense(Tensor w) {
  factorized = false;
  factors = FactorizedParam{};
  factor_grads = FactorGrads{};
  dense = Parameter("w", std::move(w));
}

namespace {

void collect_weight(Weight& w, const std::string& name, ParamSet& ps, FactorRole role = FactorRole::layer) {
  if (w.factorized) {
    ps.factors.push_back({name, &w.factors, &w.factor_grads, role});
  } else {
    ps.dense.push_back({name, &w.dense.value, &w.dense.grad});
  }
}

void factor_state(FactorizedParam& fp, const std::string& name, std::vector<NamedTensor>& out) {
  out.push_back({name + ".u", &fp.u});
  for (std::size_t j = 0; j < fp.depth(); ++j) out.push_back({name + ".m" + std::to_string(j + 1), &fp.inner[j]});
  out.push_back({name + ".v", &fp.v});
}

void weight_state(Weight& w, const std::string& name, std::vector<NamedTensor>& out) {
  if (w.factorized) {
    factor_state(w.factors, name, out);
  } else {
    out.push_back({name, &w.dense.value});
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, std::size_t in_, std::size_t out_, bool bias)
    : Layer(std::move(name)), in(in_), out(out_), has_bias(bias) {
  w.set_dense(Tensor({out, in}));
  if (has_bias) b = Parameter("b", Tensor({out}));
}

Tensor Linear::forward(const Tensor& x, bool) {
  if (x.size() % in != 0 || x.empty()) throw ShapeError(name() + ": input " + shape_string(x.shape()) + " does not end in " + std::to_string(in));
  in_shape_ = x.shape();
  x_ = x.reshaped({x.size() / in, in});
  Tensor y = w.factorized ? factorized_fc_forward(w.left(), w.factors.v, x_) : fc_forward(w.dense.value, x_);
  if (has_bias) {
    for (std::size_t i = 0; i < y.rows(); ++i) {
      for (std::size_t j = 0; j < out; ++j) y(i, j) += b.value[j];
    }
  }
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  if (has_bias) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      for (std::size_t j = 0; j < out; ++j) b.grad[j] += dy(i, j);
    }
  }
  Tensor dx;
  if (w.factorized) {
    FactorPairGrads g = factorized_fc_backward(w.left(), w.factors.v, x_, dy);
    w.accumulate(g.dleft, g.dright);
    dx = std::move(g.dx);
  } else {
    FcGrads g = fc_backward(w.dense.value, x_, dy);
    w.dense.grad += g.dw;
    dx = std::move(g.dx);
  }
  return dx.reshaped(in_shape_);
}

void Linear::collect(ParamSet& ps) {
  collect_weight(w, name() + ".w", ps);
  if (has_bias) ps.dense.push_back({name() + ".b", &b.value, &b.grad});
}

void Linear::state(std::vector<NamedTensor>& s) {
  weight_state(w, name() + ".w", s);
  if (has_bias) s.push_back({name() + ".b", &b.value});
}

void Linear::zero_grad() {
  w.zero_grad();
  if (has_bias) b.zero_grad();
}

std::size_t Linear::param_count() const { return w.param_count() + (has_bias ? out : 0); }

Tensor Linear::weight_matrix() const { return w.factorized ? recompose(w.factors) : w.dense.value; }

// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, std::size_t c_in_, std::size_t c_out_, std::size_t k_, std::size_t stride_)
    : Layer(std::move(name)), c_in(c_in_), c_out(c_out_), k(k_), stride(stride_) {
  w.set_dense(Tensor({c_out, c_in, k, k}));
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  x_ = x;
  return w.factorized ? factorized_conv_forward(w.left(), w.factors.v, x, k, stride)
                      : conv2d_forward(w.dense.value, x, stride);
}

Tensor Conv2d::backward(const Tensor& dy) {
  if (w.factorized) {
    FactorPairGrads g = factorized_conv_backward(w.left(), w.factors.v, x_, dy, k, stride);
    w.accumulate(g.dleft, g.dright);
    return std::move(g.dx);
  }
  ConvGrads g = conv2d_backward(w.dense.value, x_, dy, stride);
  w.dense.grad += g.dkernel;
  return std::move(g.dx);
}

void Conv2d::collect(ParamSet& ps) { collect_weight(w, name() + ".w", ps); }
void Conv2d::state(std::vector<NamedTensor>& s) { weight_state(w, name() + ".w", s); }
void Conv2d::zero_grad() { w.zero_grad(); }

Tensor Conv2d::weight_matrix() const {
  return w.factorized ? recompose(w.factors) : conv_kernel_to_matrix(w.dense.value);
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(std::string name, std::size_t channels)
    : Layer(std::move(name)),
      gamma("gamma", Tensor({channels}, 1.0)),
      beta("beta", Tensor({channels})),
      running_mean({channels}),
      running_var({channels}, 1.0) {}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  return batch_norm_forward(x, gamma.value, beta.value, running_mean, running_var, training,
                            training ? &cache_ : nullptr);
}

Tensor BatchNorm::backward(const Tensor& dy) {
  NormGrads g = batch_norm_backward(dy, gamma.value, cache_);
  gamma.grad += g.dgamma;
  beta.grad += g.dbeta;
  return std::move(g.dx);
}

void BatchNorm::collect(ParamSet& ps) {
  ps.dense.push_back({name() + ".gamma", &gamma.value, &gamma.grad});
  ps.dense.push_back({name() + ".beta", &beta.value, &beta.grad});
}

void BatchNorm::state(std::vector<NamedTensor>& s) {
  s.push_back({name() + ".gamma", &gamma.value});
  s.push_back({name() + ".beta", &beta.value});
  s.push_back({name() + ".running_mean", &running_mean});
  s.push_back({name() + ".running_var", &running_var});
}

void BatchNorm::zero_grad() {
  gamma.zero_grad();
  beta.zero_grad();
}

// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x, bool) {
  x_ = x;
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor Relu::backward(const Tensor& dy) {
  Tensor dx = dy;
  auto xd = x_.data();
  auto d = dx.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(xd[i] > 0.0)) d[i] = 0.0;
  }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  if (x.ndim() != 4) throw ShapeError(name() + ": expected (B, C, H, W), got " + shape_string(x.shape()));
  in_shape_ = x.shape();
  const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < bc; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x[i * hw + p];
    y[i] = s / static_cast<double>(hw);
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const std::size_t bc = in_shape_[0] * in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  for (std::size_t i = 0; i < bc; ++i) {
    const double g = dy[i] / static_cast<double>(hw);
    for (std::size_t p = 0; p < hw; ++p) dx[i * hw + p] = g;
  }
  return dx;
}

// ---------------------------------------------------------------------------

Embedding::Embedding(std::string name, std::size_t vocab, std::size_t d, std::size_t max_len)
    : Layer(std::move(name)), table("table", Tensor({vocab, d})), positions({max_len, d}) {
  for (std::size_t t = 0; t < max_len; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      positions(t, i) = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) positions(t, i + 1) = std::cos(static_cast<double>(t) * freq);
    }
  }
}

Tensor Embedding::forward(const Tensor& x, bool) {
  if (!x.is_matrix() || x.cols() > positions.rows()) throw ShapeError(name() + ": expected (B, T) ids with T <= max length");
  ids_ = x;
  const std::size_t B = x.rows(), T = x.cols(), d = table.value.cols();
  Tensor y({B, T, d});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const double idv = x(b, t);
      if (idv < 0 || idv >= static_cast<double>(table.value.rows())) throw std::out_of_range(name() + ": token id out of range");
      const std::size_t id = static_cast<std::size_t>(idv);
      for (std::size_t i = 0; i < d; ++i) y[(b * T + t) * d + i] = table.value(id, i) + positions(t, i);
    }
  }
  return y;
}

Tensor Embedding::backward(const Tensor& dy) {
  const std::size_t B = ids_.rows(), T = ids_.cols(), d = table.value.cols();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t id = static_cast<std::size_t>(ids_(b, t));
      for (std::size_t i = 0; i < d; ++i) table.grad(id, i) += dy[(b * T + t) * d + i];
    }
  }
  return {};
}

void Embedding::collect(ParamSet& ps) { ps.dense.push_back({name() + ".table", &table.value, &table.grad}); }
void Embedding::state(std::vector<NamedTensor>& s) { s.push_back({name() + ".table", &table.value}); }

// ---------------------------------------------------------------------------

Attention::Attention(std::string name, std::size_t d_, std::size_t heads, std::size_t rank_, bool residual_)
    : Layer(std::move(name)), d(d_), rank(rank_), residual(residual_) {
  if (heads < 1 || rank < 1 || rank > d) throw std::invalid_argument(this->name() + ": need heads >= 1 and 1 <= rank <= d");
  for (std::size_t h = 0; h < heads; ++h) {
    AttentionForms f;
    for (FactorizedParam* fp : {&f.qk, &f.ov}) {
      fp->u = Tensor({d, rank});
      fp->v = Tensor({d, rank});
    }
    grads.push_back({FactorGrads::zeros_like(f.qk), FactorGrads::zeros_like(f.ov)});
    forms.push_back(std::move(f));
  }
}

std::vector<AttentionHead> Attention::heads() const {
  std::vector<AttentionHead> hs;
  for (const auto& f : forms) hs.push_back({f.qk.u, f.qk.v, f.ov.u, f.ov.v});
  return hs;
}

Tensor Attention::forward(const Tensor& x, bool) {
  if (x.ndim() != 3 || x.dim(2) != d) throw ShapeError(name() + ": expected (B, T, d), got " + shape_string(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1);
  const auto hs = heads();
  caches_.assign(B, MhaCache{});
  Tensor y(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    Tensor xb({T, d}, std::vector<double>(x.data().begin() + b * T * d, x.data().begin() + (b + 1) * T * d));
    Tensor yb = mha_forward(hs, xb, &caches_[b]);
    if (residual) yb += xb;
    std::copy(yb.data().begin(), yb.data().end(), y.data().begin() + b * T * d);
  }
  return y;
}

Tensor Attention::backward(const Tensor& dy) {
  const std::size_t B = dy.dim(0), T = dy.dim(1);
  const auto hs = heads();
  Tensor dx(dy.shape());
  for (std::size_t b = 0; b < B; ++b) {
    Tensor dyb({T, d}, std::vector<double>(dy.data().begin() + b * T * d, dy.data().begin() + (b + 1) * T * d));
    MhaGrads g = mha_backward(hs, caches_[b], dyb);
    if (residual) g.dx += dyb;
    for (std::size_t h = 0; h < forms.size(); ++h) {
      grads[h].qk.u += g.heads[h].q;
      grads[h].qk.v += g.heads[h].k;
      grads[h].ov.u += g.heads[h].v;
      grads[h].ov.v += g.heads[h].o;
    }
    std::copy(g.dx.data().begin(), g.dx.data().end(), dx.data().begin() + b * T * d);
  }
  return dx;
}

void Attention::collect(ParamSet& ps) {
  for (std::size_t h = 0; h < forms.size(); ++h) {
    const std::string base = name() + ".h" + std::to_string(h);
    ps.factors.push_back({base + ".qk", &forms[h].qk, &grads[h].qk, FactorRole::attention_qk});
    ps.factors.push_back({base + ".ov", &forms[h].ov, &grads[h].ov, FactorRole::attention_ov});
  }
}

void Attention::state(std::vector<NamedTensor>& s) {
  for (std::size_t h = 0; h < forms.size(); ++h) {
    const std::string base = name() + ".h" + std::to_string(h);
    factor_state(forms[h].qk, base + ".qk", s);
    factor_state(forms[h].ov, base + ".ov", s);
  }
}

void Attention::zero_grad() {
  for (auto& g : grads) {
    g.qk.zero();
    g.ov.zero();
  }
}

std::size_t Attention::param_count() const {
  std::size_t n = 0;
  for (const auto& f : forms) n += f.qk.param_count() + f.ov.param_count();
  return n;
}

// ---------------------------------------------------------------------------

Model::Model(const Model& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  return *this;
}

Tensor Model::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

void Model::backward(const Tensor& dlogits) {
  Tensor g = dlogits;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
}

void Model::zero_grad() {
  for (auto& l : layers_) l->zero_grad();
}

ParamSet Model::params() {
  ParamSet ps;
  for (auto& l : layers_) l->collect(ps);
  return ps;
}

std::vector<NamedTensor> Model::state() {
  std::vector<NamedTensor> s;
  for (auto& l : layers_) l->state(s);
  return s;
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l->param_count();
  return n;
}

std::vector<FactorizedParam*> Model::factorized_weights(bool normalized_only) {
  std::vector<FactorizedParam*> out;
  for (auto& l : layers_) {
    Weight* w = l->weight();
    if (w && w->factorized && (!normalized_only || l->normalized)) out.push_back(&w->factors);
  }
  return out;
}

std::vector<const FactorizedParam*> Model::factorized_weights(bool normalized_only) const {
  std::vector<const FactorizedParam*> out;
  for (const auto* fp : const_cast<Model*>(this)->factorized_weights(normalized_only)) out.push_back(fp);
  return out;
}

bool Model::has_attention() const {
  for (const auto& l : layers_) {
    if (l->kind() == "attention") return true;
  }
  return false;
}

// ---------------------------------------------------------------------------

namespace {

void he_init(Tensor& w, std::size_t fan_in, double gain, Rng& rng) {
  const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : w.data()) v = stddev * rng.normal();
}

}  // namespace

Model build_unfactorized(const ArchConfig& arch, const InputSpec& in, std::uint64_t seed) {
  Rng rng(seed);
  Model m;
  if (in.classes < 2) throw std::invalid_argument("build_model: need at least two classes");
  if (arch.name == "mlp") {
    if (in.features < 1 || arch.hidden < 1) throw std::invalid_argument("mlp: features and hidden width must be positive");
    auto fc1 = std::make_unique<Linear>("fc1", in.features, arch.hidden, false);
    auto fc2 = std::make_unique<Linear>("fc2", arch.hidden, arch.hidden, false);
    auto fc3 = std::make_unique<Linear>("fc3", arch.hidden, in.classes, true);
    he_init(fc1->w.dense.value, in.features, 2.0, rng);
    he_init(fc2->w.dense.value, arch.hidden, 2.0, rng);
    he_init(fc3->w.dense.value, arch.hidden, 1.0, rng);
    fc1->normalized = fc2->normalized = true;
    m.add(std::move(fc1));
    m.add(std::make_unique<BatchNorm>("bn1", arch.hidden));
    m.add(std::make_unique<Relu>("relu1"));
    m.add(std::move(fc2));
    m.add(std::make_unique<BatchNorm>("bn2", arch.hidden));
    m.add(std::make_unique<Relu>("relu2"));
    m.add(std::move(fc3));
  } else if (arch.name == "smallcnn") {
    if (arch.channels.empty()) throw std::invalid_argument("smallcnn: need at least one conv layer");
    if (!arch.strides.empty() && arch.strides.size() != arch.channels.size()) {
      throw std::invalid_argument("smallcnn: strides must match channels");
    }
    std::size_t prev = in.channels;
    for (std::size_t i = 0; i < arch.channels.size(); ++i) {
      const std::string id = std::to_string(i + 1);
      const std::size_t stride = arch.strides.empty() ? 1 : arch.strides[i];
      auto conv = std::make_unique<Conv2d>("conv" + id, prev, arch.channels[i], 3, stride);
      he_init(conv->w.dense.value, prev * 9, 2.0, rng);
      conv->normalized = true;
      m.add(std::move(conv));
      m.add(std::make_unique<BatchNorm>("bn" + id, arch.channels[i]));
      m.add(std::make_unique<Relu>("relu" + id));
      prev = arch.channels[i];
    }
    m.add(std::make_unique<GlobalAvgPool>("pool"));
    auto fc = std::make_unique<Linear>("fc", prev, in.classes, true);
    he_init(fc->w.dense.value, prev, 1.0, rng);
    m.add(std::move(fc));
  } else if (arch.name == "tiny_attn") {
    auto emb = std::make_unique<Embedding>("embed", in.vocab, arch.d_model, in.seq_len);
    he_init(emb->table.value, 1, 1.0, rng);
    auto att = std::make_unique<Attention>("attn", arch.d_model, arch.heads, arch.attn_rank, arch.residual);
    for (auto& f : att->forms) {
      for (Tensor* t : {&f.qk.u, &f.qk.v, &f.ov.u, &f.ov.v}) he_init(*t, arch.d_model, 1.0, rng);
    }
    auto fc = std::make_unique<Linear>("fc", arch.d_model, in.vocab, true);
    he_init(fc->w.dense.value, arch.d_model, 1.0, rng);
    m.add(std::move(emb));
    m.add(std::move(att));
    m.add(std::move(fc));
  } else {
    throw std::invalid_argument("unknown architecture '" + arch.name + "'");
  }
  return m;
}

namespace {

struct LayerDims {
  std::size_t c_out, k, c_in;
};

// The fc and conv layers a policy would factorize: every weighted layer but the first and last.
std::vector<LayerDims> factorizable_dims(const Model& model) {
  std::vector<const Layer*> weighted;
  for (const auto& l : model.layers()) {
    if (l->weight()) weighted.push_back(l.get());
  }
  std::vector<LayerDims> out;
  for (std::size_t i = 1; i + 1 < weighted.size(); ++i) {
    if (weighted[i]->weight()->factorized) continue;
    if (const auto* conv = dynamic_cast<const Conv2d*>(weighted[i])) {
      out.push_back({conv->c_out, conv->k, conv->c_in});
    } else if (const auto* fc = dynamic_cast<const Linear*>(weighted[i])) {
      out.push_back({fc->out, 1, fc->in});
    }
  }
  return out;
}

}  // namespace

double rank_scale_for_rate(const Model& dense, double target_rate) {
  if (!(target_rate > 0.0 && target_rate <= 1.0)) throw std::invalid_argument("target compression rate must lie in (0, 1]");
  const std::vector<LayerDims> dims = factorizable_dims(dense);
  if (dims.empty()) throw std::invalid_argument("target compression rate: no layer to factorize");
  const double total = static_cast<double>(dense.param_count());
  auto rate = [&](double scale) {
    double count = total;
    for (const auto& d : dims) {
      const std::size_t m = d.c_out * d.k, n = d.c_in * d.k;
      count += static_cast<double>((m + n) * rank_from_scale(scale, d.c_out, d.k, d.c_in)) - static_cast<double>(m * n);
    }
    return count / total;
  };
  // rate() is a nondecreasing step function of the scale.
  double lo = 1e-9, hi = 1.0;
  if (rate(lo) >= target_rate) return lo;
  if (rate(hi) <= target_rate) return hi;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (rate(mid) < target_rate ? lo : hi) = mid;
  }
  return std::abs(rate(lo) - target_rate) <= std::abs(rate(hi) - target_rate) ? lo : hi;
}

void factorize_model(Model& model, const FactorizePolicy& policy, std::uint64_t seed, bool strict) {
  const bool overcomplete = policy.mode == "full" || policy.mode == "deep" || policy.mode == "wide";
  if (policy.mode != "none" && policy.mode != "lowrank" && !overcomplete) {
    throw std::invalid_argument("unknown factorization mode '" + policy.mode + "'");
  }
  Rng seeds(seed ^ 0x6a09e667f3bcc909ULL);

  if (policy.spectral) {
    for (auto& l : model.layers()) {
      auto* att = dynamic_cast<Attention*>(l.get());
      if (!att) continue;
      for (auto& f : att->forms) {
        for (FactorizedParam* fp : {&f.qk, &f.ov}) {
          Rng rng(seeds.next_u64());
          const Tensor w = random_gaussian({att->d, att->d}, 1.0 / std::sqrt(static_cast<double>(att->d)), rng);
          *fp = spectral_init(w, att->rank);
        }
      }
    }
  }
  if (policy.mode == "none") return;

  double scale = policy.rank_scale;
  if (policy.mode == "lowrank" && policy.rank == 0) {
    if (policy.target_rate > 0.0) scale = rank_scale_for_rate(model, policy.target_rate);
    if (!(scale > 0.0)) throw std::invalid_argument("lowrank factorization needs a rank, a rank_scale or a target_rate");
  }

  std::vector<Layer*> weighted;
  for (auto& l : model.layers()) {
    if (l->weight()) weighted.push_back(l.get());
  }
  for (std::size_t i = 1; i + 1 < weighted.size(); ++i) {
    Layer* l = weighted[i];
    Weight& w = *l->weight();
    const std::uint64_t layer_seed = seeds.next_u64();
    if (w.factorized) continue;
    std::size_t c_out, c_in, k, fan_in;
    if (auto* conv = dynamic_cast<Conv2d*>(l)) {
      c_out = conv->c_out;
      c_in = conv->c_in;
      k = conv->k;
      fan_in = c_in * k * k;
    } else {
      auto* fc = dynamic_cast<Linear*>(l);
      c_out = fc->out;
      c_in = fc->in;
      k = 1;
      fan_in = c_in;
    }
    const std::size_t m = c_out * k, n = c_in * k;
    std::size_t r;
    std::size_t depth = 0;
    FactorMode mode;
    if (policy.mode == "lowrank") {
      r = policy.rank > 0 ? policy.rank : rank_from_scale(scale, c_out, k, c_in);
      mode = FactorMode::lowrank;
    } else {
      mode = factor_mode_from_string(policy.mode);
      r = overcomplete_rank(mode, m);
      depth = mode == FactorMode::deep ? 1 : 0;
    }
    const bool feasible = policy.spectral ? r <= std::min(m, n) : (mode != FactorMode::lowrank || r <= std::min(m, n));
    if (!feasible) {
      const std::string msg = "layer '" + l->name() + "': rank " + std::to_string(r) + " is infeasible for a " +
                              std::to_string(m) + "x" + std::to_string(n) + " weight" +
                              (policy.spectral ? " with spectral init" : "");
      if (strict) throw std::invalid_argument(msg);
      std::cerr << "warning: " << msg << ", left dense\n";
      continue;
    }
    FactorizedParam fp;
    if (policy.spectral) {
      fp = spectral_init(l->weight_matrix(), r);
      for (std::size_t j = 0; j < depth; ++j) fp.inner.push_back(Tensor::identity(r));
    } else {
      fp = default_factor_init(m, n, r, depth, layer_seed, fan_in);
    }
    fp.mode = mode;
    w.set_factors(std::move(fp));
  }
}

Model build_model(const ArchConfig& arch, const InputSpec& in, const FactorizePolicy& policy, std::uint64_t seed) {
  Model m = build_unfactorized(arch, in, seed);
  factorize_model(m, policy, seed, true);
  return m;
}

Model collapse(const Model& model) {
  Model out = model;
  for (auto& l : out.layers()) {
    Weight* w = l->weight();
    if (!w || !w->factorized) continue;
    const Tensor mat = recompose(w->factors);
    if (auto* conv = dynamic_cast<Conv2d*>(l.get())) {
      w->set_dense(matrix_to_conv_kernel(mat, conv->c_out, conv->c_in, conv->k));
    } else {
      w->set_dense(mat);
    }
  }
  return out;
}

std::vector<int> predictions(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rows() != labels.size() || labels.empty()) throw ShapeError("accuracy: one label per row");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    bool ok = true;
    for (std::size_t j = 0; j < logits.cols() && ok; ++j) {
      if (j != y && logits(i, j) >= logits(i, y)) ok = false;
    }
    if (ok) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace fnl

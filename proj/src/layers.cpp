#include "fnl/layers.hpp"

#include <algorithm>
#include <cmath>

namespace fnl {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Fully connected

Tensor fc_forward(const Tensor& w, const Tensor& x) {
  require(w.is_matrix() && x.is_matrix() && x.cols() == w.cols(),
          "fc_forward: weight " + shape_string(w.shape()) + " does not accept input " + shape_string(x.shape()));
  return matmul_nt(x, w);
}

FcGrads fc_backward(const Tensor& w, const Tensor& x, const Tensor& dy) {
  require(dy.is_matrix() && dy.rows() == x.rows() && dy.cols() == w.rows(),
          "fc_backward: output gradient " + shape_string(dy.shape()) + " does not match");
  return {matmul_tn(dy, x), matmul(dy, w)};
}

Tensor factorized_fc_forward(const Tensor& left, const Tensor& right, const Tensor& x) {
  require(left.is_matrix() && right.is_matrix() && left.cols() == right.cols(),
          "factorized_fc_forward: factor ranks differ");
  require(x.is_matrix() && x.cols() == right.rows(), "factorized_fc_forward: input " + shape_string(x.shape()) +
                                                         " does not match right factor " +
                                                         shape_string(right.shape()));
  return matmul_nt(matmul(x, right), left);
}

FactorPairGrads factorized_fc_backward(const Tensor& left, const Tensor& right, const Tensor& x,
                                       const Tensor& dy) {
  require(dy.is_matrix() && dy.rows() == x.rows() && dy.cols() == left.rows(),
          "factorized_fc_backward: output gradient " + shape_string(dy.shape()) + " does not match");
  const Tensor z = matmul(x, right);  // B×r
  const Tensor dz = matmul(dy, left);
  return {matmul_tn(dy, z), matmul_tn(x, dz), matmul_nt(dz, right)};
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride) {
  const std::size_t pad = (k - 1) / 2;
  return (in + 2 * pad - k) / stride + 1;
}

namespace {

struct ConvDims {
  std::size_t batch, c_in, h, w, c_out, k, stride, pad, ho, wo;
};

ConvDims conv_dims(const Tensor& x, std::size_t c_out, std::size_t c_in_expected, std::size_t k,
                   std::size_t stride, const char* op) {
  require(x.ndim() == 4, std::string(op) + ": input must be (B, C, H, W), got " + shape_string(x.shape()));
  require(k % 2 == 1, std::string(op) + ": kernel size must be odd, got " + std::to_string(k));
  require(stride == 1 || stride == 2, std::string(op) + ": stride must be 1 or 2");
  require(x.dim(1) == c_in_expected, std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                                         " channels, weight expects " + std::to_string(c_in_expected));
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), c_out, k, stride, (k - 1) / 2, 0, 0};
  d.ho = conv_output_size(d.h, k, stride);
  d.wo = conv_output_size(d.w, k, stride);
  return d;
}

// cols[(c*k + kh)*k + kw, i*wo + j] = x[c, s*i + kh - p, s*j + kw - p]
Tensor im2col(const double* x, const ConvDims& d) {
  Tensor cols({d.c_in * d.k * d.k, d.ho * d.wo});
  double* out = cols.data().data();
  for (std::size_t c = 0; c < d.c_in; ++c)
    for (std::size_t kh = 0; kh < d.k; ++kh)
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        double* row = out + ((c * d.k + kh) * d.k + kw) * d.ho * d.wo;
        for (std::size_t i = 0; i < d.ho; ++i) {
          const long yi = static_cast<long>(d.stride * i + kh) - static_cast<long>(d.pad);
          if (yi < 0 || yi >= static_cast<long>(d.h)) continue;
          const double* src = x + (c * d.h + yi) * d.w;
          for (std::size_t j = 0; j < d.wo; ++j) {
            const long xj = static_cast<long>(d.stride * j + kw) - static_cast<long>(d.pad);
            if (xj >= 0 && xj < static_cast<long>(d.w)) row[i * d.wo + j] = src[xj];
          }
        }
      }
  return cols;
}

void col2im(const Tensor& cols, double* dx, const ConvDims& d) {
  const double* in = cols.data().data();
  for (std::size_t c = 0; c < d.c_in; ++c)
    for (std::size_t kh = 0; kh < d.k; ++kh)
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        const double* row = in + ((c * d.k + kh) * d.k + kw) * d.ho * d.wo;
        for (std::size_t i = 0; i < d.ho; ++i) {
          const long yi = static_cast<long>(d.stride * i + kh) - static_cast<long>(d.pad);
          if (yi < 0 || yi >= static_cast<long>(d.h)) continue;
          double* dst = dx + (c * d.h + yi) * d.w;
          for (std::size_t j = 0; j < d.wo; ++j) {
            const long xj = static_cast<long>(d.stride * j + kw) - static_cast<long>(d.pad);
            if (xj >= 0 && xj < static_cast<long>(d.w)) dst[xj] += row[i * d.wo + j];
          }
        }
      }
}

// Horizontal pass: cols[c*k + kw, i*wo + j] = x[c, i, s*j + kw - p] over all input rows i.
Tensor row_cols(const double* x, const ConvDims& d) {
  Tensor cols({d.c_in * d.k, d.h * d.wo});
  double* out = cols.data().data();
  for (std::size_t c = 0; c < d.c_in; ++c)
    for (std::size_t kw = 0; kw < d.k; ++kw) {
      double* row = out + (c * d.k + kw) * d.h * d.wo;
      for (std::size_t i = 0; i < d.h; ++i) {
        const double* src = x + (c * d.h + i) * d.w;
        for (std::size_t j = 0; j < d.wo; ++j) {
          const long xj = static_cast<long>(d.stride * j + kw) - static_cast<long>(d.pad);
          if (xj >= 0 && xj < static_cast<long>(d.w)) row[i * d.wo + j] = src[xj];
        }
      }
    }
  return cols;
}

void row_col2im(const Tensor& cols, double* dx, const ConvDims& d) {
  const double* in = cols.data().data();
  for (std::size_t c = 0; c < d.c_in; ++c)
    for (std::size_t kw = 0; kw < d.k; ++kw) {
      const double* row = in + (c * d.k + kw) * d.h * d.wo;
      for (std::size_t i = 0; i < d.h; ++i) {
        double* dst = dx + (c * d.h + i) * d.w;
        for (std::size_t j = 0; j < d.wo; ++j) {
          const long xj = static_cast<long>(d.stride * j + kw) - static_cast<long>(d.pad);
          if (xj >= 0 && xj < static_cast<long>(d.w)) dst[xj] += row[i * d.wo + j];
        }
      }
    }
}

// Vertical pass over z (r, h, wo): cols[t*k + kh, i*wo + j] = z[t, s*i + kh - p, j].
Tensor column_cols(const Tensor& z, std::size_t r, const ConvDims& d) {
  Tensor cols({r * d.k, d.ho * d.wo});
  const double* zp = z.data().data();
  double* out = cols.data().data();
  for (std::size_t t = 0; t < r; ++t)
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      double* row = out + (t * d.k + kh) * d.ho * d.wo;
      for (std::size_t i = 0; i < d.ho; ++i) {
        const long yi = static_cast<long>(d.stride * i + kh) - static_cast<long>(d.pad);
        if (yi < 0 || yi >= static_cast<long>(d.h)) continue;
        const double* src = zp + (t * d.h + yi) * d.wo;
        std::copy(src, src + d.wo, row + i * d.wo);
      }
    }
  return cols;
}

void column_col2im(const Tensor& cols, Tensor& dz, std::size_t r, const ConvDims& d) {
  const double* in = cols.data().data();
  double* zp = dz.data().data();
  for (std::size_t t = 0; t < r; ++t)
    for (std::size_t kh = 0; kh < d.k; ++kh) {
      const double* row = in + (t * d.k + kh) * d.ho * d.wo;
      for (std::size_t i = 0; i < d.ho; ++i) {
        const long yi = static_cast<long>(d.stride * i + kh) - static_cast<long>(d.pad);
        if (yi < 0 || yi >= static_cast<long>(d.h)) continue;
        double* dst = zp + (t * d.h + yi) * d.wo;
        for (std::size_t j = 0; j < d.wo; ++j) dst[j] += row[i * d.wo + j];
      }
    }
}

// U (c_out·k × r) rearranged to c_out × (r·k) so that column t*k + kh holds U[o*k + kh, t].
Tensor left_as_vertical_filters(const Tensor& left, std::size_t c_out, std::size_t k) {
  const std::size_t r = left.cols();
  Tensor u2({c_out, r * k});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t kh = 0; kh < k; ++kh)
      for (std::size_t t = 0; t < r; ++t) u2(o, t * k + kh) = left(o * k + kh, t);
  return u2;
}

Tensor vertical_filters_as_left(const Tensor& u2, std::size_t c_out, std::size_t k) {
  const std::size_t r = u2.cols() / k;
  Tensor left({c_out * k, r});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t kh = 0; kh < k; ++kh)
      for (std::size_t t = 0; t < r; ++t) left(o * k + kh, t) = u2(o, t * k + kh);
  return left;
}

Tensor batch_slice(const Tensor& t, std::size_t b) {
  const std::size_t per = t.size() / t.dim(0);
  Shape shape(t.shape().begin() + 1, t.shape().end());
  std::vector<double> data(t.data().begin() + b * per, t.data().begin() + (b + 1) * per);
  return Tensor(std::move(shape), std::move(data));
}

Tensor as_matrix(const Tensor& t, std::size_t rows) { return t.reshaped({rows, t.size() / rows}); }

void write_slice(Tensor& dst, std::size_t b, const Tensor& src) {
  const std::size_t per = dst.size() / dst.dim(0);
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + b * per);
}

}  // namespace

Tensor conv2d_forward(const Tensor& kernel, const Tensor& x, std::size_t stride) {
  require(kernel.ndim() == 4 && kernel.dim(2) == kernel.dim(3),
          "conv2d_forward: kernel must be (c_out, c_in, k, k), got " + shape_string(kernel.shape()));
  const ConvDims d = conv_dims(x, kernel.dim(0), kernel.dim(1), kernel.dim(2), stride, "conv2d_forward");
  const Tensor kmat = as_matrix(kernel, d.c_out);
  Tensor y({d.batch, d.c_out, d.ho, d.wo});
  for (std::size_t b = 0; b < d.batch; ++b) {
    const Tensor cols = im2col(x.data().data() + b * d.c_in * d.h * d.w, d);
    write_slice(y, b, matmul(kmat, cols));
  }
  return y;
}

ConvGrads conv2d_backward(const Tensor& kernel, const Tensor& x, const Tensor& dy, std::size_t stride) {
  require(kernel.ndim() == 4, "conv2d_backward: kernel must be 4d");
  const ConvDims d = conv_dims(x, kernel.dim(0), kernel.dim(1), kernel.dim(2), stride, "conv2d_backward");
  require(dy.shape() == Shape{d.batch, d.c_out, d.ho, d.wo},
          "conv2d_backward: output gradient " + shape_string(dy.shape()) + " does not match");
  const Tensor kmat = as_matrix(kernel, d.c_out);
  Tensor dk = Tensor::zeros_like(kmat);
  Tensor dx = Tensor::zeros_like(x);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const Tensor cols = im2col(x.data().data() + b * d.c_in * d.h * d.w, d);
    const Tensor dyb = as_matrix(batch_slice(dy, b), d.c_out);
    dk += matmul_nt(dyb, cols);
    col2im(matmul_tn(kmat, dyb), dx.data().data() + b * d.c_in * d.h * d.w, d);
  }
  return {dk.reshaped(kernel.shape()), std::move(dx)};
}

Tensor conv_kernel_to_matrix(const Tensor& kernel) {
  require(kernel.ndim() == 4 && kernel.dim(2) == kernel.dim(3),
          "conv_kernel_to_matrix: kernel must be (c_out, c_in, k, k)");
  const std::size_t c_out = kernel.dim(0), c_in = kernel.dim(1), k = kernel.dim(2);
  Tensor w({c_out * k, c_in * k});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw)
          w(o * k + kh, c * k + kw) = kernel[((o * c_in + c) * k + kh) * k + kw];
  return w;
}

Tensor matrix_to_conv_kernel(const Tensor& w, std::size_t c_out, std::size_t c_in, std::size_t k) {
  require(w.is_matrix() && w.rows() == c_out * k && w.cols() == c_in * k,
          "matrix_to_conv_kernel: matrix " + shape_string(w.shape()) + " is not (c_out*k, c_in*k)");
  Tensor kernel({c_out, c_in, k, k});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw)
          kernel[((o * c_in + c) * k + kh) * k + kw] = w(o * k + kh, c * k + kw);
  return kernel;
}

Tensor factorized_conv_forward(const Tensor& left, const Tensor& right, const Tensor& x, std::size_t k,
                               std::size_t stride) {
  require(left.is_matrix() && right.is_matrix() && left.cols() == right.cols() && left.cols() >= 1,
          "factorized_conv_forward: factors must share their rank");
  require(k >= 1 && left.rows() % k == 0 && right.rows() % k == 0,
          "factorized_conv_forward: factor rows must be multiples of the kernel size");
  const std::size_t c_out = left.rows() / k, c_in = right.rows() / k, r = left.cols();
  const ConvDims d = conv_dims(x, c_out, c_in, k, stride, "factorized_conv_forward");
  const Tensor u2 = left_as_vertical_filters(left, c_out, k);
  Tensor y({d.batch, d.c_out, d.ho, d.wo});
  for (std::size_t b = 0; b < d.batch; ++b) {
    const Tensor cols1 = row_cols(x.data().data() + b * d.c_in * d.h * d.w, d);
    const Tensor z = matmul_tn(right, cols1);  // r × (h·wo)
    write_slice(y, b, matmul(u2, column_cols(z, r, d)));
  }
  return y;
}

FactorPairGrads factorized_conv_backward(const Tensor& left, const Tensor& right, const Tensor& x,
                                         const Tensor& dy, std::size_t k, std::size_t stride) {
  require(left.is_matrix() && right.is_matrix() && left.cols() == right.cols(),
          "factorized_conv_backward: factors must share their rank");
  const std::size_t c_out = left.rows() / k, c_in = right.rows() / k, r = left.cols();
  const ConvDims d = conv_dims(x, c_out, c_in, k, stride, "factorized_conv_backward");
  require(dy.shape() == Shape{d.batch, d.c_out, d.ho, d.wo},
          "factorized_conv_backward: output gradient " + shape_string(dy.shape()) + " does not match");
  const Tensor u2 = left_as_vertical_filters(left, c_out, k);
  Tensor du2 = Tensor::zeros_like(u2);
  Tensor dright = Tensor::zeros_like(right);
  Tensor dx = Tensor::zeros_like(x);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const Tensor cols1 = row_cols(x.data().data() + b * d.c_in * d.h * d.w, d);
    const Tensor z = matmul_tn(right, cols1);
    const Tensor cols2 = column_cols(z, r, d);
    const Tensor dyb = as_matrix(batch_slice(dy, b), d.c_out);
    du2 += matmul_nt(dyb, cols2);
    Tensor dz({r, d.h * d.wo});
    column_col2im(matmul_tn(u2, dyb), dz, r, d);
    dright += matmul_nt(cols1, dz);
    row_col2im(matmul(right, dz), dx.data().data() + b * d.c_in * d.h * d.w, d);
  }
  return {vertical_filters_as_left(du2, c_out, k), std::move(dright), std::move(dx)};
}

// ---------------------------------------------------------------------------
// Normalization

Tensor batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, bool training, NormCache* cache) {
  require(x.ndim() >= 2, "batch_norm_forward: input needs a channel axis");
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.size() / (batch * channels);
  require(gamma.size() == channels && beta.size() == channels && running_mean.size() == channels &&
              running_var.size() == channels,
          "batch_norm_forward: parameter length does not match " + std::to_string(channels) + " channels");
  if (training && batch < 2) throw std::invalid_argument("batch_norm_forward: training mode needs batch > 1");

  const std::size_t count = batch * spatial;
  std::vector<double> mean(channels, 0.0), var(channels, 0.0);
  if (training) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        const double* p = x.data().data() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) mean[c] += p[s];
      }
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        const double* p = x.data().data() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const double dv = p[s] - mean[c];
          var[c] += dv * dv;
        }
      }
    for (auto& v : var) v /= static_cast<double>(count);
    const double unbias = static_cast<double>(count) / static_cast<double>(count > 1 ? count - 1 : 1);
    for (std::size_t c = 0; c < channels; ++c) {
      running_mean[c] = (1.0 - kNormMomentum) * running_mean[c] + kNormMomentum * mean[c];
      running_var[c] = (1.0 - kNormMomentum) * running_var[c] + kNormMomentum * var[c] * unbias;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + kNormEpsilon);
  Tensor xhat = Tensor::zeros_like(x);
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const double h = (x[off + s] - mean[c]) * inv_std[c];
        xhat[off + s] = h;
        y[off + s] = gamma[c] * h + beta[c];
      }
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

NormGrads batch_norm_backward(const Tensor& dy, const Tensor& gamma, const NormCache& cache) {
  require(dy.shape() == cache.xhat.shape(), "batch_norm_backward: gradient shape does not match the cache");
  const std::size_t batch = dy.dim(0), channels = dy.dim(1);
  const std::size_t spatial = dy.size() / (batch * channels);
  const double count = static_cast<double>(batch * spatial);
  Tensor dgamma({channels}), dbeta({channels});
  std::vector<double> sum_dxhat(channels, 0.0), sum_dxhat_xhat(channels, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const double g = dy[off + s];
        const double h = cache.xhat[off + s];
        dgamma[c] += g * h;
        dbeta[c] += g;
        sum_dxhat[c] += g * gamma[c];
        sum_dxhat_xhat[c] += g * gamma[c] * h;
      }
    }
  Tensor dx = Tensor::zeros_like(dy);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const double dxhat = dy[off + s] * gamma[c];
        dx[off + s] = cache.inv_std[c] / count *
                      (count * dxhat - sum_dxhat[c] - cache.xhat[off + s] * sum_dxhat_xhat[c]);
      }
    }
  return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

Tensor norm_layer_forward(const Tensor& w, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  Tensor rm({w.rows()}), rv({w.rows()}, 1.0);
  return batch_norm_forward(fc_forward(w, x), gamma, beta, rm, rv, true, nullptr);
}

// ---------------------------------------------------------------------------
// Softmax and loss

Tensor softmax_rows(const Tensor& logits) {
  require(logits.is_matrix(), "softmax_rows: expected a matrix");
  const std::size_t n = logits.rows(), c = logits.cols();
  Tensor p = logits;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = p(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, p(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p(i, j) = std::exp(p(i, j) - mx);
      z += p(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) p(i, j) /= z;
  }
  return p;
}

LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.is_matrix() && labels.size() == logits.rows(),
          "softmax_cross_entropy: need one label per logit row");
  const std::size_t n = logits.rows(), c = logits.cols();
  LossAndGrad out;
  out.grad = softmax_rows(logits);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits(i, j) - mx);
    out.loss += (mx + std::log(z)) - logits(i, static_cast<std::size_t>(labels[i]));
    out.grad(i, static_cast<std::size_t>(labels[i])) -= 1.0;
  }
  out.loss /= static_cast<double>(n);
  out.grad *= 1.0 / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention

Tensor mha_forward(std::span<const AttentionHead> heads, const Tensor& x, MhaCache* cache) {
  require(x.is_matrix(), "mha_forward: input must be T×d");
  require(!heads.empty(), "mha_forward: need at least one head");
  const std::size_t d = x.cols();
  Tensor out({x.rows(), d});
  if (cache) {
    *cache = MhaCache{};
    cache->x = x;
  }
  for (const auto& h : heads) {
    const std::size_t r = h.q.is_matrix() ? h.q.cols() : 0;
    if (r < 1) throw std::invalid_argument("mha_forward: attention rank must be at least 1");
    for (const Tensor* t : {&h.q, &h.k, &h.v, &h.o}) {
      require(t->is_matrix() && t->rows() == d && t->cols() == r,
              "mha_forward: head matrix " + shape_string(t->shape()) + " is not " + std::to_string(d) + "x" +
                  std::to_string(r));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(r));
    Tensor xq = matmul(x, h.q), xk = matmul(x, h.k), xv = matmul(x, h.v);
    Tensor probs = softmax_rows(scale * matmul_nt(xq, xk));
    Tensor mixed = matmul(probs, xv);
    out += matmul_nt(mixed, h.o);
    if (cache) {
      cache->xq.push_back(std::move(xq));
      cache->xk.push_back(std::move(xk));
      cache->xv.push_back(std::move(xv));
      cache->probs.push_back(std::move(probs));
      cache->mixed.push_back(std::move(mixed));
    }
  }
  return out;
}

MhaGrads mha_backward(std::span<const AttentionHead> heads, const MhaCache& cache, const Tensor& dy) {
  require(dy.shape() == cache.x.shape(), "mha_backward: gradient shape does not match the input");
  require(cache.probs.size() == heads.size(), "mha_backward: cache was built for a different head count");
  const Tensor& x = cache.x;
  MhaGrads g;
  g.dx = Tensor::zeros_like(x);
  for (std::size_t hi = 0; hi < heads.size(); ++hi) {
    const auto& h = heads[hi];
    const double scale = 1.0 / std::sqrt(static_cast<double>(h.q.cols()));
    const Tensor& probs = cache.probs[hi];
    AttentionHead dh;
    dh.o = matmul_tn(dy, cache.mixed[hi]);
    const Tensor dmixed = matmul(dy, h.o);
    const Tensor dprobs = matmul_nt(dmixed, cache.xv[hi]);
    const Tensor dxv = matmul_tn(probs, dmixed);
    // Softmax Jacobian, row by row.
    Tensor dscores = Tensor::zeros_like(probs);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double dotp = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) dotp += dprobs(i, j) * probs(i, j);
      for (std::size_t j = 0; j < probs.cols(); ++j) dscores(i, j) = probs(i, j) * (dprobs(i, j) - dotp) * scale;
    }
    const Tensor dxq = matmul(dscores, cache.xk[hi]);
    const Tensor dxk = matmul_tn(dscores, cache.xq[hi]);
    dh.q = matmul_tn(x, dxq);
    dh.k = matmul_tn(x, dxk);
    dh.v = matmul_tn(x, dxv);
    g.dx += matmul_nt(dxq, h.q);
    g.dx += matmul_nt(dxk, h.k);
    g.dx += matmul_nt(dxv, h.v);
    g.heads.push_back(std::move(dh));
  }
  return g;
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<double()>& loss, Tensor& param, const Tensor& analytic, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  if (param.shape() != analytic.shape()) throw ShapeError("finite_diff_check: gradient shape does not match");
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + eps;
    const double up = loss();
    param[i] = saved - eps;
    const double down = loss();
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double diff = std::abs(numeric - analytic[i]);
    if (diff <= 1e-8) continue;
    worst = std::max(worst, diff / std::max(std::abs(numeric), std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace fnl

#include "fnl/data.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fnl {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Shape shape = x.shape();
  const std::size_t row = x.size() / shape[0];
  shape[0] = indices.size();
  std::vector<double> data;
  data.reserve(indices.size() * row);
  Dataset out;
  out.labels_per_sample = labels_per_sample;
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset subset index out of range");
    data.insert(data.end(), x.data().begin() + i * row, x.data().begin() + (i + 1) * row);
    out.y.insert(out.y.end(), y.begin() + i * labels_per_sample, y.begin() + (i + 1) * labels_per_sample);
  }
  out.x = Tensor(shape, std::move(data));
  return out;
}

namespace {

void check_class_count(std::size_t n, std::size_t classes) {
  if (classes < 2) throw std::invalid_argument("dataset: need at least two classes");
  if (n < classes * 10) throw std::invalid_argument("dataset: need at least 10 samples per class");
}

}  // namespace

Dataset gen_blobs_cls(std::size_t n, std::size_t classes, std::size_t dim, double spread, std::uint64_t seed) {
  check_class_count(n, classes);
  if (dim < 1) throw std::invalid_argument("blobs: dimension must be positive");
  if (!(spread >= 0.0)) throw std::invalid_argument("blobs: spread must be nonnegative");
  Rng rng(seed);
  const Tensor centers = random_gaussian({classes, dim}, 1.0, rng);
  Dataset d;
  d.x = Tensor({n, dim});
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.y[i] = static_cast<int>(c);
    for (std::size_t j = 0; j < dim; ++j) d.x(i, j) = centers(c, j) + spread * rng.normal();
  }
  return d;
}

Dataset gen_patches_cls(std::size_t n, std::size_t classes, double noise, std::uint64_t seed) {
  check_class_count(n, classes);
  if (!(noise >= 0.0)) throw std::invalid_argument("patches: noise must be nonnegative");
  constexpr std::size_t side = 8;
  Rng rng(seed);
  Dataset d;
  d.x = Tensor({n, 1, side, side});
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.y[i] = static_cast<int>(c);
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    const double freq = 0.15 + 0.15 * rng.uniform();
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const double contrast = 0.5 + rng.uniform();
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t col = 0; col < side; ++col) {
        const double proj = static_cast<double>(col) * ct + static_cast<double>(r) * st;
        d.x[(i * side + r) * side + col] =
            contrast * std::sin(2.0 * std::numbers::pi * freq * proj + phase) + noise * rng.normal();
      }
    }
  }
  return d;
}

Dataset gen_seq_copy(std::size_t n, std::size_t t, std::size_t vocab, std::uint64_t seed) {
  if (n < 1 || t < 1 || vocab < 2) throw std::invalid_argument("seq_copy: need n, t >= 1 and vocab >= 2");
  Rng rng(seed);
  Dataset d;
  d.labels_per_sample = t;
  d.x = Tensor({n, t});
  d.y.resize(n * t);
  for (std::size_t i = 0; i < n * t; ++i) {
    const auto tok = rng.below(vocab);
    d.x[i] = static_cast<double>(tok);
    d.y[i] = static_cast<int>(tok);
  }
  return d;
}

}  // namespace fnl

#pragma once

#include <cstdint>
#include <span>

#include "fnl/layers.hpp"

namespace fnl {

/// Inputs stacked along axis 0. Classification sets carry one label per
/// sample; sequence sets carry one label per token, row-major.
struct Dataset {
  Tensor x;
  Labels y;
  std::size_t labels_per_sample = 1;

  std::size_t size() const { return x.empty() ? 0 : x.dim(0); }
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Gaussian clusters in `dim` dimensions around unit-variance random centers;
/// `spread` is the within-class standard deviation.
Dataset gen_blobs_cls(std::size_t n, std::size_t classes, std::size_t dim, double spread, std::uint64_t seed);

/// 8×8 single-channel images of oriented sinusoidal bars; the class sets the
/// orientation, frequency, phase and contrast are random and `noise` is the
/// standard deviation of additive pixel noise.
Dataset gen_patches_cls(std::size_t n, std::size_t classes, double noise, std::uint64_t seed);

/// Token sequences of length t over `vocab` symbols; the target is the input.
Dataset gen_seq_copy(std::size_t n, std::size_t t, std::size_t vocab, std::uint64_t seed);

}  // namespace fnl

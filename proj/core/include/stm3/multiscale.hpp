#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "stm3/tensor.hpp"

namespace stm3 {

/// Temporal scales ordered fine to coarse. `initial` sizes the decomposition
/// kernels, `amplify` the per-layer amplification kernels.
struct ScaleConfig {
  std::vector<std::size_t> initial;
  std::vector<std::size_t> amplify;

  std::size_t count() const { return initial.size(); }
  std::size_t max_scale() const;
  /// Throws ConfigError unless both lists are nonempty, positive,
  /// nondecreasing and of equal length.
  void validate() const;

  /// [1, 3, 5, ..., 2Q - 1] for both lists.
  static ScaleConfig defaults(std::size_t Q);
};

std::vector<std::size_t> default_scale_list(std::size_t Q);

// Feature layout used throughout the model: [..., T, Q, d], i.e. scales are
// the second-to-last axis and concatenating scales is a plain reshape.

/// H[..., :] = X[..., :] W + b for X[..., C], W[C, d], b[d].
Tensor input_head(const Tensor& X, const Tensor& W, const Tensor& b);

/// Depthwise causal convolution of H[..., T, d] with one kernel [s_q, 1, d]
/// per scale, stacked to [..., T, Q, d].
Tensor multiscale_decompose(const Tensor& H, const std::vector<Tensor>& kernels);

/// Averaging kernel [s, 1, channels] with entries 1/s plus N(0, noise_std).
Tensor averaging_kernel(std::size_t s, std::size_t channels, double noise_std, std::mt19937_64& rng);

}  // namespace stm3

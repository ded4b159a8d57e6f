#include "stm3/multiscale.hpp"

#include <algorithm>

#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

std::size_t ScaleConfig::max_scale() const {
  std::size_t m = 0;
  for (std::size_t s : initial) m = std::max(m, s);
  for (std::size_t s : amplify) m = std::max(m, s);
  return m;
}

void ScaleConfig::validate() const {
  if (initial.empty()) throw ConfigError("scale list must contain at least one scale");
  if (amplify.size() != initial.size()) {
    throw ConfigError("initial and amplify scale lists must have the same length");
  }
  for (const auto* list : {&initial, &amplify}) {
    for (std::size_t i = 0; i < list->size(); ++i) {
      if ((*list)[i] == 0) throw ConfigError("scales must be positive");
      if (i > 0 && (*list)[i] < (*list)[i - 1]) throw ConfigError("scales must be nondecreasing");
    }
  }
}

std::vector<std::size_t> default_scale_list(std::size_t Q) {
  std::vector<std::size_t> s(Q);
  for (std::size_t q = 0; q < Q; ++q) s[q] = 2 * q + 1;
  return s;
}

ScaleConfig ScaleConfig::defaults(std::size_t Q) {
  return ScaleConfig{default_scale_list(Q), default_scale_list(Q)};
}

Tensor input_head(const Tensor& X, const Tensor& W, const Tensor& b) { return linear(X, W, b); }

Tensor multiscale_decompose(const Tensor& H, const std::vector<Tensor>& kernels) {
  if (kernels.empty()) throw ArgumentError("multiscale_decompose: no scale kernels");
  if (H.ndim() < 2) throw DimensionError("multiscale_decompose: input must be [..., T, d]");
  const std::size_t d = H.shape().back();
  std::vector<Tensor> parts;
  parts.reserve(kernels.size());
  for (const Tensor& k : kernels) parts.push_back(conv1d_causal(H, k, d));
  Shape out = H.shape();
  out.back() = kernels.size();
  out.push_back(d);
  return reshape(concat_last(parts), out);
}

Tensor averaging_kernel(std::size_t s, std::size_t channels, double noise_std, std::mt19937_64& rng) {
  if (s == 0) throw ArgumentError("kernel size must be positive");
  std::normal_distribution<double> noise(0.0, noise_std);
  Tensor k({s, 1, channels});
  auto kd = k.mutable_data();
  for (auto& v : kd) v = 1.0 / static_cast<double>(s) + (noise_std > 0 ? noise(rng) : 0.0);
  return k;
}

}  // namespace stm3

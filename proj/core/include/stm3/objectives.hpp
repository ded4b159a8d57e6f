#pragma once

#include <cstddef>
#include <vector>

#include "stm3/tensor.hpp"

namespace stm3 {

enum class LossKind { squared, absolute };

/// Mean over all elements of the squared (or absolute) error.
Tensor prediction_loss(const Tensor& prediction, const Tensor& target, LossKind kind = LossKind::squared);

struct ContrastiveConfig {
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double theta = 5.0;
  double lambda = 0.01;
  std::size_t max_negatives = 32;

  void validate() const;
};

/// Scale-pair weight of the asymmetric similarity, for 1-based scales p, q:
/// |p - q + 1|^(-gamma1) when p > q, |q - p + 1|^gamma2 otherwise.
double causal_prefactor(std::size_t p, std::size_t q, const ContrastiveConfig& cfg);

/// causal_prefactor(p, q) * cos(x, y) for vectors x, y. Cosine of a zero
/// vector is 0.
Tensor causal_similarity(const Tensor& x, const Tensor& y, std::size_t p, std::size_t q,
                         const ContrastiveConfig& cfg);

struct FeatureTag {
  std::size_t sample = 0;
  std::size_t expert = 0;
  std::size_t scale = 1;  // 1-based
};

struct AnchorSets {
  std::size_t anchor = 0;  // index into the feature list
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

/// Positive and negative sets for every anchor of `expert` (all experts when
/// expert is npos). For anchor (i, k, p):
///   positives: (j, k, p) for j != i, then (i, k, q) for q > p
///   negatives: (i, k, q) for q < p and (j, k', p) for k' != k, interleaved
///              round-robin between the two sources and cut at max_negatives
inline constexpr std::size_t kAllExperts = static_cast<std::size_t>(-1);
std::vector<AnchorSets> contrastive_sets(const std::vector<FeatureTag>& tags, std::size_t max_negatives,
                                         std::size_t expert = kAllExperts);

/// sum over anchors of mean over positives z* of
///   -log( exp(s[a, z*]) / (exp(s[a, z*]) + sum_{z' in negatives} exp(s[a, z'])) )
/// where `logits` [F, F] already holds theta * s. Anchors without positives add 0.
Tensor info_nce(const Tensor& logits, const std::vector<AnchorSets>& sets);

/// Per-expert causal contrastive loss for pooled features[F, d] with tags.
/// Returns one scalar tensor per expert in [0, experts).
std::vector<Tensor> causal_contrastive_losses(const Tensor& features, const std::vector<FeatureTag>& tags,
                                              std::size_t experts, const ContrastiveConfig& cfg);

/// prediction + lambda * sum over layers of the mean over experts.
Tensor total_loss(const Tensor& prediction_loss, const std::vector<std::vector<Tensor>>& contrastive,
                  double lambda);

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent, over entries with |y| > 1e-6
  bool mape_defined = true;

  /// mape, or ArgumentError when every target was masked.
  double require_mape() const;
};

Metrics metrics(const Tensor& prediction, const Tensor& target);

/// Streaming form, for aggregating over many windows.
class MetricsAccumulator {
 public:
  void add(const Tensor& prediction, const Tensor& target);
  Metrics result() const;
  std::size_t count() const { return n_; }

 private:
  double abs_sum_ = 0.0;
  double sq_sum_ = 0.0;
  double pct_sum_ = 0.0;
  std::size_t n_ = 0;
  std::size_t pct_n_ = 0;
};

}  // namespace stm3

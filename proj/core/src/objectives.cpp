#include "stm3/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

Tensor prediction_loss(const Tensor& prediction, const Tensor& target, LossKind kind) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("prediction_loss: " + shape_str(prediction.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const Tensor err = sub(prediction, target);
  if (kind == LossKind::squared) return mean(square(err));
  return mean(activation(Activation::abs, err));
}

void ContrastiveConfig::validate() const {
  if (!(gamma1 >= 0) || !(gamma2 >= 0)) throw ConfigError("contrastive exponents must be nonnegative");
  if (!(theta > 0)) throw ConfigError("contrastive temperature must be positive");
  if (!(lambda >= 0)) throw ConfigError("contrastive weight must be nonnegative");
}

double causal_prefactor(std::size_t p, std::size_t q, const ContrastiveConfig& cfg) {
  const double pp = static_cast<double>(p);
  const double qq = static_cast<double>(q);
  if (p > q) return std::pow(std::abs(pp - qq + 1.0), -cfg.gamma1);
  return std::pow(std::abs(qq - pp + 1.0), cfg.gamma2);
}

Tensor causal_similarity(const Tensor& x, const Tensor& y, std::size_t p, std::size_t q,
                         const ContrastiveConfig& cfg) {
  if (x.size() != y.size()) throw DimensionError("causal_similarity: vector lengths differ");
  const Tensor c = cosine_similarity(reshape(x, {1, x.size()}), reshape(y, {1, y.size()}));
  return reshape(scale(c, causal_prefactor(p, q, cfg)), {});
}

std::vector<AnchorSets> contrastive_sets(const std::vector<FeatureTag>& tags, std::size_t max_negatives,
                                         std::size_t expert) {
  std::vector<AnchorSets> out;
  for (std::size_t a = 0; a < tags.size(); ++a) {
    const FeatureTag& t = tags[a];
    if (expert != kAllExperts && t.expert != expert) continue;
    AnchorSets s;
    s.anchor = a;
    std::vector<std::size_t> lower;
    std::vector<std::size_t> other_expert;
    for (std::size_t b = 0; b < tags.size(); ++b) {
      if (b == a) continue;
      const FeatureTag& u = tags[b];
      if (u.expert == t.expert && u.scale == t.scale && u.sample != t.sample) s.positives.push_back(b);
      if (u.expert != t.expert && u.scale == t.scale) other_expert.push_back(b);
      if (u.sample == t.sample && u.expert == t.expert && u.scale < t.scale) lower.push_back(b);
    }
    for (std::size_t b = 0; b < tags.size(); ++b) {
      const FeatureTag& u = tags[b];
      if (u.sample == t.sample && u.expert == t.expert && u.scale > t.scale) s.positives.push_back(b);
    }
    std::size_t i = 0;
    std::size_t j = 0;
    while (s.negatives.size() < max_negatives && (i < lower.size() || j < other_expert.size())) {
      if (i < lower.size()) s.negatives.push_back(lower[i++]);
      if (s.negatives.size() < max_negatives && j < other_expert.size()) s.negatives.push_back(other_expert[j++]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

Tensor info_nce(const Tensor& logits, const std::vector<AnchorSets>& sets) {
  if (logits.ndim() != 2 || logits.dim(0) != logits.dim(1)) {
    throw DimensionError("info_nce: logits must be square, got " + shape_str(logits.shape()));
  }
  const std::size_t F = logits.dim(0);
  for (const AnchorSets& s : sets) {
    bool ok = s.anchor < F;
    for (std::size_t p : s.positives) ok = ok && p < F;
    for (std::size_t n : s.negatives) ok = ok && n < F;
    if (!ok) throw ArgumentError("info_nce: set index out of range");
  }
  const auto L = logits.data();
  double total = 0.0;
  for (const AnchorSets& s : sets) {
    if (s.positives.empty()) continue;
    const double* row = L.data() + s.anchor * F;
    double neg_max = -std::numeric_limits<double>::infinity();
    for (std::size_t n : s.negatives) neg_max = std::max(neg_max, row[n]);
    double acc = 0.0;
    for (std::size_t p : s.positives) {
      const double m = std::max(neg_max, row[p]);
      double denom = std::exp(row[p] - m);
      for (std::size_t n : s.negatives) denom += std::exp(row[n] - m);
      acc += -(row[p] - m) + std::log(denom);
    }
    total += acc / static_cast<double>(s.positives.size());
  }
  return OpRecorder::finish("info_nce", Tensor::scalar(total), {&logits}, [logits, sets](BackwardContext& ctx) {
    const std::size_t F = logits.dim(0);
    const auto L = logits.data();
    const double g = ctx.grad_out()[0];
    auto gl = ctx.grad_in(0);
    for (const AnchorSets& s : sets) {
      if (s.positives.empty()) continue;
      const double* row = L.data() + s.anchor * F;
      double* grow = gl.data() + s.anchor * F;
      const double w = g / static_cast<double>(s.positives.size());
      double neg_max = -std::numeric_limits<double>::infinity();
      for (std::size_t n : s.negatives) neg_max = std::max(neg_max, row[n]);
      for (std::size_t p : s.positives) {
        const double m = std::max(neg_max, row[p]);
        const double ep = std::exp(row[p] - m);
        double denom = ep;
        for (std::size_t n : s.negatives) denom += std::exp(row[n] - m);
        grow[p] += w * (ep / denom - 1.0);
        for (std::size_t n : s.negatives) grow[n] += w * std::exp(row[n] - m) / denom;
      }
    }
  });
}

std::vector<Tensor> causal_contrastive_losses(const Tensor& features, const std::vector<FeatureTag>& tags,
                                              std::size_t experts, const ContrastiveConfig& cfg) {
  if (features.ndim() != 2 || features.dim(0) != tags.size()) {
    throw DimensionError("causal_contrastive_losses: features must be [F, d] with one tag per row");
  }
  const std::size_t F = tags.size();
  Tensor weights({F, F});
  {
    auto w = weights.mutable_data();
    for (std::size_t a = 0; a < F; ++a)
      for (std::size_t b = 0; b < F; ++b) w[a * F + b] = cfg.theta * causal_prefactor(tags[a].scale, tags[b].scale, cfg);
  }
  const Tensor logits = mul(cosine_similarity(features, features), weights);
  std::vector<Tensor> losses;
  losses.reserve(experts);
  for (std::size_t k = 0; k < experts; ++k) {
    losses.push_back(info_nce(logits, contrastive_sets(tags, cfg.max_negatives, k)));
  }
  return losses;
}

Tensor total_loss(const Tensor& prediction_loss, const std::vector<std::vector<Tensor>>& contrastive,
                  double lambda) {
  if (!(lambda >= 0)) throw ArgumentError("total_loss: lambda must be nonnegative");
  Tensor total = prediction_loss;
  if (lambda == 0.0) return total;
  for (const auto& layer : contrastive) {
    if (layer.empty()) continue;
    Tensor layer_sum = layer.front();
    for (std::size_t k = 1; k < layer.size(); ++k) layer_sum = add(layer_sum, layer[k]);
    total = add(total, scale(layer_sum, lambda / static_cast<double>(layer.size())));
  }
  return total;
}

void MetricsAccumulator::add(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("metrics: " + shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  const auto p = prediction.data();
  const auto y = target.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - y[i];
    abs_sum_ += std::abs(e);
    sq_sum_ += e * e;
    if (std::abs(y[i]) > 1e-6) {
      pct_sum_ += std::abs(e / y[i]);
      ++pct_n_;
    }
  }
  n_ += p.size();
}

Metrics MetricsAccumulator::result() const {
  if (n_ == 0) throw ArgumentError("metrics: no entries");
  Metrics m;
  m.mae = abs_sum_ / static_cast<double>(n_);
  m.rmse = std::sqrt(sq_sum_ / static_cast<double>(n_));
  m.mape_defined = pct_n_ > 0;
  m.mape = m.mape_defined ? 100.0 * pct_sum_ / static_cast<double>(pct_n_)
                          : std::numeric_limits<double>::quiet_NaN();
  return m;
}

double Metrics::require_mape() const {
  if (!mape_defined) throw ArgumentError("metrics: every target is masked, MAPE is undefined");
  return mape;
}

Metrics metrics(const Tensor& prediction, const Tensor& target) {
  MetricsAccumulator acc;
  acc.add(prediction, target);
  return acc.result();
}

}  // namespace stm3

#include "stm3/moe.hpp"

#include <algorithm>
#include <cmath>

#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

std::vector<std::size_t> RoutingDecision::members(std::size_t k) const {
  std::vector<std::size_t> rows;
  for (std::size_t m = 0; m < selected.size(); ++m)
    if (selected[m] == k) rows.push_back(m);
  return rows;
}

std::size_t argmax_first(const double* values, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (values[k] > values[best]) best = k;
  return best;
}

RoutingDecision route(const Tensor& inputs, const Tensor& gate_w, double noise_bound, bool training,
                      std::mt19937_64* rng) {
  if (inputs.ndim() != 2 || gate_w.ndim() != 2 || inputs.dim(1) != gate_w.dim(0)) {
    throw DimensionError("route: inputs " + shape_str(inputs.shape()) + " do not match gate " +
                         shape_str(gate_w.shape()));
  }
  const std::size_t M = inputs.dim(0);
  const std::size_t K = gate_w.dim(1);
  if (K == 0) throw ArgumentError("route: at least one expert is required");
  if (training && !(noise_bound > 0)) throw ArgumentError("route: noise bound must be positive");
  if (training && !rng) throw ArgumentError("route: training mode needs a random stream");

  RoutingDecision d;
  {
    NoGradScope no_grad;
    d.logits = matmul(inputs, gate_w);
  }
  d.noise = Tensor::zeros({M, K});
  if (training) {
    std::uniform_real_distribution<double> u(0.0, noise_bound);
    for (auto& v : d.noise.mutable_data()) v = u(*rng);
  }
  d.selected.resize(M);
  std::vector<double> score(K);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) score[k] = d.logits[m * K + k] + d.noise[m * K + k];
    d.selected[m] = argmax_first(score.data(), K);
  }
  return d;
}

RoutingDecision gate_scores(const Tensor& embedding, const Tensor& gate_w, double noise_bound,
                            bool training, std::mt19937_64* rng) {
  return route(reshape(embedding.detach(), {1, embedding.size()}), gate_w, noise_bound, training, rng);
}

MmmOutput mmm_forward(const Tensor& x, const MambaParams& shared, const std::vector<MambaParams>& experts,
                      const RoutingDecision& decision, const MambaDims& dims, ScanMode mode) {
  const std::size_t M = x.dim(0);
  if (decision.selected.size() != M) throw RoutingError("mmm_forward: routing covers a different number of rows");
  for (std::size_t g : decision.selected) {
    if (g >= experts.size()) {
      throw RoutingError("mmm_forward: expert index " + std::to_string(g) + " out of range for " +
                         std::to_string(experts.size()) + " experts");
    }
  }
  MmmOutput out;
  out.z = multiscale_mamba_forward(x, shared, dims, mode);
  out.specialized.reserve(experts.size());
  std::vector<Tensor> routed;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    const std::vector<std::size_t> rows = decision.members(k);
    if (rows.empty()) {
      out.specialized.emplace_back(Shape{0});
      continue;
    }
    const Tensor y = multiscale_mamba_forward(gather_rows(x, rows), experts[k], dims, mode);
    out.specialized.push_back(y);
    routed.push_back(scatter_rows(y, rows, M));
  }
  for (const Tensor& r : routed) out.z = add(out.z, r);
  return out;
}

DisagreementEstimate routing_disagreement_mc(const Tensor& H, double noise_bound, std::size_t trials,
                                             std::mt19937_64& rng) {
  if (H.ndim() != 2) throw DimensionError("routing_disagreement_mc: H must be [M, K]");
  if (trials == 0) throw ArgumentError("routing_disagreement_mc: trials must be positive");
  if (!(noise_bound > 0)) throw ArgumentError("routing_disagreement_mc: noise bound must be positive");
  const std::size_t M = H.dim(0);
  const std::size_t K = H.dim(1);
  std::uniform_real_distribution<double> u(0.0, noise_bound);
  std::vector<double> r(K);
  std::vector<double> score(K);
  std::size_t disagree = 0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    for (auto& v : r) v = u(rng);
    std::size_t first = 0;
    bool differs = false;
    for (std::size_t m = 0; m < M && !differs; ++m) {
      for (std::size_t k = 0; k < K; ++k) score[k] = H[m * K + k] + r[k];
      const std::size_t g = argmax_first(score.data(), K);
      if (m == 0) first = g;
      differs = g != first;
    }
    disagree += differs ? 1 : 0;
  }
  DisagreementEstimate e;
  e.trials = trials;
  e.probability = static_cast<double>(disagree) / static_cast<double>(trials);
  e.standard_error = std::sqrt(e.probability * (1.0 - e.probability) / static_cast<double>(trials));
  return e;
}

double routing_bound(const Tensor& H, double noise_bound) {
  if (!(noise_bound > 0)) throw ArgumentError("routing_bound: noise bound must be positive");
  if (H.ndim() != 2) throw DimensionError("routing_bound: H must be [M, K]");
  const std::size_t M = H.dim(0);
  const std::size_t K = H.dim(1);
  double spread = 0.0;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = i + 1; j < M; ++j) {
      double inf_norm = 0.0;
      for (std::size_t k = 0; k < K; ++k) inf_norm = std::max(inf_norm, std::abs(H[i * K + k] - H[j * K + k]));
      spread += inf_norm;
    }
  const double rho = 1.0 / noise_bound;
  return std::min(1.0, rho * static_cast<double>(K * K) * spread);
}

}  // namespace stm3

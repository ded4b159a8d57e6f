#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "stm3/mamba.hpp"
#include "stm3/tensor.hpp"

namespace stm3 {

/// Top-1 routing for a set of rows (nodes). logits and noise are [M, K].
struct RoutingDecision {
  Tensor logits;
  Tensor noise;
  std::vector<std::size_t> selected;

  /// Row indices routed to expert k, ascending.
  std::vector<std::size_t> members(std::size_t k) const;
  std::size_t experts() const { return logits.ndim() == 2 ? logits.dim(1) : 0; }
};

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_first(const double* values, std::size_t n);

/// logits = inputs[M, d_in] · gate_w[d_in, K]. In training mode every row gets
/// noise ~ U(0, noise_bound)^K drawn from `rng`; otherwise the noise is zero.
/// The decision does not enter the tape: argmax carries no gradient.
RoutingDecision route(const Tensor& inputs, const Tensor& gate_w, double noise_bound, bool training,
                      std::mt19937_64* rng);

/// Single-row form of route().
RoutingDecision gate_scores(const Tensor& embedding, const Tensor& gate_w, double noise_bound,
                            bool training, std::mt19937_64* rng);

struct MmmOutput {
  Tensor z;                         // shared + selected specialized expert, same shape as the input
  std::vector<Tensor> specialized;  // specialized expert outputs in input row order
};

/// z[m] = E_0(x[m]) + E_{g(m)}(x[m]) for x[M, T, Q, d]. Each specialized
/// expert runs once on the rows routed to it.
MmmOutput mmm_forward(const Tensor& x, const MambaParams& shared, const std::vector<MambaParams>& experts,
                      const RoutingDecision& decision, const MambaDims& dims,
                      ScanMode mode = ScanMode::parallel);

struct DisagreementEstimate {
  double probability = 0.0;
  double standard_error = 0.0;
  std::size_t trials = 0;
};

/// Monte-Carlo estimate of the probability that some pair of rows of
/// H[M, K] picks different experts when every row sees the same noise draw
/// r ~ U(0, noise_bound)^K.
DisagreementEstimate routing_disagreement_mc(const Tensor& H, double noise_bound, std::size_t trials,
                                             std::mt19937_64& rng);

/// min(1, K^2 / noise_bound * sum_{i<j} ||h_i - h_j||_inf).
double routing_bound(const Tensor& H, double noise_bound);

}  // namespace stm3

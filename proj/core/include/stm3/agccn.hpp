#pragma once

#include <cstddef>

#include "stm3/tensor.hpp"

namespace stm3 {

/// Learnable graph and low-rank node-specific GCN weights.
///   node_emb E_A [N, d_e], gcn_emb E_g [N, d_low],
///   gcn_weight W_g [d_low, d, d], gcn_bias b_g [d_low, d]
struct GcnParams {
  Tensor node_emb;
  Tensor gcn_emb;
  Tensor gcn_weight;
  Tensor gcn_bias;
};

/// Single-head attention across scales. Projections are [d, d], applied on
/// the right; ln_gain and ln_bias are [d].
struct ScaleAttentionParams {
  Tensor wq;
  Tensor wk;
  Tensor wv;
  Tensor wo;
  Tensor ln_gain;
  Tensor ln_bias;
};

struct AgccnParams {
  GcnParams gcn;
  ScaleAttentionParams attn;
};

/// Row-softmax of ReLU(E_A E_A^T): rows are nonnegative and sum to one.
Tensor normalized_adjacency(const Tensor& node_emb);

/// mask[p][j] = 0 when j >= p, -inf otherwise: scale p reads only itself and
/// coarser scales.
Tensor causal_scale_mask(std::size_t Q);

/// (I + A_hat) H Theta + b over H[N, ..., d], where every node n has its own
/// Theta[n] = E_g[n] W_g and b[n] = E_g[n] b_g shared by all inner positions.
Tensor adaptive_gcn(const Tensor& H, const Tensor& adjacency, const GcnParams& p);

/// LayerNorm(Linear_out(softmax(Q K^T / sqrt(d) + M) V) + H) applied to each
/// scale sequence H[..., Q, d].
Tensor causal_scale_attention(const Tensor& H, const ScaleAttentionParams& p);

/// adaptive_gcn then causal_scale_attention for H[N, T, Q, d]; no coupling
/// across time steps.
Tensor agccn_forward(const Tensor& H, const AgccnParams& p);

}  // namespace stm3

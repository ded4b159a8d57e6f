#include "stm3/agccn.hpp"

#include <cmath>
#include <limits>

#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

Tensor normalized_adjacency(const Tensor& node_emb) {
  if (node_emb.ndim() != 2 || node_emb.dim(0) == 0) {
    throw DimensionError("normalized_adjacency: embeddings must be [N, d_e] with N >= 1");
  }
  const std::size_t N = node_emb.dim(0);
  const Tensor e = reshape(node_emb, {1, N, node_emb.dim(1)});
  return softmax_lastdim(relu(reshape(bmm(e, e, true), {N, N})));
}

Tensor causal_scale_mask(std::size_t Q) {
  Tensor m({Q, Q});
  auto md = m.mutable_data();
  for (std::size_t p = 0; p < Q; ++p)
    for (std::size_t j = 0; j < Q; ++j)
      md[p * Q + j] = j >= p ? 0.0 : -std::numeric_limits<double>::infinity();
  return m;
}

Tensor adaptive_gcn(const Tensor& H, const Tensor& adjacency, const GcnParams& p) {
  if (H.ndim() < 2) throw DimensionError("adaptive_gcn: input must be [N, ..., d]");
  const std::size_t N = H.dim(0);
  const std::size_t d = H.shape().back();
  const std::size_t inner = H.size() / (N * d);
  if (adjacency.shape() != Shape{N, N}) {
    throw DimensionError("adaptive_gcn: adjacency " + shape_str(adjacency.shape()) + " for " +
                         std::to_string(N) + " nodes");
  }
  const std::size_t d_low = p.gcn_emb.dim(1);
  if (p.gcn_emb.shape() != Shape{N, d_low} || p.gcn_weight.shape() != Shape{d_low, d, d} ||
      p.gcn_bias.shape() != Shape{d_low, d}) {
    throw DimensionError("adaptive_gcn: low-rank factor shapes do not match the input");
  }

  const Tensor flat = reshape(H, {N, inner * d});
  const Tensor mixed = add(flat, matmul(adjacency, flat));
  const Tensor theta = reshape(matmul(p.gcn_emb, reshape(p.gcn_weight, {d_low, d * d})), {N, d, d});
  const Tensor bias = matmul(p.gcn_emb, p.gcn_bias);
  const Tensor out = add_rowwise(bmm(reshape(mixed, {N, inner, d}), theta), bias);
  return reshape(out, H.shape());
}

Tensor causal_scale_attention(const Tensor& H, const ScaleAttentionParams& p) {
  if (H.ndim() < 2) throw DimensionError("causal_scale_attention: input must be [..., Q, d]");
  const std::size_t Q = H.shape()[H.ndim() - 2];
  const std::size_t d = H.shape().back();
  const std::size_t seqs = H.size() / (Q * d);
  const Tensor x = reshape(H, {seqs, Q, d});
  const Tensor q = matmul(x, p.wq);
  const Tensor k = matmul(x, p.wk);
  const Tensor v = matmul(x, p.wv);
  const Tensor scores = scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor attn = masked_softmax_lastdim(scores, causal_scale_mask(Q));
  const Tensor out = matmul(bmm(attn, v), p.wo);
  return reshape(layer_norm(add(out, x), p.ln_gain, p.ln_bias), H.shape());
}

Tensor agccn_forward(const Tensor& H, const AgccnParams& p) {
  if (H.ndim() != 4) throw DimensionError("agccn_forward: input must be [N, T, Q, d]");
  const Tensor adjacency = normalized_adjacency(p.gcn.node_emb);
  return causal_scale_attention(adaptive_gcn(H, adjacency, p.gcn), p.attn);
}

}  // namespace stm3

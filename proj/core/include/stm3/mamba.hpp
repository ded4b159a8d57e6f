#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "stm3/multiscale.hpp"
#include "stm3/scan.hpp"
#include "stm3/tensor.hpp"

namespace stm3 {

struct MambaDims {
  std::size_t d = 0;        // model width per scale
  std::size_t Q = 0;        // number of scales
  std::size_t d_inner = 0;  // inner width per scale
  std::size_t d_state = 0;
  std::size_t dt_rank = 0;

  std::size_t channels() const { return d_inner * Q; }
};

/// Resolves zero entries to the defaults d_inner = 2d, d_state = 16,
/// dt_rank = ceil(d_inner Q / 16).
MambaDims resolve_mamba_dims(std::size_t d, std::size_t Q, std::size_t d_inner = 0,
                             std::size_t d_state = 0, std::size_t dt_rank = 0);

inline constexpr std::size_t kTemporalMixWidth = 4;

/// One multiscale selective-SSM block. With D = d_inner Q:
///   in_w [dQ, 2D], in_b [2D], amplify[q] [s_q, 1, d_inner], mix [4, 1, D],
///   proj_w [D, dt_rank + 2 d_state], dt_w [dt_rank, D], dt_b [D],
///   omega [D], log_a [D, d_state], out_w [D, dQ], out_b [dQ]
struct MambaParams {
  Tensor in_w, in_b;
  std::vector<Tensor> amplify;
  Tensor mix;
  Tensor proj_w;
  Tensor dt_w, dt_b;
  Tensor omega;
  Tensor log_a;
  Tensor out_w, out_b;
};

MambaParams init_mamba(const MambaDims& dims, const ScaleConfig& scales, std::mt19937_64& rng);

struct SelectedParams {
  Tensor delta;  // [..., T, D], strictly positive
  Tensor B;      // [..., T, d_state]
  Tensor C;      // [..., T, d_state]
};

/// Per-scale causal depthwise convolution of h[..., T, Q * d_inner].
Tensor scale_amplify(const Tensor& h, const std::vector<Tensor>& kernels);

/// SiLU(depthwise causal conv(h, kernel)) with kernel [4, 1, D].
Tensor temporal_mix(const Tensor& h, const Tensor& kernel);

/// [delta, B, C] = tanh(h W_proj); delta_hat = softplus(delta W_dt + b_dt + omega).
SelectedParams select_params(const Tensor& h, const MambaParams& p, const MambaDims& dims);

/// A = -exp(log_a).
Tensor state_matrix(const MambaParams& p);

/// x[..., T, Q, d] -> [..., T, Q, d]. Leading axes (e.g. nodes) are batched.
Tensor multiscale_mamba_forward(const Tensor& x, const MambaParams& p, const MambaDims& dims,
                                ScanMode mode = ScanMode::parallel);

}  // namespace stm3

#include "stm3/mamba.hpp"

#include <cmath>

#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

MambaDims resolve_mamba_dims(std::size_t d, std::size_t Q, std::size_t d_inner, std::size_t d_state,
                             std::size_t dt_rank) {
  if (d == 0 || Q == 0) throw ConfigError("model width and scale count must be positive");
  MambaDims dims;
  dims.d = d;
  dims.Q = Q;
  dims.d_inner = d_inner ? d_inner : 2 * d;
  dims.d_state = d_state ? d_state : 16;
  dims.dt_rank = dt_rank ? dt_rank : (dims.d_inner * Q + 15) / 16;
  return dims;
}

MambaParams init_mamba(const MambaDims& dims, const ScaleConfig& scales, std::mt19937_64& rng) {
  if (scales.count() != dims.Q) throw ConfigError("scale list length differs from Q");
  const std::size_t D = dims.channels();
  const std::size_t dq = dims.d * dims.Q;
  const std::size_t sel = dims.dt_rank + 2 * dims.d_state;
  MambaParams p;
  p.in_w = fan_in_uniform({dq, 2 * D}, dq, rng);
  p.in_b = fan_in_uniform({2 * D}, dq, rng);
  for (std::size_t s : scales.amplify) p.amplify.push_back(averaging_kernel(s, dims.d_inner, 0.01, rng));
  p.mix = fan_in_uniform({kTemporalMixWidth, 1, D}, kTemporalMixWidth, rng);
  p.proj_w = fan_in_uniform({D, sel}, D, rng);
  p.dt_w = fan_in_uniform({dims.dt_rank, D}, dims.dt_rank, rng);
  p.dt_b = fan_in_uniform({D}, dims.dt_rank, rng);
  p.omega = Tensor::zeros({D});
  p.log_a = Tensor({D, dims.d_state});
  {
    auto la = p.log_a.mutable_data();
    for (std::size_t c = 0; c < D; ++c)
      for (std::size_t n = 0; n < dims.d_state; ++n) la[c * dims.d_state + n] = std::log(static_cast<double>(n + 1));
  }
  p.out_w = fan_in_uniform({D, dq}, D, rng);
  p.out_b = fan_in_uniform({dq}, D, rng);
  return p;
}

Tensor scale_amplify(const Tensor& h, const std::vector<Tensor>& kernels) {
  if (kernels.empty()) throw ArgumentError("scale_amplify: no kernels");
  const std::size_t width = h.shape().back();
  const std::size_t Q = kernels.size();
  if (width % Q != 0) throw DimensionError("scale_amplify: channel count not divisible by scale count");
  const std::size_t per = width / Q;
  std::vector<Tensor> parts;
  parts.reserve(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    parts.push_back(conv1d_causal(slice_last(h, q * per, per), kernels[q], per));
  }
  return concat_last(parts);
}

Tensor temporal_mix(const Tensor& h, const Tensor& kernel) {
  return silu(conv1d_causal(h, kernel, h.shape().back()));
}

SelectedParams select_params(const Tensor& h, const MambaParams& p, const MambaDims& dims) {
  const Tensor sel = tanh(matmul(h, p.proj_w));
  const Tensor delta = slice_last(sel, 0, dims.dt_rank);
  SelectedParams out;
  out.B = slice_last(sel, dims.dt_rank, dims.d_state);
  out.C = slice_last(sel, dims.dt_rank + dims.d_state, dims.d_state);
  out.delta = softplus(add_bias(linear(delta, p.dt_w, p.dt_b), p.omega));
  return out;
}

Tensor state_matrix(const MambaParams& p) { return scale(exp(p.log_a), -1.0); }

Tensor multiscale_mamba_forward(const Tensor& x, const MambaParams& p, const MambaDims& dims,
                                ScanMode mode) {
  if (x.ndim() < 3 || x.shape()[x.ndim() - 2] != dims.Q || x.shape().back() != dims.d) {
    throw DimensionError("multiscale_mamba_forward: input " + shape_str(x.shape()) +
                         " is not [..., T, Q, d] for this block");
  }
  const std::size_t D = dims.channels();
  Shape flat_shape(x.shape().begin(), x.shape().end() - 2);
  flat_shape.push_back(dims.Q * dims.d);

  // Concat: with scales on the second-to-last axis this is a reshape.
  const Tensor concat = reshape(x, flat_shape);
  const Tensor proj = linear(concat, p.in_w, p.in_b);
  const Tensor h = slice_last(proj, 0, D);
  const Tensor z = slice_last(proj, D, D);

  const Tensor amplified = scale_amplify(h, p.amplify);
  const Tensor mixed = temporal_mix(amplified, p.mix);
  const SelectedParams s = select_params(mixed, p, dims);
  const Tensor y = selective_ssm(s.delta, state_matrix(p), s.B, s.C, mixed, mode);
  const Tensor gated = mul(silu(z), y);
  return reshape(linear(gated, p.out_w, p.out_b), x.shape());
}

}  // namespace stm3

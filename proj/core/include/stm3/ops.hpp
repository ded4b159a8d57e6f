#pragma once

#include <cstddef>
#include <vector>

#include "stm3/tensor.hpp"

namespace stm3 {

// Every operation records its gradient rule when an input is tracked on the
// active tape. Leading dimensions are treated as batch dimensions wherever an
// operation is defined on the trailing axes.

// --- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
/// Contiguous range [start, start + len) of the last axis.
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len);
Tensor concat_last(const std::vector<Tensor>& parts);
/// Concatenation along axis 0.
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Rows of x (axis 0) selected by index.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index);
/// Inverse of gather_rows: a tensor with `rows` rows, x placed at `index`, zeros elsewhere.
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& index, std::size_t rows);

// --- linear algebra ---------------------------------------------------------

/// a[..., k] · b[k, n] -> [..., n]; leading axes of a are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product a[B, m, k] · b[B, k, n] (or b[B, n, k] when transpose_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x · W, optionally + bias.
Tensor linear(const Tensor& x, const Tensor& weight);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x[B, M, n] + bias[B, n], broadcasting over the middle axis.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);

enum class Activation { relu, tanh, silu, softplus, exp, sigmoid, abs };

Tensor activation(Activation kind, const Tensor& x);
inline Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
inline Tensor tanh(const Tensor& x) { return activation(Activation::tanh, x); }
inline Tensor silu(const Tensor& x) { return activation(Activation::silu, x); }
inline Tensor softplus(const Tensor& x) { return activation(Activation::softplus, x); }
inline Tensor exp(const Tensor& x) { return activation(Activation::exp, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }

// --- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over one axis, which is removed from the shape.
Tensor mean_axis(const Tensor& x, std::size_t axis);

// --- normalization ----------------------------------------------------------

/// Softmax over the last axis. -inf entries map to exactly 0; a slice that is
/// entirely -inf throws ArgumentError.
Tensor softmax_lastdim(const Tensor& x);
/// softmax(x + mask) with mask[m, n] (entries 0 or -inf) broadcast over the
/// leading axes of x[..., m, n].
Tensor masked_softmax_lastdim(const Tensor& x, const Tensor& mask);
/// Normalizes last-axis slices to zero mean, unit (population) variance,
/// then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// --- convolution ------------------------------------------------------------

/// Causal 1-D convolution over axis -2 of x[..., T, c_in] with kernel
/// [s, c_in / groups, c_out]. Left zero padding of s - 1 steps keeps length T:
///   y[t, o] = sum_j sum_i kernel[j, i, o] * x[t - (s - 1) + j, group(o) * c_in/groups + i]
Tensor conv1d_causal(const Tensor& x, const Tensor& kernel, std::size_t groups);

// --- similarity -------------------------------------------------------------

/// cos(x_i, y_j) = <x_i, y_j> / (|x_i| |y_j| + eps) for rows of x[M, d], y[P, d].
Tensor cosine_similarity(const Tensor& x, const Tensor& y, double eps = 1e-12);

}  // namespace stm3

#pragma once

#include <cstddef>
#include <utility>

#include "stm3/tensor.hpp"

namespace stm3 {

enum class ScanMode { sequential, parallel };

// Raw kernels for the first-order linear recurrence
//   u[t] = a[t] * u[t-1] + b[t],  u[-1] = 0
// over `steps` rows of `lanes` independent lanes (row-major [steps x lanes]).
// `u` may alias `b`.

void linear_recurrence_seq(const double* a, const double* b, double* u, std::size_t steps,
                           std::size_t lanes);

/// Same result through a Blelloch up-sweep/down-sweep over the associative
/// pairs (a, b), composed as (a1, b1) then (a2, b2) = (a2 a1, a2 b1 + b2).
/// The time axis is padded to a power of two with identity pairs (1, 0).
void linear_recurrence_par(const double* a, const double* b, double* u, std::size_t steps,
                           std::size_t lanes);

void linear_recurrence(ScanMode mode, const double* a, const double* b, double* u, std::size_t steps,
                       std::size_t lanes);

// Tensor-level selective state-space operations. Leading axes before T are
// batch axes and must agree between arguments.
//   delta [..., T, c] (> 0), A [c, n], B and C [..., T, n], x [..., T, c]

/// A_bar[..., t, c, k] = exp(delta[t, c] * A[c, k]),  B_bar[..., t, c, k] = delta[t, c] * B[t, k].
/// Throws ContractError when delta has a non-positive entry.
std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A, const Tensor& B);

/// y[t, c] = sum_k C[t, k] * u[t, c, k] with u[t] = A_bar[t] * u[t-1] + B_bar[t] * x[t, c].
Tensor selective_scan(const Tensor& A_bar, const Tensor& B_bar, const Tensor& C, const Tensor& x,
                      ScanMode mode);
inline Tensor selective_scan_seq(const Tensor& A_bar, const Tensor& B_bar, const Tensor& C, const Tensor& x) {
  return selective_scan(A_bar, B_bar, C, x, ScanMode::sequential);
}
inline Tensor selective_scan_par(const Tensor& A_bar, const Tensor& B_bar, const Tensor& C, const Tensor& x) {
  return selective_scan(A_bar, B_bar, C, x, ScanMode::parallel);
}

/// discretize followed by selective_scan without materializing the
/// discretized tensors on the tape.
Tensor selective_ssm(const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                     const Tensor& x, ScanMode mode);

}  // namespace stm3

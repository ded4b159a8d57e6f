#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "stm3/tensor.hpp"

namespace stm3 {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Number of randomly sampled coordinates to check; 0 checks all of them.
  std::size_t sample_coordinates = 0;
  std::uint64_t seed = 0;
  /// When positive, coordinates where both |g_auto| and |g_fd| fall below
  /// this value are not counted towards sample_coordinates; their absolute
  /// disagreement is reported separately instead.
  double resolution_floor = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  // Coordinate with the largest error.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  /// Coordinates below resolution_floor and their largest |g_auto - g_fd|.
  std::size_t unresolved = 0;
  double unresolved_max_abs = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must read the parameters through their shared storage and
/// be deterministic. Relative error per coordinate is
///   |g_auto - g_fd| / max(1e-8, |g_auto| + |g_fd|).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace stm3

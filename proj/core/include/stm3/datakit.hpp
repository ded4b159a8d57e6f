#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stm3/tensor.hpp"

namespace stm3 {

/// values [T_total, N, C]; coords [N, 2] and labels are optional (empty).
struct RawSeries {
  Tensor values;
  Tensor coords = Tensor(Shape{0});
  std::vector<std::size_t> labels;

  std::size_t steps() const { return values.dim(0); }
  std::size_t nodes() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
};

struct SyntheticSpec {
  std::size_t N = 20;
  std::size_t T_total = 2000;
  std::size_t C = 1;
  std::size_t clusters = 2;
  double period_fast = 12.0;
  double period_slow = 96.0;
  std::size_t graph_degree = 4;
  double noise = 0.1;
  /// Per-cluster (fast, slow) amplitudes. Empty interpolates between
  /// (1.0, 0.25) for the first cluster and (0.25, 1.0) for the last.
  std::vector<std::pair<double, double>> mix;

  void validate() const;
};

std::string to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

/// Nodes uniform in the unit square, joined to their graph_degree nearest
/// neighbours; clusters are contiguous bands in x of equal size. Node n in
/// cluster c carries
///   a_c sin(2 pi t / P_fast + phi_n) + b_c sin(2 pi t / P_slow) + e[t, n]
/// where e is white noise smoothed once over the graph
/// (half self, half neighbour mean).
RawSeries gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Header "node{n}_c{c}" in node-major order, one row per time step.
RawSeries load_csv(const std::filesystem::path& path);
void save_csv(const std::filesystem::path& path, const RawSeries& raw);

/// Dispatch on extension: ".csv" or ".bin" (tensor container). Cluster labels
/// travel in a sidecar "<stem>.labels.csv" when present.
RawSeries load_series(const std::filesystem::path& path);
void save_series(const std::filesystem::path& path, const RawSeries& raw);

enum class Split { train, val, test };

struct Window {
  Tensor X;  // [T, N, C]
  Tensor Y;  // [tau, N, C]
};

/// Stride-1 windows over a z-scored series. Window i reads steps
/// [i, i + T) as history and [i + T, i + T + tau) as target.
class WindowedDataset {
 public:
  WindowedDataset(Tensor normalized, std::size_t T, std::size_t tau, std::vector<double> mean,
                  std::vector<double> stddev, std::vector<std::size_t> labels);

  std::size_t T() const { return T_; }
  std::size_t tau() const { return tau_; }
  std::size_t nodes() const { return series_.dim(1); }
  std::size_t channels() const { return series_.dim(2); }
  std::size_t window_count() const { return series_.dim(0) - T_ - tau_ + 1; }

  /// Half-open range of window start indices for a split.
  std::pair<std::size_t, std::size_t> range(Split split) const;
  std::size_t size(Split split) const;

  Window window(std::size_t start) const;
  /// i-th window of a split.
  Window window(Split split, std::size_t i) const { return window(range(split).first + i); }

  const Tensor& normalized() const { return series_; }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }
  const std::vector<std::size_t>& labels() const { return labels_; }

  /// x[..., C] * std + mean per channel.
  Tensor denormalize(const Tensor& x) const;
  Tensor normalize(const Tensor& x) const;

 private:
  Tensor series_;
  std::size_t T_;
  std::size_t tau_;
  std::size_t n_train_ = 0;
  std::size_t n_val_ = 0;
  std::vector<double> mean_;
  std::vector<double> std_;
  std::vector<std::size_t> labels_;
};

/// Window starts split 60/20/20 in temporal order (floor for train and
/// validation, remainder to test); per-channel z-score statistics come from
/// the time steps read by train-window histories only.
WindowedDataset split_normalize(const RawSeries& raw, std::size_t T, std::size_t tau);

/// Repeats the last history step for every horizon step: X[T, N, C] -> [tau, N, C].
Tensor persistence_forecast(const Tensor& X, std::size_t tau);

}  // namespace stm3

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "stm3/scan.hpp"

using namespace stm3;

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

void BM_LinearRecurrence(benchmark::State& state, ScanMode mode) {
  const std::size_t steps = static_cast<std::size_t>(state.range(0)), lanes = 256;
  std::mt19937_64 rng(1);
  const Tensor a = uniform({steps, lanes}, rng, 0.0, 1.0);
  const Tensor b = uniform({steps, lanes}, rng, -1.0, 1.0);
  std::vector<double> u(steps * lanes);
  for (auto _ : state) {
    linear_recurrence(mode, a.data().data(), b.data().data(), u.data(), steps, lanes);
    benchmark::DoNotOptimize(u.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * steps * lanes));
}

void BM_SelectiveSsm(benchmark::State& state, ScanMode mode) {
  // One model layer's worth: 20 nodes, 12 steps, 96 channels, 16 states.
  const std::size_t N = 20, T = static_cast<std::size_t>(state.range(0)), c = 96, n = 16;
  std::mt19937_64 rng(2);
  const Tensor delta = uniform({N, T, c}, rng, 0.01, 0.5);
  const Tensor A = uniform({c, n}, rng, -2.0, -0.1);
  const Tensor B = uniform({N, T, n}, rng, -1.0, 1.0);
  const Tensor C = uniform({N, T, n}, rng, -1.0, 1.0);
  const Tensor x = uniform({N, T, c}, rng, -1.0, 1.0);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(selective_ssm(delta, A, B, C, x, mode));
}

}  // namespace

BENCHMARK_CAPTURE(BM_LinearRecurrence, seq, ScanMode::sequential)->RangeMultiplier(4)->Range(16, 1024);
BENCHMARK_CAPTURE(BM_LinearRecurrence, par, ScanMode::parallel)->RangeMultiplier(4)->Range(16, 1024);
BENCHMARK_CAPTURE(BM_SelectiveSsm, seq, ScanMode::sequential)->Arg(12)->Arg(96);
BENCHMARK_CAPTURE(BM_SelectiveSsm, par, ScanMode::parallel)->Arg(12)->Arg(96);

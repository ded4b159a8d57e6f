#include <benchmark/benchmark.h>

#include <random>

#include "stm3/backbone.hpp"
#include "stm3/datakit.hpp"
#include "stm3/ops.hpp"

using namespace stm3;

namespace {

ModelConfig bench_config(std::size_t d_inner, std::size_t d_state) {
  ModelConfig m;
  m.d_inner = d_inner;
  m.d_state = d_state;
  return m;
}

const WindowedDataset& dataset() {
  static const WindowedDataset data = split_normalize(gen_synthetic(SyntheticSpec{}, 0), 12, 12);
  return data;
}

void BM_ForwardEval(benchmark::State& state) {
  const ModelConfig m = bench_config(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  const ModelParams p = init_params(m, 0);
  const Window w = dataset().window(0);
  NoGradScope no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(stm3_forward(w.X, p, m, false).prediction);
}

void BM_TrainStep(benchmark::State& state) {
  // Forward, loss and backward of one window in training mode.
  const ModelConfig m = bench_config(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  const ModelParams p = init_params(m, 0);
  const auto named = named_parameters(p);
  const Window w = dataset().window(0);
  std::mt19937_64 rng(3);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    const WindowLoss l = window_loss(stm3_forward(w.X, p, m, true, &rng), w.Y, m);
    benchmark::DoNotOptimize(tape.backward(l.total));
  }
}

}  // namespace

BENCHMARK(BM_ForwardEval)->Args({0, 0})->Args({16, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Args({0, 0})->Args({16, 8})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

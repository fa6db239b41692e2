#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "qtrain/quant.hpp"
#include "qtrain/rng.hpp"

// Quantization kernel throughput at training-relevant tensor shapes.

namespace {

using namespace qtrain;

std::vector<double> make_values(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.gaussian();
  return x;
}

QuantConfig make_cfg(int bits, Granularity g) {
  QuantConfig cfg;
  cfg.bits = bits;
  cfg.granularity = g;
  return cfg;
}

void bm_quantize(benchmark::State& state, Granularity g) {
  int64_t rows = state.range(0);
  int64_t cols = state.range(1);
  std::vector<double> x = make_values(rows * cols, 7);
  QuantConfig cfg = make_cfg(static_cast<int>(state.range(2)), g);
  Shape shape{rows, cols};
  for (auto _ : state) {
    QuantizedTensor q = quantize(x, shape, cfg);
    benchmark::DoNotOptimize(q.ints.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * cols);
}

void bm_fake_quantize(benchmark::State& state, Granularity g) {
  int64_t rows = state.range(0);
  int64_t cols = state.range(1);
  std::vector<double> x = make_values(rows * cols, 11);
  QuantConfig cfg = make_cfg(static_cast<int>(state.range(2)), g);
  Shape shape{rows, cols};
  for (auto _ : state) {
    std::vector<double> y = fake_quantize_span(x, shape, cfg);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * cols);
}

void bm_dequantize(benchmark::State& state) {
  int64_t rows = state.range(0);
  int64_t cols = state.range(1);
  std::vector<double> x = make_values(rows * cols, 13);
  QuantizedTensor q =
      quantize(x, {rows, cols}, make_cfg(static_cast<int>(state.range(2)),
                                         Granularity::PerTensor));
  for (auto _ : state) {
    std::vector<double> y = dequantize(q);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * cols);
}

void shapes(benchmark::internal::Benchmark* b) {
  // weight matrix, activation matrix, embedding-sized slab; 4 and 8 bits
  for (int bits : {4, 8}) {
    b->Args({768, 768, bits});
    b->Args({1024, 768, bits});
    b->Args({50257, 768, bits});
  }
}

BENCHMARK_CAPTURE(bm_quantize, per_tensor, Granularity::PerTensor)
    ->Apply(shapes);
BENCHMARK_CAPTURE(bm_quantize, per_channel, Granularity::PerChannel)
    ->Apply(shapes);
BENCHMARK_CAPTURE(bm_quantize, per_token, Granularity::PerToken)->Apply(shapes);
BENCHMARK_CAPTURE(bm_fake_quantize, per_tensor, Granularity::PerTensor)
    ->Apply(shapes);
BENCHMARK_CAPTURE(bm_fake_quantize, per_token, Granularity::PerToken)
    ->Apply(shapes);
BENCHMARK(bm_dequantize)->Apply(shapes);

}  // namespace

BENCHMARK_MAIN();

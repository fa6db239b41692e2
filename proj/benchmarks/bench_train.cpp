#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "qtrain/data.hpp"
#include "qtrain/model.hpp"
#include "qtrain/optimizer.hpp"
#include "qtrain/quant.hpp"
#include "qtrain/rng.hpp"
#include "qtrain/tensor.hpp"

// End-to-end step cost on the small reference model, with and without
// quantizers in the matmul path.

namespace {

using namespace qtrain;

TokenizedCorpus make_corpus(int64_t approx) {
  TokenizedCorpus corpus;
  corpus.vocab_size = kByteVocabSize;
  Rng rng(99);
  corpus.ids.resize(approx);
  for (uint16_t& t : corpus.ids) {
    t = static_cast<uint16_t>(rng.uniform() * 256.0);
  }
  corpus.train_len = approx - approx / 100;
  corpus.digest = 0;
  return corpus;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 128;
  cfg.n_heads = 4;
  cfg.d_ff = 512;
  cfg.vocab_size = 257;
  cfg.context_length = 128;
  return cfg;
}

QuantConfig qc(int bits, Granularity g) {
  QuantConfig c;
  c.bits = bits;
  c.granularity = g;
  return c;
}

void run_steps(benchmark::State& state, ModelConfig cfg) {
  const int64_t batch = 8;
  const int64_t window = cfg.context_length;
  TokenizedCorpus corpus = make_corpus(1 << 18);
  TransformerModel model(cfg, 1);
  AdamW opt(model.params(), AdamHyper{});
  int64_t step = 0;
  for (auto _ : state) {
    model.zero_grad();
    std::vector<int32_t> windows =
        sample_batch(corpus, 1, ++step, batch, window);
    Tensor loss = model.loss(windows, batch, window);
    backward(loss);
    opt.step(3e-4);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * batch * window);
}

void bm_step_baseline(benchmark::State& state) {
  run_steps(state, small_config());
}

void bm_step_w4(benchmark::State& state) {
  ModelConfig cfg = small_config();
  for (LayerQuantSpec* s : {&cfg.quant.qkv, &cfg.quant.attn_out,
                            &cfg.quant.fc1, &cfg.quant.fc2}) {
    s->weight = qc(4, Granularity::PerChannel);
  }
  run_steps(state, cfg);
}

void bm_step_w8a8(benchmark::State& state) {
  ModelConfig cfg = small_config();
  for (LayerQuantSpec* s : {&cfg.quant.qkv, &cfg.quant.attn_out,
                            &cfg.quant.fc1, &cfg.quant.fc2}) {
    s->weight = qc(8, Granularity::PerChannel);
    s->activation = qc(8, Granularity::PerToken);
  }
  run_steps(state, cfg);
}

void bm_step_g8(benchmark::State& state) {
  ModelConfig cfg = small_config();
  for (LayerQuantSpec* s : {&cfg.quant.qkv, &cfg.quant.attn_out,
                            &cfg.quant.fc1, &cfg.quant.fc2}) {
    s->grad_out = qc(8, Granularity::PerToken);
  }
  run_steps(state, cfg);
}

BENCHMARK(bm_step_baseline)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_step_w4)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_step_w8a8)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_step_g8)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qtrain/data.hpp"
#include "qtrain/model.hpp"
#include "qtrain/optimizer.hpp"
#include "qtrain/quant.hpp"

// Measurement tools: tensor statistics, channel-outlier detection, loss
// geometry probes, and closed-form memory / compute accounting.

namespace qtrain {

// ===== tensor statistics =====

// L2 norm of x - fake_quantize(x).
double quant_error_norm(std::span<const double> x, const Shape& shape,
                        const QuantConfig& cfg);

// Fraction of entries with |g| <= threshold.
double gradient_sparsity(std::span<const double> g, double threshold);

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<int64_t> counts;
  int64_t total = 0;
};
Histogram histogram(std::span<const double> x, int64_t bins);

// ===== channel outliers =====

// Input: one or more captures of an activation matrix, each flattened
// row-major [tokens, channels] (token counts may differ). Per capture, a
// channel is flagged when its max |x| exceeds ratio times the median of the
// per-channel maxima. Persistence counts captures in which each flagged
// channel recurs.
struct ChannelOutlierReport {
  int64_t channels = 0;
  int64_t captures = 0;
  double ratio = 0.0;
  std::vector<double> max_abs;   // per channel, max over all captures
  std::vector<double> mean_abs;  // per channel, mean over all tokens
  std::vector<double> median_per_capture;
  std::vector<std::vector<int64_t>> flagged_per_capture;
  std::vector<int64_t> flagged_union;       // sorted
  std::map<int64_t, int64_t> persistence;   // channel -> captures flagged
};
ChannelOutlierReport channel_outliers(
    const std::vector<std::vector<double>>& captures, int64_t channels,
    double ratio);

// ===== loss geometry =====

struct ParamBlock {
  std::string name;
  double* data = nullptr;
  int64_t size = 0;
};

// Adapter over anything with parameters and per-batch losses. Batches are
// fixed: index i always denotes the same data.
class ParamLossTarget {
 public:
  virtual ~ParamLossTarget() = default;
  virtual std::vector<ParamBlock> blocks() = 0;
  virtual int64_t batches() const = 0;
  virtual double batch_loss(int64_t index) = 0;
  // Loss and flattened gradient (block order) for one batch.
  virtual double batch_loss_and_grad(int64_t index, std::span<double> grad) = 0;
};

// Sharpness under a one-ascent-step probe, averaged over the target's
// batches: for each batch, climb rho along the normalized batch gradient
// and report the loss increase on that same batch. Parameters are restored
// bitwise from a snapshot afterwards.
struct SharpnessResult {
  double rho = 0.0;
  int64_t batches = 0;
  double mean_delta = 0.0;
  std::vector<double> per_batch_delta;
};
SharpnessResult m_sharpness(ParamLossTarget& target, double rho);

// Loss over a 2-D slice w + alpha*d1 + beta*d2 on the target's batch 0.
// Directions are gaussian per block, rescaled so each block's direction
// norm matches the block's parameter norm (zero-norm blocks get a zero
// direction). alpha and beta run over `resolution` evenly spaced points in
// [-extent, extent]; odd resolutions include the exact center, which
// evaluates the unperturbed parameters bit for bit.
struct SurfaceResult {
  double extent = 0.0;
  int64_t resolution = 0;
  uint64_t seed = 0;
  double center_loss = 0.0;  // only meaningful for odd resolutions
  std::vector<double> losses;  // row-major [resolution, resolution]
};
SurfaceResult loss_surface_2d(ParamLossTarget& target, double extent,
                              int64_t resolution, uint64_t seed);

// Target over a model and fixed validation batches.
class ModelLossTarget : public ParamLossTarget {
 public:
  ModelLossTarget(TransformerModel& model, const TokenizedCorpus& corpus,
                  int64_t batch_size, int64_t num_batches, uint64_t seed);
  std::vector<ParamBlock> blocks() override;
  int64_t batches() const override { return num_batches_; }
  double batch_loss(int64_t index) override;
  double batch_loss_and_grad(int64_t index, std::span<double> grad) override;

 private:
  TransformerModel& model_;
  const TokenizedCorpus& corpus_;
  int64_t batch_size_, num_batches_;
  uint64_t seed_;
};

// ===== analytic accounting =====

enum class OptimizerKind { None, AdamW };

// Byte estimate for one training step at the given batch geometry.
// bytes_per_element prices every wide scalar (params, grads, activations,
// raw moments); quantized moment codes are priced at bits/8 plus two wide
// scalars per group. Peaks considered:
//   backward_start: params + optimizer + all activations + logits and the
//                   logits gradient (same size again)
//   backward_end:   params + optimizer + full gradients + one block's
//                   activations
struct MemoryEstimate {
  double params_bytes = 0.0;
  double grads_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double activations_bytes = 0.0;  // everything except logits
  double logits_bytes = 0.0;
  double peak_backward_start = 0.0;
  double peak_backward_end = 0.0;
  double peak_bytes = 0.0;
  std::string peak_scenario;  // "backward_start" or "backward_end"
};
MemoryEstimate memory_estimate(const ModelConfig& cfg, int64_t batch,
                               int64_t seq, double bytes_per_element,
                               OptimizerKind opt = OptimizerKind::AdamW,
                               const MomentQuantConfig& mq = {});

// Fraction of forward multiply-accumulates spent in linear layers (qkv,
// attention output, both MLP projections, lm head) versus attention score
// and context products, per token at sequence length seq.
double linear_flop_fraction(const ModelConfig& cfg, int64_t seq);

}  // namespace qtrain

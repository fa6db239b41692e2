#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "qtrain/model.hpp"
#include "qtrain/quant.hpp"

// AdamW with optionally quantized moment storage.
//
// Update at step t (bias-corrected, eps outside the root):
//   m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
//   theta -= lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) + lr * wd * theta
//
// When moment quantization is configured, moments of rank >= 2 parameters
// are stored as integer codes plus scales and dequantized at the start of
// each step; vectors (biases, layernorm) stay in full precision. Stored v is
// clamped at zero before use. The instability counter tracks two things:
// clamped negative v entries, and entries where the second moment collapsed
// to the zero bin while momentum is still live (update denominator becomes
// bare eps, the mechanism that blows up training).

namespace qtrain {

struct AdamHyper {
  double lr = 6e-4;  // peak; the schedule passes the per-step value
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  void validate() const;
};

struct MomentQuantConfig {
  std::optional<QuantConfig> first;   // m
  std::optional<QuantConfig> second;  // v
  bool any() const { return first.has_value() || second.has_value(); }
  void validate() const;  // per-tensor or per-channel only
};

// One moment buffer: raw values, or integer codes when quantized.
struct MomentSlot {
  std::vector<double> raw;
  std::optional<QuantizedTensor> q;
  bool quantized() const { return q.has_value(); }
};

struct ParamSlot {
  MomentSlot m, v;
};

class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamHyper hyper,
        MomentQuantConfig moment_quant = {});

  // One update using the gradients currently on the parameters. `lr` is the
  // scheduled rate for this step.
  void step(double lr);

  int64_t steps_taken() const { return t_; }
  const AdamHyper& hyper() const { return hyper_; }
  const MomentQuantConfig& moment_quant() const { return mq_; }
  const std::vector<NamedParam>& params() const { return params_; }

  // Instability events (clamped negative v plus zero-bin collapses) in the
  // most recent step and in total.
  int64_t instability_events_last_step() const { return events_last_; }
  int64_t instability_events_total() const { return events_total_; }

  // Fraction of stored quantized moment entries sitting in the zero bin,
  // over both moments of all quantized slots. 0 when nothing is quantized.
  double stored_zero_bin_fraction() const;

  // Checkpoint access. Restoring replaces state wholesale; the parameter
  // list must match by name and shape.
  std::vector<ParamSlot>& slots() { return slots_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  std::vector<NamedParam> params_;
  AdamHyper hyper_;
  MomentQuantConfig mq_;
  std::vector<ParamSlot> slots_;
  int64_t t_ = 0;
  int64_t events_last_ = 0, events_total_ = 0;

  bool slot_quantized(const NamedParam& p) const;
};

}  // namespace qtrain

#pragma once

#include <cstdint>
#include <string>

#include "qtrain/model.hpp"
#include "qtrain/optimizer.hpp"

namespace qtrain {

// Learning-rate plan: linear warmup from 0 to the peak (the optimizer lr),
// then half-cosine decay to min_lr at total_steps.
struct ScheduleConfig {
  int64_t total_steps = 2000;
  int64_t warmup_steps = -1;  // negative: 2% of total_steps, at least 1
  double min_lr = -1.0;       // negative: peak / 60

  int64_t warmup_resolved() const;
  double min_lr_resolved(double peak_lr) const;
  void validate() const;
};

struct TrainRunConfig {
  ModelConfig model;
  AdamHyper adam;  // adam.lr is the schedule peak
  MomentQuantConfig moment_quant;
  ScheduleConfig schedule;

  int64_t global_batch = 8;
  int64_t micro_batch = 8;  // must divide global_batch
  double grad_clip = 1.0;   // global L2 clip threshold; <= 0 disables
  uint64_t seed = 1;

  int64_t eval_interval = 100;  // validation loss cadence, 0 disables
  int64_t eval_batches = 8;
  int64_t checkpoint_interval = 0;  // 0: only the final checkpoint

  std::string corpus_path;
  std::string out_dir;

  void validate() const;
};

// Strict parse: every object is checked against its known keys, and an
// unknown key raises ConfigError naming the offending path. Bad JSON raises
// ConfigError; a missing file raises DataError.
TrainRunConfig parse_run_config_text(const std::string& json_text);
TrainRunConfig load_run_config(const std::string& path);

// Canonical JSON dump with every default materialized (resolved warmup,
// min_lr, d_ff). Feeding the dump back through the parser reproduces the
// config; the digest of the dump identifies the run configuration.
std::string dump_run_config(const TrainRunConfig& cfg);
uint64_t run_config_digest(const TrainRunConfig& cfg);

// Builds a quantizer config from the textual grammar used in config files:
// granularity is "tensor" | "channel:<axis>" | "token".
QuantConfig quant_config_from_strings(int bits, const std::string& granularity,
                                      const std::string& mode);

}  // namespace qtrain

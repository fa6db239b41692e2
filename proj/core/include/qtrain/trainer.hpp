#pragma once

#include <string>

#include "qtrain/config.hpp"

// Deterministic training driver. Given a config (and optionally a checkpoint
// to resume from) it produces, under cfg.out_dir:
//   manifest.json    resolved config, corpus/config digests, artifact names
//   metrics.jsonl    schema header line, then one record per step
//   ckpt_step<N>.qckpt / ckpt_final.qckpt
//   divergence.json  only when the run aborted on non-finite loss/gradients
//
// Identical config + corpus + seed gives a bitwise-identical metrics file,
// and resuming from a checkpoint continues the exact uninterrupted
// trajectory: batches are counter-hashed from (seed, step, slot), parameters
// and optimizer state round-trip exactly, and the schedule is a pure
// function of the step.

namespace qtrain {

// Learning rate for 1-based step s: linear ramp 0 -> peak over the warmup,
// then half-cosine from peak to min_lr at total_steps.
double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps,
             double peak_lr, double min_lr);

struct TrainResult {
  bool diverged = false;
  int64_t steps_completed = 0;
  double first_val_loss = 0.0;  // step-0 validation loss (NaN if eval off)
  double final_val_loss = 0.0;  // last validation loss (NaN if eval off)
  double final_train_loss = 0.0;
  int64_t instability_events = 0;  // optimizer clamp/collapse total
  std::string metrics_path;
  std::string manifest_path;
  std::string final_checkpoint_path;
  std::string divergence_report_path;  // empty unless diverged
};

TrainResult train_run(const TrainRunConfig& cfg,
                      const std::string& resume_from = "");

}  // namespace qtrain

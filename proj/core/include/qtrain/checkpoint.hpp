#pragma once

#include <memory>
#include <string>

#include "qtrain/model.hpp"
#include "qtrain/optimizer.hpp"

// Checkpoints carry a JSON manifest (step, config digests, model config,
// tensor directory) followed by one raw little-endian blob holding f64
// parameter data and, when present, quantized moment codes. Parameters and
// optimizer state round-trip bit for bit; the blob is fingerprinted so
// corruption and truncation surface as DataError on load.

namespace qtrain {

struct CheckpointMeta {
  int64_t step = 0;
  uint64_t config_digest = 0;
  uint64_t corpus_digest = 0;
};

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const AdamW* optimizer, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  ModelConfig config;
  std::unique_ptr<TransformerModel> model;
  std::unique_ptr<AdamW> optimizer;  // null when none was saved
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace qtrain

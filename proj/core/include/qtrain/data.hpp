#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Byte-level corpus handling. Documents are concatenated with a separator
// token (id 256) between them, so the vocabulary is 257 ids. The token
// stream splits into a training prefix and a validation tail; batches are
// windows drawn by a counter-based hash of (seed, step, slot), which makes
// batch composition a pure function independent of sampling history.

namespace qtrain {

constexpr int32_t kDocSeparatorId = 256;
constexpr int64_t kByteVocabSize = 257;

struct TokenizedCorpus {
  std::vector<uint16_t> ids;
  int64_t vocab_size = kByteVocabSize;
  int64_t train_len = 0;  // ids[0,train_len) train, the rest validation
  uint64_t digest = 0;    // FNV-1a over the id stream, little-endian u16

  int64_t total_len() const { return static_cast<int64_t>(ids.size()); }
  int64_t val_len() const { return total_len() - train_len; }
};

uint64_t corpus_digest(const std::vector<uint16_t>& ids);

// Tokenize in-memory documents. val_fraction of the total stream (rounded)
// becomes the validation tail. Empty corpus or bad fraction throws.
TokenizedCorpus build_corpus(const std::vector<std::string>& documents,
                             double val_fraction);
// Same, reading each path as one binary document. Unreadable path throws
// DataError.
TokenizedCorpus build_corpus_from_files(const std::vector<std::string>& paths,
                                        double val_fraction);

// Binary cache with a self-describing header; round-trips exactly.
void save_corpus(const TokenizedCorpus& corpus, const std::string& path);
TokenizedCorpus load_corpus(const std::string& path);

// `batch` windows of `window+1` tokens as row-major int32 [batch, window+1].
// Training windows live entirely inside the training prefix; validation
// windows (validation=true) live entirely inside the tail and use a separate
// hash domain, so a validation batch for a given (seed, step, slot) never
// changes as training progresses. Throws DataError when the region is
// shorter than a window.
std::vector<int32_t> sample_batch(const TokenizedCorpus& corpus, uint64_t seed,
                                  int64_t step, int64_t batch, int64_t window,
                                  bool validation = false);

}  // namespace qtrain

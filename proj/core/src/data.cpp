#include "qtrain/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "qtrain/errors.hpp"
#include "qtrain/rng.hpp"

namespace qtrain {

namespace {

constexpr char kMagic[8] = {'Q', 'T', 'C', 'O', 'R', 'P', 'U', 'S'};
constexpr uint32_t kCacheVersion = 1;

// Hash domains keep train and validation window draws independent.
constexpr uint64_t kTrainTag = 0x745241494eull;  // "tRAIN"
constexpr uint64_t kValTag = 0x56414c0full;

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

uint64_t corpus_digest(const std::vector<uint16_t>& ids) {
  Fnv1a64 h;
  for (uint16_t id : ids) {
    unsigned char le[2] = {static_cast<unsigned char>(id & 0xff),
                           static_cast<unsigned char>(id >> 8)};
    h.update(le, 2);
  }
  return h.digest();
}

TokenizedCorpus build_corpus(const std::vector<std::string>& documents,
                             double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("validation fraction must be in [0,1)");
  }
  TokenizedCorpus c;
  for (size_t d = 0; d < documents.size(); ++d) {
    if (d > 0) c.ids.push_back(static_cast<uint16_t>(kDocSeparatorId));
    for (unsigned char byte : documents[d]) c.ids.push_back(byte);
  }
  if (c.ids.empty()) throw DataError("corpus is empty");
  int64_t total = c.total_len();
  int64_t val = static_cast<int64_t>(std::llround(val_fraction * total));
  c.train_len = total - val;
  c.digest = corpus_digest(c.ids);
  return c;
}

TokenizedCorpus build_corpus_from_files(const std::vector<std::string>& paths,
                                        double val_fraction) {
  std::vector<std::string> docs;
  for (const std::string& p : paths) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw DataError("cannot open corpus file " + p);
    std::string content((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
    docs.push_back(std::move(content));
  }
  return build_corpus(docs, val_fraction);
}

void save_corpus(const TokenizedCorpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write corpus cache " + path);
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kCacheVersion);
  write_pod(os, static_cast<uint32_t>(corpus.vocab_size));
  write_pod(os, static_cast<uint64_t>(corpus.total_len()));
  write_pod(os, static_cast<uint64_t>(corpus.train_len));
  write_pod(os, corpus.digest);
  os.write(reinterpret_cast<const char*>(corpus.ids.data()),
           static_cast<std::streamsize>(corpus.ids.size() * sizeof(uint16_t)));
  if (!os) throw DataError("short write to corpus cache " + path);
}

TokenizedCorpus load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open corpus cache " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path + " is not a corpus cache");
  }
  uint32_t version = 0, vocab = 0;
  uint64_t total = 0, train_len = 0, digest = 0;
  read_pod(is, version);
  read_pod(is, vocab);
  read_pod(is, total);
  read_pod(is, train_len);
  read_pod(is, digest);
  if (!is || version != kCacheVersion) {
    throw DataError("unsupported corpus cache version in " + path);
  }
  if (train_len > total || total == 0) {
    throw DataError("corrupt corpus cache header in " + path);
  }
  TokenizedCorpus c;
  c.vocab_size = vocab;
  c.train_len = static_cast<int64_t>(train_len);
  c.ids.resize(total);
  is.read(reinterpret_cast<char*>(c.ids.data()),
          static_cast<std::streamsize>(total * sizeof(uint16_t)));
  if (!is || is.gcount() !=
                 static_cast<std::streamsize>(total * sizeof(uint16_t))) {
    throw DataError("corpus cache " + path + " is truncated");
  }
  c.digest = digest;
  if (corpus_digest(c.ids) != digest) {
    throw DataError("corpus cache " + path + " fails its digest check");
  }
  return c;
}

std::vector<int32_t> sample_batch(const TokenizedCorpus& corpus, uint64_t seed,
                                  int64_t step, int64_t batch, int64_t window,
                                  bool validation) {
  if (batch < 1 || window < 1) throw ConfigError("batch and window must be >= 1");
  int64_t len = window + 1;
  int64_t region_begin = validation ? corpus.train_len : 0;
  int64_t region_len = validation ? corpus.val_len() : corpus.train_len;
  if (region_len < len) {
    throw DataError(std::string(validation ? "validation" : "training") +
                    " region has " + std::to_string(region_len) +
                    " tokens, need " + std::to_string(len));
  }
  int64_t positions = region_len - len + 1;
  uint64_t tag = validation ? kValTag : kTrainTag;
  std::vector<int32_t> out(batch * len);
  for (int64_t slot = 0; slot < batch; ++slot) {
    uint64_t h = counter_hash(seed ^ tag, static_cast<uint64_t>(step),
                              static_cast<uint64_t>(slot));
    int64_t start = region_begin +
                    static_cast<int64_t>(h % static_cast<uint64_t>(positions));
    for (int64_t j = 0; j < len; ++j) {
      out[slot * len + j] = static_cast<int32_t>(corpus.ids[start + j]);
    }
  }
  return out;
}

}  // namespace qtrain

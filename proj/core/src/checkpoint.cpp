#include "qtrain/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "config_json.hpp"
#include "qtrain/rng.hpp"

namespace qtrain {

using detail::json;

namespace {

constexpr char kMagic[8] = {'Q', 'T', 'R', 'N', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

uint64_t parse_hex64(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw DataError("checkpoint manifest is missing " + std::string(key));
  }
  return std::stoull(j[key].get<std::string>(), nullptr, 16);
}

class BlobWriter {
 public:
  uint64_t append(const void* data, size_t bytes) {
    uint64_t off = blob_.size();
    const char* p = static_cast<const char*>(data);
    blob_.insert(blob_.end(), p, p + bytes);
    return off;
  }
  const std::vector<char>& bytes() const { return blob_; }

 private:
  std::vector<char> blob_;
};

class BlobReader {
 public:
  explicit BlobReader(std::vector<char> blob) : blob_(std::move(blob)) {}
  void read(void* dst, uint64_t offset, size_t bytes) const {
    if (offset + bytes > blob_.size()) {
      throw DataError("checkpoint blob reference out of range");
    }
    std::memcpy(dst, blob_.data() + offset, bytes);
  }
  const std::vector<char>& bytes() const { return blob_; }

 private:
  std::vector<char> blob_;
};

json write_moment(BlobWriter& blob, const MomentSlot& slot) {
  if (slot.quantized()) {
    const QuantizedTensor& q = *slot.q;
    json j;
    j["kind"] = "quantized";
    j["config"] = detail::quant_config_to_json(q.config);
    j["shape"] = q.shape;
    j["count"] = q.ints.size();
    j["groups"] = q.scales.size();
    j["ints_offset"] = blob.append(q.ints.data(), q.ints.size() * sizeof(int32_t));
    j["scales_offset"] =
        blob.append(q.scales.data(), q.scales.size() * sizeof(double));
    j["zero_points_offset"] = blob.append(
        q.zero_points.data(), q.zero_points.size() * sizeof(int32_t));
    return j;
  }
  json j;
  j["kind"] = "raw";
  j["count"] = slot.raw.size();
  j["offset"] = blob.append(slot.raw.data(), slot.raw.size() * sizeof(double));
  return j;
}

MomentSlot read_moment(const BlobReader& blob, const json& j,
                       const std::string& what) {
  MomentSlot slot;
  std::string kind = j.value("kind", "");
  if (kind == "raw") {
    size_t count = j.value("count", size_t{0});
    slot.raw.resize(count);
    blob.read(slot.raw.data(), j.value("offset", uint64_t{0}),
              count * sizeof(double));
    return slot;
  }
  if (kind != "quantized") {
    throw DataError("checkpoint moment " + what + " has unknown kind");
  }
  QuantizedTensor q;
  q.config = detail::quant_config_from_json(j.at("config"), what + ".config");
  q.shape = j.at("shape").get<Shape>();
  size_t count = j.value("count", size_t{0});
  size_t groups = j.value("groups", size_t{0});
  q.ints.resize(count);
  q.scales.resize(groups);
  q.zero_points.resize(groups);
  blob.read(q.ints.data(), j.value("ints_offset", uint64_t{0}),
            count * sizeof(int32_t));
  blob.read(q.scales.data(), j.value("scales_offset", uint64_t{0}),
            groups * sizeof(double));
  blob.read(q.zero_points.data(), j.value("zero_points_offset", uint64_t{0}),
            groups * sizeof(int32_t));
  slot.q = std::move(q);
  return slot;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const AdamW* optimizer, const CheckpointMeta& meta) {
  BlobWriter blob;
  json manifest;
  manifest["step"] = meta.step;
  manifest["config_digest"] = hex64(meta.config_digest);
  manifest["corpus_digest"] = hex64(meta.corpus_digest);
  manifest["model"] = detail::model_config_to_json(model.config());

  json tensors = json::array();
  for (const NamedParam& p : model.params()) {
    const std::vector<double>& v = p.tensor.data();
    json t;
    t["name"] = p.name;
    t["shape"] = p.tensor.shape();
    t["count"] = v.size();
    t["offset"] = blob.append(v.data(), v.size() * sizeof(double));
    tensors.push_back(std::move(t));
  }
  manifest["tensors"] = std::move(tensors);

  if (optimizer) {
    json opt;
    opt["t"] = optimizer->steps_taken();
    opt["hyper"] = detail::adam_hyper_to_json(optimizer->hyper());
    opt["moment_quant"] = detail::moment_quant_to_json(optimizer->moment_quant());
    json slots = json::array();
    const std::vector<NamedParam>& params = optimizer->params();
    for (size_t i = 0; i < params.size(); ++i) {
      json s;
      s["name"] = params[i].name;
      s["m"] = write_moment(blob, optimizer->slots()[i].m);
      s["v"] = write_moment(blob, optimizer->slots()[i].v);
      slots.push_back(std::move(s));
    }
    opt["slots"] = std::move(slots);
    manifest["optimizer"] = std::move(opt);
  } else {
    manifest["optimizer"] = nullptr;
  }

  {
    Fnv1a64 h;
    h.update(blob.bytes().data(), blob.bytes().size());
    manifest["blob_digest"] = hex64(h.digest());
  }

  std::string mtext = manifest.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path);
  os.write(kMagic, sizeof(kMagic));
  uint32_t version = kVersion;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t mlen = mtext.size();
  os.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  os.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  uint64_t blen = blob.bytes().size();
  os.write(reinterpret_cast<const char*>(&blen), sizeof(blen));
  os.write(blob.bytes().data(), static_cast<std::streamsize>(blen));
  if (!os) throw DataError("short write to checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path + " is not a checkpoint");
  }
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!is || version != kVersion) {
    throw DataError("unsupported checkpoint version in " + path);
  }
  uint64_t mlen = 0;
  is.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  is.read(mtext.data(), static_cast<std::streamsize>(mlen));
  uint64_t blen = 0;
  is.read(reinterpret_cast<char*>(&blen), sizeof(blen));
  std::vector<char> blob_bytes(blen);
  is.read(blob_bytes.data(), static_cast<std::streamsize>(blen));
  if (!is || is.gcount() != static_cast<std::streamsize>(blen)) {
    throw DataError("checkpoint " + path + " is truncated");
  }

  json manifest = json::parse(mtext, nullptr, /*allow_exceptions=*/false);
  if (manifest.is_discarded()) {
    throw DataError("checkpoint " + path + " has a corrupt manifest");
  }
  {
    Fnv1a64 h;
    h.update(blob_bytes.data(), blob_bytes.size());
    if (h.digest() != parse_hex64(manifest, "blob_digest")) {
      throw DataError("checkpoint " + path + " fails its digest check");
    }
  }

  LoadedCheckpoint out;
  try {
  out.meta.step = manifest.value("step", int64_t{0});
  out.meta.config_digest = parse_hex64(manifest, "config_digest");
  out.meta.corpus_digest = parse_hex64(manifest, "corpus_digest");
  out.config = detail::model_config_from_json(manifest.at("model"), "model");
  out.model = std::make_unique<TransformerModel>(out.config, /*init_seed=*/0);

  const json& tensors = manifest.at("tensors");
  BlobReader blob(std::move(blob_bytes));
  std::vector<NamedParam>& params = out.model->params();
  if (tensors.size() != params.size()) {
    throw DataError("checkpoint tensor directory does not match the model");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const json& t = tensors[i];
    if (t.value("name", "") != params[i].name ||
        t.at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw DataError("checkpoint tensor " + t.value("name", "?") +
                      " does not match parameter " + params[i].name);
    }
    std::vector<double>& dst = params[i].tensor.data();
    blob.read(dst.data(), t.value("offset", uint64_t{0}),
              dst.size() * sizeof(double));
  }

  const json& opt = manifest.at("optimizer");
  if (!opt.is_null()) {
    AdamHyper hyper = detail::adam_hyper_from_json(opt.at("hyper"), "optimizer.hyper");
    MomentQuantConfig mq = detail::moment_quant_from_json(
        opt.at("moment_quant"), "optimizer.moment_quant");
    out.optimizer = std::make_unique<AdamW>(params, hyper, mq);
    out.optimizer->set_steps_taken(opt.value("t", int64_t{0}));
    const json& slots = opt.at("slots");
    if (slots.size() != params.size()) {
      throw DataError("checkpoint optimizer slots do not match the model");
    }
    for (size_t i = 0; i < params.size(); ++i) {
      const json& s = slots[i];
      if (s.value("name", "") != params[i].name) {
        throw DataError("checkpoint optimizer slot order mismatch");
      }
      out.optimizer->slots()[i].m = read_moment(blob, s.at("m"), params[i].name + ".m");
      out.optimizer->slots()[i].v = read_moment(blob, s.at("v"), params[i].name + ".v");
    }
  }
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + " has a malformed manifest: " +
                    e.what());
  }
  return out;
}

}  // namespace qtrain

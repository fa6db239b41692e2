#include "qtrain/config.hpp"

#include <algorithm>
#include <fstream>

#include "config_json.hpp"
#include "qtrain/rng.hpp"

namespace qtrain {

using detail::json;

int64_t ScheduleConfig::warmup_resolved() const {
  if (warmup_steps >= 0) return warmup_steps;
  return std::max<int64_t>(1, total_steps / 50);
}

double ScheduleConfig::min_lr_resolved(double peak_lr) const {
  return min_lr >= 0.0 ? min_lr : peak_lr / 60.0;
}

void ScheduleConfig::validate() const {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (warmup_resolved() > total_steps) {
    throw ConfigError("warmup_steps exceeds total_steps");
  }
}

void TrainRunConfig::validate() const {
  model.validate();
  adam.validate();
  moment_quant.validate();
  schedule.validate();
  if (global_batch < 1 || micro_batch < 1) {
    throw ConfigError("batch sizes must be >= 1");
  }
  if (global_batch % micro_batch != 0) {
    throw ConfigError("micro_batch " + std::to_string(micro_batch) +
                      " does not divide global_batch " +
                      std::to_string(global_batch));
  }
  if (eval_interval < 0 || eval_batches < 1 || checkpoint_interval < 0) {
    throw ConfigError("eval/checkpoint settings must be non-negative");
  }
  if (schedule.min_lr_resolved(adam.lr) > adam.lr) {
    throw ConfigError("min_lr exceeds the peak learning rate");
  }
}

namespace detail {

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) {
    throw ConfigError(path + " must be a JSON object");
  }
  for (const auto& item : obj.items()) {
    bool known = std::any_of(allowed.begin(), allowed.end(),
                             [&](const char* k) { return item.key() == k; });
    if (!known) {
      throw ConfigError("unknown key \"" + item.key() + "\" in " + path);
    }
  }
}

json quant_config_to_json(const QuantConfig& cfg) {
  return json{{"bits", cfg.bits},
              {"granularity", granularity_str(cfg)},
              {"mode", mode_str(cfg.mode)}};
}

QuantConfig quant_config_from_json(const json& j, const std::string& path) {
  check_keys(j, path, {"bits", "granularity", "mode"});
  QuantConfig cfg;
  if (!j.contains("bits") || !j["bits"].is_number_integer()) {
    throw ConfigError(path + ".bits must be an integer");
  }
  cfg.bits = j["bits"].get<int>();
  std::string gran = j.value("granularity", "tensor");
  std::string mode = j.value("mode", "symmetric");
  QuantConfig parsed = quant_config_from_strings(cfg.bits, gran, mode);
  parsed.validate();
  return parsed;
}

json layer_spec_to_json(const LayerQuantSpec& spec) {
  json j = json::object();
  if (spec.weight) j["weight"] = quant_config_to_json(*spec.weight);
  if (spec.activation) j["activation"] = quant_config_to_json(*spec.activation);
  if (spec.grad_out) j["grad_out"] = quant_config_to_json(*spec.grad_out);
  if (spec.quantize_dx_path) j["quantize_dx_path"] = true;
  return j;
}

LayerQuantSpec layer_spec_from_json(const json& j, const std::string& path) {
  check_keys(j, path, {"weight", "activation", "grad_out", "quantize_dx_path"});
  LayerQuantSpec spec;
  if (j.contains("weight"))
    spec.weight = quant_config_from_json(j["weight"], path + ".weight");
  if (j.contains("activation"))
    spec.activation = quant_config_from_json(j["activation"], path + ".activation");
  if (j.contains("grad_out"))
    spec.grad_out = quant_config_from_json(j["grad_out"], path + ".grad_out");
  if (j.contains("quantize_dx_path")) {
    if (!j["quantize_dx_path"].is_boolean()) {
      throw ConfigError(path + ".quantize_dx_path must be a boolean");
    }
    spec.quantize_dx_path = j["quantize_dx_path"].get<bool>();
  }
  spec.validate();
  return spec;
}

namespace {

int64_t get_int(const json& j, const std::string& path, const char* key,
                int64_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer()) {
    throw ConfigError(path + "." + key + " must be an integer");
  }
  return j[key].get<int64_t>();
}

double get_num(const json& j, const std::string& path, const char* key,
               double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) {
    throw ConfigError(path + "." + key + " must be a number");
  }
  return j[key].get<double>();
}

bool get_bool(const json& j, const std::string& path, const char* key,
              bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_boolean()) {
    throw ConfigError(path + "." + key + " must be a boolean");
  }
  return j[key].get<bool>();
}

std::string get_str(const json& j, const std::string& path, const char* key,
                    const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_string()) {
    throw ConfigError(path + "." + key + " must be a string");
  }
  return j[key].get<std::string>();
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
  json quant = json::object();
  auto put = [&](const char* name, const LayerQuantSpec& spec) {
    if (spec.any() || spec.quantize_dx_path) quant[name] = layer_spec_to_json(spec);
  };
  put("qkv", cfg.quant.qkv);
  put("attn_out", cfg.quant.attn_out);
  put("fc1", cfg.quant.fc1);
  put("fc2", cfg.quant.fc2);
  put("lm_head", cfg.quant.lm_head);
  return json{{"n_layers", cfg.n_layers},
              {"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff_resolved()},
              {"vocab_size", cfg.vocab_size},
              {"context_length", cfg.context_length},
              {"tie_lm_head", cfg.tie_lm_head},
              {"quant", quant}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  check_keys(j, path,
             {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
              "context_length", "tie_lm_head", "quant"});
  ModelConfig cfg;
  cfg.n_layers = get_int(j, path, "n_layers", cfg.n_layers);
  cfg.d_model = get_int(j, path, "d_model", cfg.d_model);
  cfg.n_heads = get_int(j, path, "n_heads", cfg.n_heads);
  cfg.d_ff = get_int(j, path, "d_ff", cfg.d_ff);
  cfg.vocab_size = get_int(j, path, "vocab_size", cfg.vocab_size);
  cfg.context_length = get_int(j, path, "context_length", cfg.context_length);
  cfg.tie_lm_head = get_bool(j, path, "tie_lm_head", cfg.tie_lm_head);
  if (j.contains("quant")) {
    const json& q = j["quant"];
    std::string qp = path + ".quant";
    check_keys(q, qp, {"all", "qkv", "attn_out", "fc1", "fc2", "lm_head"});
    // "all" seeds the four block families; a family key replaces it
    // entirely. The head must be opted in explicitly.
    if (q.contains("all")) {
      LayerQuantSpec all = layer_spec_from_json(q["all"], qp + ".all");
      cfg.quant.qkv = all;
      cfg.quant.attn_out = all;
      cfg.quant.fc1 = all;
      cfg.quant.fc2 = all;
    }
    if (q.contains("qkv"))
      cfg.quant.qkv = layer_spec_from_json(q["qkv"], qp + ".qkv");
    if (q.contains("attn_out"))
      cfg.quant.attn_out = layer_spec_from_json(q["attn_out"], qp + ".attn_out");
    if (q.contains("fc1"))
      cfg.quant.fc1 = layer_spec_from_json(q["fc1"], qp + ".fc1");
    if (q.contains("fc2"))
      cfg.quant.fc2 = layer_spec_from_json(q["fc2"], qp + ".fc2");
    if (q.contains("lm_head"))
      cfg.quant.lm_head = layer_spec_from_json(q["lm_head"], qp + ".lm_head");
  }
  cfg.validate();
  return cfg;
}

json adam_hyper_to_json(const AdamHyper& h) {
  return json{{"lr", h.lr},
              {"beta1", h.beta1},
              {"beta2", h.beta2},
              {"eps", h.eps},
              {"weight_decay", h.weight_decay}};
}

AdamHyper adam_hyper_from_json(const json& j, const std::string& path) {
  AdamHyper h;
  h.lr = get_num(j, path, "lr", h.lr);
  h.beta1 = get_num(j, path, "beta1", h.beta1);
  h.beta2 = get_num(j, path, "beta2", h.beta2);
  h.eps = get_num(j, path, "eps", h.eps);
  h.weight_decay = get_num(j, path, "weight_decay", h.weight_decay);
  h.validate();
  return h;
}

json moment_quant_to_json(const MomentQuantConfig& mq) {
  json j = json::object();
  if (mq.first) j["first"] = quant_config_to_json(*mq.first);
  if (mq.second) j["second"] = quant_config_to_json(*mq.second);
  return j;
}

MomentQuantConfig moment_quant_from_json(const json& j, const std::string& path) {
  check_keys(j, path, {"first", "second"});
  MomentQuantConfig mq;
  if (j.contains("first"))
    mq.first = quant_config_from_json(j["first"], path + ".first");
  if (j.contains("second"))
    mq.second = quant_config_from_json(j["second"], path + ".second");
  mq.validate();
  return mq;
}

}  // namespace detail

QuantConfig quant_config_from_strings(int bits, const std::string& granularity,
                                      const std::string& mode) {
  QuantConfig cfg;
  cfg.bits = bits;
  if (granularity == "tensor") {
    cfg.granularity = Granularity::PerTensor;
  } else if (granularity == "token") {
    cfg.granularity = Granularity::PerToken;
  } else if (granularity.starts_with("channel:")) {
    cfg.granularity = Granularity::PerChannel;
    std::string axis = granularity.substr(8);
    try {
      size_t used = 0;
      cfg.channel_axis = std::stoi(axis, &used);
      if (used != axis.size()) throw std::invalid_argument(axis);
    } catch (const std::exception&) {
      throw ConfigError("bad channel axis in granularity \"" + granularity +
                        "\"");
    }
  } else {
    throw ConfigError("granularity must be tensor, channel:<axis>, or token; "
                      "got \"" +
                      granularity + "\"");
  }
  if (mode == "symmetric") {
    cfg.mode = QuantMode::Symmetric;
  } else if (mode == "asymmetric") {
    cfg.mode = QuantMode::Asymmetric;
  } else {
    throw ConfigError("mode must be symmetric or asymmetric, got \"" + mode +
                      "\"");
  }
  cfg.validate();
  return cfg;
}

TrainRunConfig parse_run_config_text(const std::string& text) {
  json root = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (root.is_discarded()) throw ConfigError("run config is not valid JSON");
  detail::check_keys(root, "config",
                     {"model", "optimizer", "schedule", "data", "run"});
  TrainRunConfig cfg;
  if (root.contains("model")) {
    cfg.model = detail::model_config_from_json(root["model"], "model");
  }
  if (root.contains("optimizer")) {
    const json& o = root["optimizer"];
    detail::check_keys(o, "optimizer",
                       {"lr", "beta1", "beta2", "eps", "weight_decay",
                        "moment_quant"});
    cfg.adam = detail::adam_hyper_from_json(o, "optimizer");
    if (o.contains("moment_quant")) {
      cfg.moment_quant =
          detail::moment_quant_from_json(o["moment_quant"], "optimizer.moment_quant");
    }
  }
  if (root.contains("schedule")) {
    const json& s = root["schedule"];
    detail::check_keys(s, "schedule", {"total_steps", "warmup_steps", "min_lr"});
    cfg.schedule.total_steps =
        detail::get_int(s, "schedule", "total_steps", cfg.schedule.total_steps);
    cfg.schedule.warmup_steps =
        detail::get_int(s, "schedule", "warmup_steps", cfg.schedule.warmup_steps);
    cfg.schedule.min_lr = detail::get_num(s, "schedule", "min_lr", cfg.schedule.min_lr);
  }
  if (root.contains("data")) {
    const json& d = root["data"];
    detail::check_keys(d, "data",
                       {"corpus", "global_batch", "micro_batch", "seed"});
    cfg.corpus_path = detail::get_str(d, "data", "corpus", cfg.corpus_path);
    cfg.global_batch = detail::get_int(d, "data", "global_batch", cfg.global_batch);
    cfg.micro_batch = detail::get_int(d, "data", "micro_batch", cfg.micro_batch);
    cfg.seed = static_cast<uint64_t>(detail::get_int(d, "data", "seed",
                                                     static_cast<int64_t>(cfg.seed)));
  }
  if (root.contains("run")) {
    const json& r = root["run"];
    detail::check_keys(r, "run",
                       {"out_dir", "eval_interval", "eval_batches",
                        "checkpoint_interval", "grad_clip"});
    cfg.out_dir = detail::get_str(r, "run", "out_dir", cfg.out_dir);
    cfg.eval_interval = detail::get_int(r, "run", "eval_interval", cfg.eval_interval);
    cfg.eval_batches = detail::get_int(r, "run", "eval_batches", cfg.eval_batches);
    cfg.checkpoint_interval =
        detail::get_int(r, "run", "checkpoint_interval", cfg.checkpoint_interval);
    cfg.grad_clip = detail::get_num(r, "run", "grad_clip", cfg.grad_clip);
  }
  cfg.validate();
  return cfg;
}

TrainRunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return parse_run_config_text(text);
}

std::string dump_run_config(const TrainRunConfig& cfg) {
  cfg.validate();
  json root;
  root["model"] = detail::model_config_to_json(cfg.model);
  json opt = detail::adam_hyper_to_json(cfg.adam);
  if (cfg.moment_quant.any()) {
    opt["moment_quant"] = detail::moment_quant_to_json(cfg.moment_quant);
  }
  root["optimizer"] = opt;
  root["schedule"] = json{{"total_steps", cfg.schedule.total_steps},
                          {"warmup_steps", cfg.schedule.warmup_resolved()},
                          {"min_lr", cfg.schedule.min_lr_resolved(cfg.adam.lr)}};
  root["data"] = json{{"corpus", cfg.corpus_path},
                      {"global_batch", cfg.global_batch},
                      {"micro_batch", cfg.micro_batch},
                      {"seed", cfg.seed}};
  root["run"] = json{{"out_dir", cfg.out_dir},
                     {"eval_interval", cfg.eval_interval},
                     {"eval_batches", cfg.eval_batches},
                     {"checkpoint_interval", cfg.checkpoint_interval},
                     {"grad_clip", cfg.grad_clip}};
  return root.dump(2);
}

uint64_t run_config_digest(const TrainRunConfig& cfg) {
  // Where artifacts land and where the corpus file sits do not change the
  // training math, so they stay out of the digest; corpus content is
  // fingerprinted separately. Everything else must match for a resume.
  TrainRunConfig canonical = cfg;
  canonical.out_dir.clear();
  canonical.corpus_path.clear();
  std::string text = dump_run_config(canonical);
  Fnv1a64 h;
  h.update(text.data(), text.size());
  return h.digest();
}

}  // namespace qtrain

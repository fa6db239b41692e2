#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "qtrain/checkpoint.hpp"
#include "qtrain/config.hpp"
#include "qtrain/data.hpp"
#include "qtrain/diagnostics.hpp"
#include "qtrain/errors.hpp"
#include "qtrain/trainer.hpp"

// Batch-mode command line for the quantized-training laboratory.
//   prepare   tokenize raw files into a corpus cache
//   train     run a config end to end (optionally resuming a checkpoint)
//   analyze   outliers | sharpness | surface | histogram | zerobin
//   profile   analytic memory and FLOP accounting, no training required
// Exit codes: 0 success, 1 config/usage error, 2 data or IO error,
// 3 training diverged.

using nlohmann::json;
using namespace qtrain;

namespace {

// ===== shared plumbing =====

// Output paths default into $QTRAIN_OUT_DIR when the flag is omitted.
std::string resolve_out(const std::string& flag, const std::string& name) {
  if (!flag.empty()) return flag;
  if (const char* dir = std::getenv("QTRAIN_OUT_DIR")) {
    return (std::filesystem::path(dir) / name).string();
  }
  return name;
}

void write_report(const std::string& path, const json& j) {
  std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw DataError("short write to " + path);
  std::cout << "wrote " << path << "\n";
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ===== prepare =====

struct PrepareArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
  double val_frac = 0.005;
};

int cmd_prepare(const PrepareArgs& a) {
  TokenizedCorpus corpus = build_corpus_from_files(a.inputs, a.val_frac);
  std::filesystem::path dir = resolve_out(a.out_dir, ".");
  std::filesystem::create_directories(dir);
  std::string path = (dir / "corpus.qtok").string();
  save_corpus(corpus, path);
  std::cout << "tokens: " << corpus.total_len() << " (train "
            << corpus.train_len << ", val " << corpus.val_len() << ")\n"
            << "digest: " << hex64(corpus.digest) << "\n"
            << "wrote " << path << "\n";
  return 0;
}

// ===== train =====

int cmd_train(const std::string& config_path, const std::string& resume) {
  TrainRunConfig cfg = load_run_config(config_path);
  if (cfg.out_dir.empty()) {
    if (const char* dir = std::getenv("QTRAIN_OUT_DIR")) cfg.out_dir = dir;
  }
  TrainResult res = train_run(cfg, resume);
  std::cout << "steps: " << res.steps_completed << "\n"
            << "final train loss: " << res.final_train_loss << "\n"
            << "metrics: " << res.metrics_path << "\n";
  if (res.diverged) {
    std::cout << "run diverged; report: " << res.divergence_report_path
              << "\n";
    return 3;
  }
  std::cout << "checkpoint: " << res.final_checkpoint_path << "\n";
  return 0;
}

// ===== analyze =====

struct AnalyzeArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string family = "fc2";
  int64_t layer = 0;
  int64_t captures = 4;
  int64_t batch = 4;
  int64_t batches = 4;
  double ratio = 6.0;
  double rho = 0.05;
  double extent = 1.0;
  int64_t resolution = 5;
  uint64_t seed = 0;
  std::string param;
  int64_t bins = 32;
  int bits = 8;
  std::string granularity = "tensor";
  std::string mode = "symmetric";
};

// Feeds a few fixed validation batches through the model and collects the
// raw inputs of one linear layer per pass.
int cmd_outliers(const AnalyzeArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.ckpt);
  TokenizedCorpus corpus = load_corpus(a.data);
  QLinear& layer = lc.model->linear(a.family, a.layer);
  std::vector<std::vector<double>> caps;
  layer.on_input = [&caps](std::span<const double> x, const Shape&) {
    caps.emplace_back(x.begin(), x.end());
  };
  int64_t window = lc.config.context_length;
  for (int64_t c = 0; c < a.captures; ++c) {
    std::vector<int32_t> tokens =
        sample_batch(corpus, a.seed, c, a.batch, window, true);
    lc.model->loss(tokens, a.batch, window);
  }
  layer.on_input = nullptr;

  ChannelOutlierReport rep = channel_outliers(caps, layer.in_features(), a.ratio);
  json per_capture = json::array();
  for (const std::vector<int64_t>& f : rep.flagged_per_capture) per_capture.push_back(f);
  json persistence = json::object();
  for (const auto& [ch, n] : rep.persistence) persistence[std::to_string(ch)] = n;
  json j = {{"family", a.family},
            {"layer", a.layer},
            {"channels", rep.channels},
            {"captures", rep.captures},
            {"ratio", rep.ratio},
            {"flagged_union", rep.flagged_union},
            {"persistence", persistence},
            {"flagged_per_capture", per_capture},
            {"median_per_capture", rep.median_per_capture},
            {"max_abs", rep.max_abs},
            {"mean_abs", rep.mean_abs}};
  write_report(resolve_out(a.out, "outliers.json"), j);
  return 0;
}

int cmd_sharpness(const AnalyzeArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.ckpt);
  TokenizedCorpus corpus = load_corpus(a.data);
  ModelLossTarget target(*lc.model, corpus, a.batch, a.batches, a.seed);
  SharpnessResult r = m_sharpness(target, a.rho);
  json j = {{"rho", r.rho},
            {"batches", r.batches},
            {"mean_delta", r.mean_delta},
            {"per_batch_delta", r.per_batch_delta}};
  write_report(resolve_out(a.out, "sharpness.json"), j);
  return 0;
}

int cmd_surface(const AnalyzeArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.ckpt);
  TokenizedCorpus corpus = load_corpus(a.data);
  ModelLossTarget target(*lc.model, corpus, a.batch, 1, a.seed);
  SurfaceResult s = loss_surface_2d(target, a.extent, a.resolution, a.seed);
  json rows = json::array();
  for (int64_t ia = 0; ia < s.resolution; ++ia) {
    json row = json::array();
    for (int64_t ib = 0; ib < s.resolution; ++ib) {
      row.push_back(s.losses[ia * s.resolution + ib]);
    }
    rows.push_back(row);
  }
  json j = {{"extent", s.extent},
            {"resolution", s.resolution},
            {"seed", s.seed},
            {"center_loss", s.center_loss},
            {"losses", rows}};
  write_report(resolve_out(a.out, "surface.json"), j);
  return 0;
}

int cmd_histogram(const AnalyzeArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.ckpt);
  Tensor p = lc.model->param(a.param);
  Histogram h = histogram(p.data(), a.bins);
  json j = {{"param", a.param},
            {"lo", h.lo},
            {"hi", h.hi},
            {"total", h.total},
            {"counts", h.counts}};
  write_report(resolve_out(a.out, "histogram.json"), j);
  return 0;
}

// Zero-bin occupancy of the optimizer moments: the stored code fraction for
// slots already kept as integers, plus a what-if fraction under the
// requested quantizer for every slot.
int cmd_zerobin(const AnalyzeArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.ckpt);
  if (!lc.optimizer) {
    throw ConfigError("checkpoint has no optimizer state to analyze");
  }
  QuantConfig probe = quant_config_from_strings(a.bits, a.granularity, a.mode);
  if (probe.granularity == Granularity::PerToken) {
    throw ConfigError("moment analysis supports tensor or channel granularity");
  }
  const AdamW& opt = *lc.optimizer;
  json per_param = json::array();
  for (size_t i = 0; i < opt.slots().size(); ++i) {
    const NamedParam& p = opt.params()[i];
    const ParamSlot& slot = opt.slots()[i];
    auto describe = [&](const MomentSlot& s) {
      std::vector<double> vals = s.quantized() ? dequantize(*s.q) : s.raw;
      json m;
      m["fraction"] = zero_bin_fraction(
          quantize(vals, p.tensor.shape(), probe));
      if (s.quantized()) m["stored_fraction"] = zero_bin_fraction(*s.q);
      return m;
    };
    per_param.push_back({{"param", p.name},
                         {"first_moment", describe(slot.m)},
                         {"second_moment", describe(slot.v)}});
  }
  json j = {{"bits", probe.bits},
            {"granularity", granularity_str(probe)},
            {"mode", mode_str(probe.mode)},
            {"stored_zero_bin_fraction", opt.stored_zero_bin_fraction()},
            {"params", per_param}};
  write_report(resolve_out(a.out, "zerobin.json"), j);
  return 0;
}

// ===== profile =====

struct ProfileArgs {
  std::string dims = "12x768x12";  // layers x d_model x heads
  int64_t d_ff = 0;
  int64_t vocab = 50257;
  int64_t context = 1024;
  int64_t batch = 8;
  int64_t seq = 1024;
  std::vector<int64_t> seq_list;
  double bytes = 8.0;
  int moment_bits = 0;  // 0 keeps raw moments
  std::string moment_granularity = "tensor";
  bool flops = false;
  std::string out;
};

ModelConfig parse_dims(const ProfileArgs& a) {
  ModelConfig cfg;
  int64_t* fields[3] = {&cfg.n_layers, &cfg.d_model, &cfg.n_heads};
  size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    size_t next = a.dims.find('x', pos);
    bool last = i == 2;
    if (last != (next == std::string::npos)) {
      throw ConfigError("--model wants layers x d_model x heads, e.g. 12x768x12");
    }
    std::string part = a.dims.substr(pos, last ? std::string::npos : next - pos);
    try {
      size_t used = 0;
      *fields[i] = std::stoll(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("bad --model component '" + part + "'");
    }
    pos = next + 1;
  }
  cfg.d_ff = a.d_ff;
  cfg.vocab_size = a.vocab;
  cfg.context_length = a.context;
  cfg.validate();
  return cfg;
}

int cmd_profile(const ProfileArgs& a) {
  ModelConfig cfg = parse_dims(a);
  MomentQuantConfig mq;
  if (a.moment_bits > 0) {
    QuantConfig qc = quant_config_from_strings(a.moment_bits,
                                               a.moment_granularity, "symmetric");
    mq.first = qc;
    mq.second = qc;
  }
  MemoryEstimate est =
      memory_estimate(cfg, a.batch, a.seq, a.bytes, OptimizerKind::AdamW, mq);

  std::cout << "memory at batch " << a.batch << ", seq " << a.seq << ", "
            << a.bytes << " bytes/element:\n";
  auto row = [](const char* name, double bytes) {
    std::cout << "  " << std::left << std::setw(12) << name << std::right
              << std::setw(16) << std::fixed << std::setprecision(0) << bytes
              << " bytes\n";
  };
  row("params", est.params_bytes);
  row("grads", est.grads_bytes);
  row("optimizer", est.optimizer_bytes);
  row("activations", est.activations_bytes);
  row("logits", est.logits_bytes);
  row("peak", est.peak_bytes);
  std::cout << "  peak scenario: " << est.peak_scenario << "\n";

  json j = {{"model",
             {{"n_layers", cfg.n_layers},
              {"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff_resolved()},
              {"vocab_size", cfg.vocab_size},
              {"context_length", cfg.context_length}}},
            {"batch", a.batch},
            {"seq", a.seq},
            {"bytes_per_element", a.bytes},
            {"memory",
             {{"params_bytes", est.params_bytes},
              {"grads_bytes", est.grads_bytes},
              {"optimizer_bytes", est.optimizer_bytes},
              {"activations_bytes", est.activations_bytes},
              {"logits_bytes", est.logits_bytes},
              {"peak_backward_start", est.peak_backward_start},
              {"peak_backward_end", est.peak_backward_end},
              {"peak_bytes", est.peak_bytes},
              {"peak_scenario", est.peak_scenario}}}};

  if (a.flops) {
    std::vector<int64_t> seqs = a.seq_list.empty()
                                    ? std::vector<int64_t>{a.seq}
                                    : a.seq_list;
    json table = json::array();
    std::cout << "linear share of forward multiply-accumulates:\n";
    for (int64_t t : seqs) {
      double f = linear_flop_fraction(cfg, t);
      std::cout << "  seq " << std::setw(6) << t << "  " << std::fixed
                << std::setprecision(6) << f << "\n";
      table.push_back({{"seq", t}, {"fraction", f}});
    }
    j["flops"] = table;
  }
  if (!a.out.empty()) write_report(a.out, j);
  return 0;
}

}  // namespace

// ===== entry point =====

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for quantized transformer pre-training"};
  app.require_subcommand(1);

  PrepareArgs pa;
  CLI::App* prepare = app.add_subcommand("prepare", "tokenize files into a corpus cache");
  prepare->add_option("--corpus", pa.inputs, "input files, one document each")
      ->required();
  prepare->add_option("--out", pa.out_dir, "output directory");
  prepare->add_option("--val-frac", pa.val_frac, "validation tail fraction");

  std::string config_path, resume_path;
  CLI::App* train = app.add_subcommand("train", "run a training config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  AnalyzeArgs aa;
  CLI::App* analyze = app.add_subcommand("analyze", "probe a checkpoint");
  analyze->require_subcommand(1);
  auto add_common = [&aa](CLI::App* sub, bool needs_data) {
    sub->add_option("--ckpt", aa.ckpt, "checkpoint file")->required();
    if (needs_data) {
      sub->add_option("--data", aa.data, "corpus cache")->required();
      sub->add_option("--batch", aa.batch, "rows per batch");
      sub->add_option("--seed", aa.seed, "batch and direction seed");
    }
    sub->add_option("--out", aa.out, "report path");
  };
  CLI::App* outliers = analyze->add_subcommand(
      "outliers", "flag channels with outsized activation magnitude");
  add_common(outliers, true);
  outliers->add_option("--family", aa.family, "qkv|attn_out|fc1|fc2|lm_head");
  outliers->add_option("--layer", aa.layer, "block index");
  outliers->add_option("--captures", aa.captures, "forward passes to record");
  outliers->add_option("--ratio", aa.ratio, "flag above ratio * median");
  CLI::App* sharpness = analyze->add_subcommand(
      "sharpness", "loss rise after one normalized ascent step");
  add_common(sharpness, true);
  sharpness->add_option("--rho", aa.rho, "ascent step length");
  sharpness->add_option("--batches", aa.batches, "batches to average");
  CLI::App* surface = analyze->add_subcommand(
      "surface", "loss grid over a random 2-D parameter slice");
  add_common(surface, true);
  surface->add_option("--extent", aa.extent, "half-width of the slice");
  surface->add_option("--res", aa.resolution, "grid points per axis");
  CLI::App* histo = analyze->add_subcommand(
      "histogram", "value histogram of one parameter tensor");
  add_common(histo, false);
  histo->add_option("--param", aa.param, "parameter name")->required();
  histo->add_option("--bins", aa.bins, "bin count");
  CLI::App* zerobin = analyze->add_subcommand(
      "zerobin", "zero-bin occupancy of optimizer moments");
  add_common(zerobin, false);
  zerobin->add_option("--bits", aa.bits, "probe bit width");
  zerobin->add_option("--granularity", aa.granularity, "tensor|channel:<axis>");
  zerobin->add_option("--mode", aa.mode, "symmetric|asymmetric");

  ProfileArgs fa;
  CLI::App* profile = app.add_subcommand("profile", "analytic memory and FLOP tables");
  profile->add_option("--model", fa.dims, "layers x d_model x heads");
  profile->add_option("--d-ff", fa.d_ff, "feed-forward width (default 4 * d_model)");
  profile->add_option("--vocab", fa.vocab, "vocabulary size");
  profile->add_option("--context", fa.context, "context length");
  profile->add_option("--batch", fa.batch, "batch size");
  profile->add_option("--seq", fa.seq, "sequence length");
  profile->add_option("--seq-list", fa.seq_list, "FLOP table sequence lengths")
      ->delimiter(',');
  profile->add_option("--bytes", fa.bytes, "bytes per wide element");
  profile->add_option("--moment-bits", fa.moment_bits,
                      "price quantized moments at this width (0 = raw)");
  profile->add_option("--moment-granularity", fa.moment_granularity,
                      "tensor|channel:<axis>");
  profile->add_flag("--flops", fa.flops, "also print the linear FLOP fraction");
  profile->add_option("--out", fa.out, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (prepare->parsed()) return cmd_prepare(pa);
    if (train->parsed()) return cmd_train(config_path, resume_path);
    if (outliers->parsed()) return cmd_outliers(aa);
    if (sharpness->parsed()) return cmd_sharpness(aa);
    if (surface->parsed()) return cmd_surface(aa);
    if (histo->parsed()) return cmd_histogram(aa);
    if (zerobin->parsed()) return cmd_zerobin(aa);
    if (profile->parsed()) return cmd_profile(fa);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    std::cerr << "state error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

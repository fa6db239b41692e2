#include "qtrain/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>

#include "config_json.hpp"
#include "qtrain/checkpoint.hpp"
#include "qtrain/data.hpp"
#include "qtrain/model.hpp"
#include "qtrain/optimizer.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

using detail::json;
namespace fs = std::filesystem;

double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps,
             double peak_lr, double min_lr) {
  if (step < 0 || step > total_steps) {
    throw ConfigError("schedule step " + std::to_string(step) +
                      " outside [0," + std::to_string(total_steps) + "]");
  }
  if (step <= warmup_steps) {
    if (warmup_steps == 0) return step == 0 ? 0.0 : peak_lr;
    return peak_lr * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  }
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  return min_lr +
         0.5 * (peak_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

namespace {

double mean_val_loss(TransformerModel& model, const TokenizedCorpus& corpus,
                     const TrainRunConfig& cfg) {
  int64_t window = cfg.model.context_length;
  double sum = 0.0;
  for (int64_t i = 0; i < cfg.eval_batches; ++i) {
    std::vector<int32_t> batch = sample_batch(corpus, cfg.seed, i,
                                              cfg.micro_batch, window,
                                              /*validation=*/true);
    sum += model.loss(batch, cfg.micro_batch, window).item();
  }
  return sum / static_cast<double>(cfg.eval_batches);
}

void write_divergence_report(const std::string& path, int64_t step,
                             double train_loss, double grad_norm,
                             const std::string& message) {
  json j;
  j["schema"] = "qtrain.divergence.v1";
  j["step"] = step;
  j["train_loss"] = train_loss;  // non-finite serializes as null
  j["grad_norm"] = grad_norm;
  j["message"] = message;
  std::ofstream os(path, std::ios::trunc);
  os << j.dump(2) << "\n";
}

}  // namespace

TrainResult train_run(const TrainRunConfig& cfg, const std::string& resume_from) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw ConfigError("run needs an output directory");
  if (cfg.corpus_path.empty()) throw ConfigError("run needs a corpus path");

  fs::create_directories(cfg.out_dir);
  TokenizedCorpus corpus = load_corpus(cfg.corpus_path);
  uint64_t cfg_digest = run_config_digest(cfg);

  int64_t window = cfg.model.context_length;
  int64_t micros = cfg.global_batch / cfg.micro_batch;

  std::unique_ptr<TransformerModel> model;
  std::unique_ptr<AdamW> opt;
  int64_t start_step = 1;
  bool resumed = !resume_from.empty();

  if (resumed) {
    LoadedCheckpoint ckpt = load_checkpoint(resume_from);
    if (ckpt.meta.config_digest != cfg_digest) {
      throw ConfigError("checkpoint " + resume_from +
                        " was written under a different run config");
    }
    if (ckpt.meta.corpus_digest != corpus.digest) {
      throw ConfigError("checkpoint " + resume_from +
                        " was trained on a different corpus");
    }
    if (!ckpt.optimizer) {
      throw ConfigError("checkpoint " + resume_from +
                        " carries no optimizer state, cannot resume");
    }
    model = std::move(ckpt.model);
    opt = std::move(ckpt.optimizer);
    start_step = ckpt.meta.step + 1;
  } else {
    model = std::make_unique<TransformerModel>(cfg.model, cfg.seed);
    opt = std::make_unique<AdamW>(model->params(), cfg.adam, cfg.moment_quant);
  }

  TrainResult result;
  result.first_val_loss = std::nan("");
  result.final_val_loss = std::nan("");
  result.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
  result.manifest_path = (fs::path(cfg.out_dir) / "manifest.json").string();
  result.final_checkpoint_path =
      (fs::path(cfg.out_dir) / "ckpt_final.qckpt").string();
  std::string divergence_path =
      (fs::path(cfg.out_dir) / "divergence.json").string();

  {
    json manifest;
    manifest["schema"] = "qtrain.run.v1";
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(cfg_digest));
    manifest["config_digest"] = buf;
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(corpus.digest));
    manifest["corpus_digest"] = buf;
    manifest["config"] = json::parse(dump_run_config(cfg));
    manifest["resumed_from"] = resumed ? json(resume_from) : json(nullptr);
    manifest["param_count"] = param_count(cfg.model);
    manifest["artifacts"] = json{{"metrics", "metrics.jsonl"},
                                 {"final_checkpoint", "ckpt_final.qckpt"}};
    std::ofstream os(result.manifest_path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + result.manifest_path);
    os << manifest.dump(2) << "\n";
  }

  // Fresh runs truncate the metrics file and emit the schema header; resumed
  // runs append so a tail written into the same directory stays one stream.
  std::ofstream metrics(result.metrics_path,
                        resumed ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + result.metrics_path);
  if (!resumed) metrics << json{{"schema", "qtrain.metrics.v1"}}.dump() << "\n";

  // Per-step gradient quantization error, keyed by layer, filled by hooks.
  std::map<std::string, double> grad_err_sq;
  auto hook_layer = [&grad_err_sq](QLinear& layer, const std::string& key) {
    if (!layer.spec().grad_out) return;
    layer.on_grad_quant_error = [&grad_err_sq, key](double err_sq, int64_t) {
      grad_err_sq[key] += err_sq;
    };
  };
  for (int64_t i = 0; i < cfg.model.n_layers; ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    hook_layer(model->linear("qkv", i), p + "qkv");
    hook_layer(model->linear("attn_out", i), p + "attn_out");
    hook_layer(model->linear("fc1", i), p + "fc1");
    hook_layer(model->linear("fc2", i), p + "fc2");
  }
  hook_layer(model->linear("lm_head"), "lm_head");

  bool log_moment_fields = cfg.moment_quant.any();
  auto emit = [&metrics](const json& j) { metrics << j.dump() << "\n"; };

  if (!resumed && cfg.eval_interval > 0) {
    double v = mean_val_loss(*model, corpus, cfg);
    result.first_val_loss = v;
    result.final_val_loss = v;
    json rec;
    rec["step"] = 0;
    rec["lr"] = 0.0;
    rec["train_loss"] = nullptr;
    rec["grad_norm"] = nullptr;
    rec["val_loss"] = v;
    emit(rec);
  }

  double peak = cfg.adam.lr;
  double min_lr = cfg.schedule.min_lr_resolved(peak);
  int64_t warmup = cfg.schedule.warmup_resolved();
  int64_t total = cfg.schedule.total_steps;

  for (int64_t step = start_step; step <= total; ++step) {
    double lr = lr_at(step, total, warmup, peak, min_lr);
    grad_err_sq.clear();
    model->zero_grad();

    std::vector<int32_t> windows =
        sample_batch(corpus, cfg.seed, step, cfg.global_batch, window);
    int64_t chunk = cfg.micro_batch * (window + 1);
    double loss_sum = 0.0;
    for (int64_t k = 0; k < micros; ++k) {
      std::vector<int32_t> micro(windows.begin() + k * chunk,
                                 windows.begin() + (k + 1) * chunk);
      Tensor loss = model->loss(micro, cfg.micro_batch, window);
      // Seeding with 1/micros makes the accumulated gradient the gradient
      // of the mean over the whole global batch.
      backward(loss, 1.0 / static_cast<double>(micros));
      loss_sum += loss.item();
    }
    double train_loss = loss_sum / static_cast<double>(micros);

    double norm_sq = 0.0;
    for (NamedParam& p : model->params()) {
      const std::vector<double>* g = p.tensor.grad_if();
      if (!g) continue;
      for (double v : *g) norm_sq += v * v;
    }
    double grad_norm = std::sqrt(norm_sq);

    if (!std::isfinite(train_loss) || !std::isfinite(grad_norm)) {
      write_divergence_report(divergence_path, step, train_loss, grad_norm,
                              "non-finite loss or gradient norm");
      result.diverged = true;
      result.steps_completed = step - 1;
      result.final_train_loss = train_loss;
      result.divergence_report_path = divergence_path;
      json rec;
      rec["step"] = step;
      rec["lr"] = lr;
      rec["train_loss"] = train_loss;
      rec["grad_norm"] = grad_norm;
      rec["diverged"] = true;
      emit(rec);
      result.instability_events = opt->instability_events_total();
      return result;
    }

    if (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip) {
      double s = cfg.grad_clip / grad_norm;
      for (NamedParam& p : model->params()) {
        std::vector<double>& g = p.tensor.grad();
        for (double& v : g) v *= s;
      }
    }

    opt->step(lr);

    json rec;
    rec["step"] = step;
    rec["lr"] = lr;
    rec["train_loss"] = train_loss;
    rec["grad_norm"] = grad_norm;
    if (!grad_err_sq.empty()) {
      json errs = json::object();
      for (const auto& [key, sq] : grad_err_sq) errs[key] = std::sqrt(sq);
      rec["quant_error_norms"] = std::move(errs);
    }
    if (log_moment_fields) {
      rec["zero_bin_fraction"] = opt->stored_zero_bin_fraction();
      rec["clamp_count"] = opt->instability_events_last_step();
    }
    bool eval_now = cfg.eval_interval > 0 &&
                    (step % cfg.eval_interval == 0 || step == total);
    if (eval_now) {
      double v = mean_val_loss(*model, corpus, cfg);
      if (std::isfinite(v)) {
        result.final_val_loss = v;
      } else {
        rec["val_loss"] = v;
        emit(rec);
        write_divergence_report(divergence_path, step, v, grad_norm,
                                "non-finite validation loss");
        result.diverged = true;
        result.steps_completed = step;
        result.final_train_loss = train_loss;
        result.divergence_report_path = divergence_path;
        result.instability_events = opt->instability_events_total();
        return result;
      }
      rec["val_loss"] = v;
    }
    emit(rec);

    result.final_train_loss = train_loss;
    result.steps_completed = step;

    bool checkpoint_now =
        (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 &&
         step != total);
    if (checkpoint_now) {
      CheckpointMeta meta{step, cfg_digest, corpus.digest};
      std::string path =
          (fs::path(cfg.out_dir) / ("ckpt_step" + std::to_string(step) + ".qckpt"))
              .string();
      save_checkpoint(path, *model, opt.get(), meta);
    }
  }

  CheckpointMeta meta{total, cfg_digest, corpus.digest};
  save_checkpoint(result.final_checkpoint_path, *model, opt.get(), meta);
  result.instability_events = opt->instability_events_total();
  return result;
}

}  // namespace qtrain

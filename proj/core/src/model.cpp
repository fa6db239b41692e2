#include "qtrain/model.hpp"

#include <cmath>

#include "qtrain/errors.hpp"
#include "qtrain/ops.hpp"
#include "qtrain/rng.hpp"

namespace qtrain {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 2 ||
      context_length < 1) {
    throw ConfigError("model dims must be positive (vocab >= 2)");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_ff < 0) throw ConfigError("d_ff must be >= 0 (0 means 4*d_model)");
  quant.qkv.validate();
  quant.attn_out.validate();
  quant.fc1.validate();
  quant.fc2.validate();
  quant.lm_head.validate();
}

std::vector<std::pair<std::string, Shape>> param_inventory(
    const ModelConfig& cfg) {
  cfg.validate();
  int64_t d = cfg.d_model, ff = cfg.d_ff_resolved();
  std::vector<std::pair<std::string, Shape>> inv;
  inv.push_back({"tok_emb", {cfg.vocab_size, d}});
  inv.push_back({"pos_emb", {cfg.context_length, d}});
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    inv.push_back({p + "ln1.gain", {d}});
    inv.push_back({p + "ln1.bias", {d}});
    inv.push_back({p + "qkv.weight", {3 * d, d}});
    inv.push_back({p + "qkv.bias", {3 * d}});
    inv.push_back({p + "attn_out.weight", {d, d}});
    inv.push_back({p + "attn_out.bias", {d}});
    inv.push_back({p + "ln2.gain", {d}});
    inv.push_back({p + "ln2.bias", {d}});
    inv.push_back({p + "fc1.weight", {ff, d}});
    inv.push_back({p + "fc1.bias", {ff}});
    inv.push_back({p + "fc2.weight", {d, ff}});
    inv.push_back({p + "fc2.bias", {d}});
  }
  inv.push_back({"final_ln.gain", {d}});
  inv.push_back({"final_ln.bias", {d}});
  if (!cfg.tie_lm_head) inv.push_back({"lm_head.weight", {cfg.vocab_size, d}});
  return inv;
}

int64_t param_count(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& [name, shape] : param_inventory(cfg)) n += shape_numel(shape);
  return n;
}

TransformerModel::TransformerModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  int64_t d = cfg_.d_model, ff = cfg_.d_ff_resolved();

  tok_emb_ = Tensor::leaf({cfg_.vocab_size, d}, true);
  pos_emb_ = Tensor::leaf({cfg_.context_length, d}, true);
  blocks_.reserve(cfg_.n_layers);
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    Block b;
    b.ln1_gain = Tensor::leaf({d}, true);
    b.ln1_bias = Tensor::leaf({d}, true);
    b.ln2_gain = Tensor::leaf({d}, true);
    b.ln2_bias = Tensor::leaf({d}, true);
    b.qkv = QLinear(d, 3 * d, cfg_.quant.qkv);
    b.attn_out = QLinear(d, d, cfg_.quant.attn_out);
    b.fc1 = QLinear(d, ff, cfg_.quant.fc1);
    b.fc2 = QLinear(ff, d, cfg_.quant.fc2);
    blocks_.push_back(std::move(b));
  }
  final_ln_gain_ = Tensor::leaf({d}, true);
  final_ln_bias_ = Tensor::leaf({d}, true);
  lm_head_ = cfg_.tie_lm_head
                 ? QLinear::tied(tok_emb_, cfg_.quant.lm_head)
                 : QLinear(d, cfg_.vocab_size, cfg_.quant.lm_head,
                           /*with_bias=*/false);

  // Register in inventory order so names, checkpoints, and the closed-form
  // inventory all agree.
  params_.push_back({"tok_emb", tok_emb_});
  params_.push_back({"pos_emb", pos_emb_});
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    Block& b = blocks_[i];
    std::string p = "block" + std::to_string(i) + ".";
    params_.push_back({p + "ln1.gain", b.ln1_gain});
    params_.push_back({p + "ln1.bias", b.ln1_bias});
    params_.push_back({p + "qkv.weight", b.qkv.weight()});
    params_.push_back({p + "qkv.bias", b.qkv.bias()});
    params_.push_back({p + "attn_out.weight", b.attn_out.weight()});
    params_.push_back({p + "attn_out.bias", b.attn_out.bias()});
    params_.push_back({p + "ln2.gain", b.ln2_gain});
    params_.push_back({p + "ln2.bias", b.ln2_bias});
    params_.push_back({p + "fc1.weight", b.fc1.weight()});
    params_.push_back({p + "fc1.bias", b.fc1.bias()});
    params_.push_back({p + "fc2.weight", b.fc2.weight()});
    params_.push_back({p + "fc2.bias", b.fc2.bias()});
  }
  params_.push_back({"final_ln.gain", final_ln_gain_});
  params_.push_back({"final_ln.bias", final_ln_bias_});
  if (!cfg_.tie_lm_head) params_.push_back({"lm_head.weight", lm_head_.weight()});

  // Gaussian init, std 0.02, with residual-branch projections shrunk by
  // 1/sqrt(2 * n_layers) so the residual stream variance stays flat with
  // depth. Layernorm starts at identity, biases at zero. Draw order follows
  // the registry, so a given seed always produces identical parameters.
  Rng rng(init_seed);
  double std_base = 0.02;
  double std_resid = std_base / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  for (NamedParam& p : params_) {
    bool is_weight = p.name == "tok_emb" || p.name == "pos_emb" ||
                     p.name.ends_with(".weight") || p.name == "lm_head.weight";
    if (!is_weight) {
      if (p.name.ends_with("gain")) {
        for (double& v : p.tensor.data()) v = 1.0;
      }
      continue;  // biases stay zero
    }
    bool residual_proj = p.name.ends_with("attn_out.weight") ||
                         p.name.ends_with("fc2.weight");
    double sd = residual_proj ? std_resid : std_base;
    for (double& v : p.tensor.data()) v = rng.gaussian() * sd;
  }
}

Tensor TransformerModel::param(const std::string& name) const {
  for (const NamedParam& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw StateError("no parameter named " + name);
}

void TransformerModel::zero_grad() {
  for (NamedParam& p : params_) p.tensor.zero_grad();
}

QLinear& TransformerModel::linear(const std::string& family, int64_t layer) {
  if (family == "lm_head") return lm_head_;
  if (layer < 0 || layer >= static_cast<int64_t>(blocks_.size())) {
    throw StateError("layer index " + std::to_string(layer) + " out of range");
  }
  Block& b = blocks_[layer];
  if (family == "qkv") return b.qkv;
  if (family == "attn_out") return b.attn_out;
  if (family == "fc1") return b.fc1;
  if (family == "fc2") return b.fc2;
  throw StateError("unknown linear family " + family);
}

Tensor TransformerModel::forward(const std::vector<int32_t>& tokens,
                                 int64_t batch, int64_t seq) {
  if (batch < 1 || seq < 1 || seq > cfg_.context_length) {
    throw StateError("bad batch/seq " + std::to_string(batch) + "/" +
                     std::to_string(seq) + " for context length " +
                     std::to_string(cfg_.context_length));
  }
  if (static_cast<int64_t>(tokens.size()) != batch * seq) {
    throw StateError("token count does not match batch*seq");
  }
  for (int32_t t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw DataError("token id " + std::to_string(t) + " outside vocab [0," +
                      std::to_string(cfg_.vocab_size) + ")");
    }
  }
  int64_t d = cfg_.d_model, heads = cfg_.n_heads;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(d / heads));

  std::vector<int32_t> pos_ids(seq);
  for (int64_t t = 0; t < seq; ++t) pos_ids[t] = static_cast<int32_t>(t);

  Tensor h = add(gather_rows(tok_emb_, tokens),
                 tile_rows(gather_rows(pos_emb_, pos_ids), batch));

  for (Block& b : blocks_) {
    Tensor a = layernorm(h, b.ln1_gain, b.ln1_bias);
    Tensor qkv = b.qkv.forward(a);
    Tensor q = split_heads(slice_cols(qkv, 0, d), batch, seq, heads);
    Tensor k = split_heads(slice_cols(qkv, d, 2 * d), batch, seq, heads);
    Tensor v = split_heads(slice_cols(qkv, 2 * d, 3 * d), batch, seq, heads);
    Tensor scores = causal_mask(
        scale(batched_matmul(q, k, false, /*trans_b=*/true), att_scale));
    Tensor ctx = batched_matmul(softmax_lastdim(scores), v);
    Tensor attn = b.attn_out.forward(merge_heads(ctx, batch, seq, heads));
    h = add(h, attn);

    Tensor a2 = layernorm(h, b.ln2_gain, b.ln2_bias);
    Tensor f = b.fc2.forward(gelu(b.fc1.forward(a2)));
    h = add(h, f);
  }

  Tensor hn = layernorm(h, final_ln_gain_, final_ln_bias_);
  return lm_head_.forward(hn);
}

Tensor TransformerModel::loss(const std::vector<int32_t>& windows,
                              int64_t batch, int64_t seq) {
  if (static_cast<int64_t>(windows.size()) != batch * (seq + 1)) {
    throw StateError("loss expects [batch, seq+1] windows");
  }
  std::vector<int32_t> inputs(batch * seq), targets(batch * seq);
  for (int64_t b = 0; b < batch; ++b) {
    const int32_t* row = windows.data() + b * (seq + 1);
    for (int64_t t = 0; t < seq; ++t) {
      inputs[b * seq + t] = row[t];
      targets[b * seq + t] = row[t + 1];
    }
  }
  for (int32_t t : targets) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw DataError("target id outside vocab");
    }
  }
  return softmax_cross_entropy(forward(inputs, batch, seq), targets);
}

}  // namespace qtrain

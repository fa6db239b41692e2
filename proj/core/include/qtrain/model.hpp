#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qtrain/qlinear.hpp"
#include "qtrain/tensor.hpp"

// Decoder-only transformer with pre-layernorm blocks:
//   h = tok_emb[ids] + pos_emb
//   per block: h += attn_out(attend(qkv(ln1(h))));  h += fc2(gelu(fc1(ln2(h))))
//   logits = lm_head(final_ln(h))
// The lm_head weight is tied to tok_emb by default and has no bias.

namespace qtrain {

// Quantizer assignment per linear-layer family, uniform across blocks.
struct ModelQuantMap {
  LayerQuantSpec qkv;
  LayerQuantSpec attn_out;
  LayerQuantSpec fc1;
  LayerQuantSpec fc2;
  LayerQuantSpec lm_head;  // off by default; the output layer is fragile
  bool any() const {
    return qkv.any() || attn_out.any() || fc1.any() || fc2.any() ||
           lm_head.any();
  }
};

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t d_ff = 0;  // 0 means 4 * d_model
  int64_t vocab_size = 257;
  int64_t context_length = 128;
  bool tie_lm_head = true;
  ModelQuantMap quant;

  int64_t d_ff_resolved() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;
};

// Closed-form parameter inventory (name, shape) in registration order.
// Drives param_count and analytic memory estimates without building a model.
std::vector<std::pair<std::string, Shape>> param_inventory(const ModelConfig&);
int64_t param_count(const ModelConfig& cfg);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

class TransformerModel {
 public:
  TransformerModel(const ModelConfig& cfg, uint64_t init_seed);

  // Logits [batch*seq, vocab] for row-major token ids [batch, seq].
  Tensor forward(const std::vector<int32_t>& tokens, int64_t batch,
                 int64_t seq);

  // Mean next-token cross entropy over [batch, seq+1] windows: columns
  // [0,seq) are inputs, columns [1,seq+1) are targets.
  Tensor loss(const std::vector<int32_t>& windows, int64_t batch, int64_t seq);

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  // Lookup by inventory name; StateError if absent.
  Tensor param(const std::string& name) const;
  void zero_grad();

  const ModelConfig& config() const { return cfg_; }

  // Access to one linear layer; family is qkv|attn_out|fc1|fc2|lm_head
  // (layer index ignored for lm_head).
  QLinear& linear(const std::string& family, int64_t layer = 0);

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    QLinear qkv, attn_out, fc1, fc2;
  };

  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor final_ln_gain_, final_ln_bias_;
  QLinear lm_head_;
  std::vector<NamedParam> params_;
};

}  // namespace qtrain

#include "qtrain/optimizer.hpp"

#include <cmath>

#include "qtrain/errors.hpp"

namespace qtrain {

void AdamHyper::validate() const {
  if (lr <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 ||
      eps <= 0.0 || weight_decay < 0.0) {
    throw ConfigError("invalid AdamW hyperparameters");
  }
}

void MomentQuantConfig::validate() const {
  for (const auto& cfg : {first, second}) {
    if (!cfg) continue;
    cfg->validate();
    if (cfg->granularity == Granularity::PerToken) {
      throw ConfigError(
          "optimizer moments support per-tensor or per-channel quantization");
    }
  }
}

AdamW::AdamW(std::vector<NamedParam> params, AdamHyper hyper,
             MomentQuantConfig moment_quant)
    : params_(std::move(params)), hyper_(hyper), mq_(moment_quant) {
  hyper_.validate();
  mq_.validate();
  slots_.resize(params_.size());
  // Fresh state is all zeros; quantized slots start raw-zero and pick up
  // integer storage after the first step writes them.
  for (size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.raw.assign(params_[i].tensor.numel(), 0.0);
    slots_[i].v.raw.assign(params_[i].tensor.numel(), 0.0);
  }
}

bool AdamW::slot_quantized(const NamedParam& p) const {
  // Vectors are tiny and pathological under grouping (a per-channel group
  // per scalar), so quantized storage applies to rank >= 2 tensors only.
  return p.tensor.rank() >= 2;
}

void AdamW::step(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ConfigError("learning rate must be finite and >= 0");
  }
  ++t_;
  events_last_ = 0;
  double b1 = hyper_.beta1, b2 = hyper_.beta2;
  double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));

  for (size_t pi = 0; pi < params_.size(); ++pi) {
    NamedParam& p = params_[pi];
    ParamSlot& slot = slots_[pi];
    const std::vector<double>* gp = p.tensor.grad_if();
    // Parameters that never saw a backward have zero gradient this step.
    std::vector<double> zeros;
    if (!gp) {
      zeros.assign(p.tensor.numel(), 0.0);
      gp = &zeros;
    }
    const std::vector<double>& g = *gp;
    std::vector<double>& w = p.tensor.data();

    std::vector<double> m_in = slot.m.quantized() ? dequantize(*slot.m.q)
                                                  : std::move(slot.m.raw);
    std::vector<double> v_in = slot.v.quantized() ? dequantize(*slot.v.q)
                                                  : std::move(slot.v.raw);

    for (size_t i = 0; i < w.size(); ++i) {
      double vi = v_in[i];
      if (vi < 0.0) {  // unreachable from this quantizer, kept as a guard
        vi = 0.0;
        ++events_last_;
      }
      double mi = b1 * m_in[i] + (1.0 - b1) * g[i];
      double vv = b2 * vi + (1.0 - b2) * g[i] * g[i];
      // Zero-bin collapse: history says "no curvature" while momentum is
      // live, so the denominator is bare eps and the update explodes.
      if (vv == 0.0 && mi != 0.0) ++events_last_;
      double update = lr * (mi / bc1) / (std::sqrt(vv / bc2) + hyper_.eps);
      w[i] -= update + lr * hyper_.weight_decay * w[i];
      m_in[i] = mi;
      v_in[i] = vv;
    }

    bool quantize_store = slot_quantized(p);
    const Shape& shape = p.tensor.shape();
    if (quantize_store && mq_.first) {
      slot.m.q = quantize(std::span<const double>(m_in.data(), m_in.size()),
                          shape, *mq_.first);
      slot.m.raw.clear();
    } else {
      slot.m.q.reset();
      slot.m.raw = std::move(m_in);
    }
    if (quantize_store && mq_.second) {
      slot.v.q = quantize(std::span<const double>(v_in.data(), v_in.size()),
                          shape, *mq_.second);
      slot.v.raw.clear();
    } else {
      slot.v.q.reset();
      slot.v.raw = std::move(v_in);
    }
  }
  events_total_ += events_last_;
}

double AdamW::stored_zero_bin_fraction() const {
  int64_t zeros = 0, total = 0;
  for (const ParamSlot& slot : slots_) {
    for (const MomentSlot* ms : {&slot.m, &slot.v}) {
      if (!ms->quantized()) continue;
      const QuantizedTensor& q = *ms->q;
      for (int64_t i = 0; i < static_cast<int64_t>(q.ints.size()); ++i) {
        int64_t grp = quant_group_of(q.shape, q.config, i);
        if (q.ints[i] == -q.zero_points[grp]) ++zeros;
      }
      total += static_cast<int64_t>(q.ints.size());
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace qtrain

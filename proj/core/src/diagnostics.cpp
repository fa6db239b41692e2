#include "qtrain/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "qtrain/errors.hpp"
#include "qtrain/ops.hpp"
#include "qtrain/rng.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

// ===== tensor statistics =====

double quant_error_norm(std::span<const double> x, const Shape& shape,
                        const QuantConfig& cfg) {
  std::vector<double> xq = fake_quantize_span(x, shape, cfg);
  double sq = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double e = x[i] - xq[i];
    sq += e * e;
  }
  return std::sqrt(sq);
}

double gradient_sparsity(std::span<const double> g, double threshold) {
  if (g.empty()) return 0.0;
  if (threshold < 0.0) throw ConfigError("sparsity threshold must be >= 0");
  int64_t small = 0;
  for (double v : g) {
    if (std::fabs(v) <= threshold) ++small;
  }
  return static_cast<double>(small) / static_cast<double>(g.size());
}

Histogram histogram(std::span<const double> x, int64_t bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  if (x.empty()) throw DataError("histogram of an empty tensor");
  Histogram h;
  h.counts.assign(bins, 0);
  h.total = static_cast<int64_t>(x.size());
  h.lo = x[0];
  h.hi = x[0];
  for (double v : x) {
    if (!std::isfinite(v)) throw DataError("histogram input contains NaN or Inf");
    h.lo = std::min(h.lo, v);
    h.hi = std::max(h.hi, v);
  }
  double width = h.hi - h.lo;
  for (double v : x) {
    int64_t b = width == 0.0
                    ? 0
                    : static_cast<int64_t>((v - h.lo) / width *
                                           static_cast<double>(bins));
    if (b >= bins) b = bins - 1;  // v == hi lands in the last bin
    ++h.counts[b];
  }
  return h;
}

// ===== channel outliers =====

ChannelOutlierReport channel_outliers(
    const std::vector<std::vector<double>>& captures, int64_t channels,
    double ratio) {
  if (channels < 1) throw ConfigError("channel count must be >= 1");
  if (ratio <= 0.0) throw ConfigError("outlier ratio must be > 0");
  if (captures.empty()) throw DataError("no activation captures given");

  ChannelOutlierReport rep;
  rep.channels = channels;
  rep.captures = static_cast<int64_t>(captures.size());
  rep.ratio = ratio;
  rep.max_abs.assign(channels, 0.0);
  rep.mean_abs.assign(channels, 0.0);
  int64_t total_tokens = 0;

  for (const std::vector<double>& cap : captures) {
    if (cap.empty() || cap.size() % channels != 0) {
      throw DataError("capture size is not a multiple of the channel count");
    }
    int64_t tokens = static_cast<int64_t>(cap.size()) / channels;
    total_tokens += tokens;
    std::vector<double> cap_max(channels, 0.0);
    for (int64_t t = 0; t < tokens; ++t) {
      for (int64_t c = 0; c < channels; ++c) {
        double a = std::fabs(cap[t * channels + c]);
        cap_max[c] = std::max(cap_max[c], a);
        rep.mean_abs[c] += a;
      }
    }
    for (int64_t c = 0; c < channels; ++c) {
      rep.max_abs[c] = std::max(rep.max_abs[c], cap_max[c]);
    }
    std::vector<double> sorted = cap_max;
    std::sort(sorted.begin(), sorted.end());
    double median = channels % 2 == 1
                        ? sorted[channels / 2]
                        : 0.5 * (sorted[channels / 2 - 1] + sorted[channels / 2]);
    rep.median_per_capture.push_back(median);
    std::vector<int64_t> flagged;
    for (int64_t c = 0; c < channels; ++c) {
      if (cap_max[c] > ratio * median) flagged.push_back(c);
    }
    for (int64_t c : flagged) rep.persistence[c] += 1;
    rep.flagged_per_capture.push_back(std::move(flagged));
  }
  for (int64_t c = 0; c < channels; ++c) {
    rep.mean_abs[c] /= static_cast<double>(total_tokens);
  }
  for (const auto& [c, n] : rep.persistence) rep.flagged_union.push_back(c);
  return rep;
}

// ===== loss geometry =====

namespace {

int64_t total_size(const std::vector<ParamBlock>& blocks) {
  int64_t n = 0;
  for (const ParamBlock& b : blocks) n += b.size;
  return n;
}

std::vector<double> snapshot(const std::vector<ParamBlock>& blocks) {
  std::vector<double> snap(total_size(blocks));
  int64_t off = 0;
  for (const ParamBlock& b : blocks) {
    std::memcpy(snap.data() + off, b.data, b.size * sizeof(double));
    off += b.size;
  }
  return snap;
}

void restore(const std::vector<ParamBlock>& blocks,
             const std::vector<double>& snap) {
  int64_t off = 0;
  for (const ParamBlock& b : blocks) {
    std::memcpy(b.data, snap.data() + off, b.size * sizeof(double));
    off += b.size;
  }
}

}  // namespace

SharpnessResult m_sharpness(ParamLossTarget& target, double rho) {
  if (rho < 0.0) throw ConfigError("sharpness rho must be >= 0");
  std::vector<ParamBlock> blocks = target.blocks();
  int64_t n = total_size(blocks);
  std::vector<double> snap = snapshot(blocks);
  std::vector<double> grad(n);

  SharpnessResult res;
  res.rho = rho;
  res.batches = target.batches();
  for (int64_t i = 0; i < res.batches; ++i) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double base = target.batch_loss_and_grad(i, grad);
    double norm_sq = 0.0;
    for (double v : grad) norm_sq += v * v;
    double norm = std::sqrt(norm_sq);
    double delta = 0.0;
    if (rho > 0.0 && norm > 0.0) {
      double step = rho / norm;
      int64_t off = 0;
      for (const ParamBlock& b : blocks) {
        for (int64_t j = 0; j < b.size; ++j) b.data[j] += step * grad[off + j];
        off += b.size;
      }
      delta = target.batch_loss(i) - base;
      restore(blocks, snap);
    }
    res.per_batch_delta.push_back(delta);
    res.mean_delta += delta;
  }
  if (res.batches > 0) res.mean_delta /= static_cast<double>(res.batches);
  return res;
}

SurfaceResult loss_surface_2d(ParamLossTarget& target, double extent,
                              int64_t resolution, uint64_t seed) {
  if (resolution < 1) throw ConfigError("surface resolution must be >= 1");
  if (extent <= 0.0) throw ConfigError("surface extent must be > 0");
  std::vector<ParamBlock> blocks = target.blocks();
  int64_t n = total_size(blocks);
  std::vector<double> snap = snapshot(blocks);

  // Two gaussian directions, filter-normalized per parameter block: each
  // block's slice is scaled to the norm of that block's parameters.
  std::vector<double> d1(n), d2(n);
  Rng rng(seed);
  int64_t off = 0;
  for (const ParamBlock& b : blocks) {
    double wn = 0.0;
    for (int64_t j = 0; j < b.size; ++j) wn += b.data[j] * b.data[j];
    wn = std::sqrt(wn);
    for (auto* dir : {&d1, &d2}) {
      double dn = 0.0;
      for (int64_t j = 0; j < b.size; ++j) {
        double v = rng.gaussian();
        (*dir)[off + j] = v;
        dn += v * v;
      }
      dn = std::sqrt(dn);
      double s = (wn == 0.0 || dn == 0.0) ? 0.0 : wn / dn;
      for (int64_t j = 0; j < b.size; ++j) (*dir)[off + j] *= s;
    }
    off += b.size;
  }

  SurfaceResult res;
  res.extent = extent;
  res.resolution = resolution;
  res.seed = seed;
  res.losses.assign(resolution * resolution, 0.0);

  auto coord = [&](int64_t i) {
    if (resolution == 1) return 0.0;
    return -extent + 2.0 * extent * static_cast<double>(i) /
                         static_cast<double>(resolution - 1);
  };
  for (int64_t ia = 0; ia < resolution; ++ia) {
    double alpha = coord(ia);
    for (int64_t ib = 0; ib < resolution; ++ib) {
      double beta = coord(ib);
      bool center = 2 * ia == resolution - 1 && 2 * ib == resolution - 1;
      if (center) {
        // The exact checkpoint parameters, no arithmetic applied.
        restore(blocks, snap);
      } else {
        int64_t o = 0;
        for (const ParamBlock& b : blocks) {
          for (int64_t j = 0; j < b.size; ++j) {
            b.data[j] = snap[o + j] + alpha * d1[o + j] + beta * d2[o + j];
          }
          o += b.size;
        }
      }
      double loss = target.batch_loss(0);
      res.losses[ia * resolution + ib] = loss;
      if (center) res.center_loss = loss;
    }
  }
  restore(blocks, snap);
  return res;
}

ModelLossTarget::ModelLossTarget(TransformerModel& model,
                                 const TokenizedCorpus& corpus,
                                 int64_t batch_size, int64_t num_batches,
                                 uint64_t seed)
    : model_(model),
      corpus_(corpus),
      batch_size_(batch_size),
      num_batches_(num_batches),
      seed_(seed) {
  if (batch_size < 1 || num_batches < 1) {
    throw ConfigError("loss target needs positive batch size and count");
  }
}

std::vector<ParamBlock> ModelLossTarget::blocks() {
  std::vector<ParamBlock> out;
  for (NamedParam& p : model_.params()) {
    out.push_back({p.name, p.tensor.data().data(), p.tensor.numel()});
  }
  return out;
}

double ModelLossTarget::batch_loss(int64_t index) {
  int64_t window = model_.config().context_length;
  std::vector<int32_t> batch = sample_batch(corpus_, seed_, index, batch_size_,
                                            window, /*validation=*/true);
  return model_.loss(batch, batch_size_, window).item();
}

double ModelLossTarget::batch_loss_and_grad(int64_t index,
                                            std::span<double> grad) {
  int64_t window = model_.config().context_length;
  std::vector<int32_t> batch = sample_batch(corpus_, seed_, index, batch_size_,
                                            window, /*validation=*/true);
  model_.zero_grad();
  Tensor loss = model_.loss(batch, batch_size_, window);
  backward(loss);
  int64_t off = 0;
  for (NamedParam& p : model_.params()) {
    const std::vector<double>* g = p.tensor.grad_if();
    int64_t sz = p.tensor.numel();
    if (off + sz > static_cast<int64_t>(grad.size())) {
      throw StateError("gradient buffer too small for the parameter set");
    }
    if (g) {
      std::memcpy(grad.data() + off, g->data(), sz * sizeof(double));
    } else {
      std::memset(grad.data() + off, 0, sz * sizeof(double));
    }
    off += sz;
  }
  model_.zero_grad();
  return loss.item();
}

// ===== analytic accounting =====

MemoryEstimate memory_estimate(const ModelConfig& cfg, int64_t batch,
                               int64_t seq, double bytes_per_element,
                               OptimizerKind opt, const MomentQuantConfig& mq) {
  cfg.validate();
  mq.validate();
  if (batch < 0 || seq < 0 || seq > cfg.context_length) {
    throw ConfigError("memory estimate needs 0 <= seq <= context_length");
  }
  if (bytes_per_element <= 0.0) {
    throw ConfigError("bytes_per_element must be > 0");
  }
  double bpe = bytes_per_element;
  double B = static_cast<double>(batch), T = static_cast<double>(seq);
  double d = static_cast<double>(cfg.d_model);
  double ff = static_cast<double>(cfg.d_ff_resolved());
  double L = static_cast<double>(cfg.n_layers);
  double h = static_cast<double>(cfg.n_heads);
  double V = static_cast<double>(cfg.vocab_size);

  MemoryEstimate est;
  double P = static_cast<double>(param_count(cfg));
  est.params_bytes = P * bpe;
  est.grads_bytes = P * bpe;

  if (opt == OptimizerKind::AdamW) {
    for (const auto& [name, shape] : param_inventory(cfg)) {
      double count = static_cast<double>(shape_numel(shape));
      bool quantizable = shape.size() >= 2;
      for (const auto& mcfg : {mq.first, mq.second}) {
        if (mcfg && quantizable) {
          double groups = static_cast<double>(quant_groups(shape, *mcfg));
          est.optimizer_bytes +=
              count * static_cast<double>(mcfg->bits) / 8.0 + groups * 2.0 * bpe;
        } else {
          est.optimizer_bytes += count * bpe;
        }
      }
    }
  }

  // Saved forward state per block: six [B,T,d] tensors (two layernorm
  // inputs, qkv input, q/k/v counted as three, attention context), hence
  // 8*BTd once q/k/v's three are included, plus gelu input and output
  // [B,T,ff], attention probabilities [B,h,T,T], and per-row layernorm
  // statistics. The final layernorm and head input add 2*BTd + 2*BT.
  double block_elems = 8.0 * B * T * d + 2.0 * B * T * ff + B * h * T * T +
                       4.0 * B * T;
  double act_elems = L * block_elems + 2.0 * B * T * d + 2.0 * B * T;
  est.activations_bytes = act_elems * bpe;
  est.logits_bytes = B * T * V * bpe;

  est.peak_backward_start = est.params_bytes + est.optimizer_bytes +
                            est.activations_bytes + 2.0 * est.logits_bytes;
  est.peak_backward_end = est.params_bytes + est.optimizer_bytes +
                          est.grads_bytes + block_elems * bpe;
  if (est.peak_backward_start >= est.peak_backward_end) {
    est.peak_bytes = est.peak_backward_start;
    est.peak_scenario = "backward_start";
  } else {
    est.peak_bytes = est.peak_backward_end;
    est.peak_scenario = "backward_end";
  }
  return est;
}

double linear_flop_fraction(const ModelConfig& cfg, int64_t seq) {
  cfg.validate();
  if (seq < 1 || seq > cfg.context_length) {
    throw ConfigError("flop fraction needs 1 <= seq <= context_length");
  }
  double d = static_cast<double>(cfg.d_model);
  double ff = static_cast<double>(cfg.d_ff_resolved());
  double L = static_cast<double>(cfg.n_layers);
  double V = static_cast<double>(cfg.vocab_size);
  double T = static_cast<double>(seq);
  // Multiply-accumulates per token: linear layers contribute qkv (3d*d),
  // the attention output projection (d*d), and the two MLP matrices
  // (2*d*ff) per block plus the head (d*V); attention score and context
  // products contribute T*d each per block.
  double linear = L * (4.0 * d * d + 2.0 * d * ff) + d * V;
  double attention = L * 2.0 * T * d;
  return linear / (linear + attention);
}

}  // namespace qtrain

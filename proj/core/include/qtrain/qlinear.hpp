#pragma once

#include <functional>
#include <optional>
#include <span>

#include "qtrain/quant.hpp"
#include "qtrain/tensor.hpp"

namespace qtrain {

// Which signals of a linear layer get fake-quantized. An absent config
// leaves that signal in full precision.
struct LayerQuantSpec {
  std::optional<QuantConfig> weight;      // W, per-tensor or per-channel
  std::optional<QuantConfig> activation;  // X, any granularity
  std::optional<QuantConfig> grad_out;    // dY, per-tensor or per-token
  // Diagnostic switch: also build dX from the quantized dY. The supported
  // configuration keeps dX in full precision; turning this on demonstrates
  // why (error compounds through depth).
  bool quantize_dx_path = false;

  void validate() const;
  bool any() const {
    return weight.has_value() || activation.has_value() || grad_out.has_value();
  }
};

// Linear layer y = quant(x) * quant(W)^T + b with quantizer assignments per
// LayerQuantSpec. W has shape [out_features, in_features], so per-channel
// weight groups along axis 0 follow output features.
//
// forward() returns a graph node whose backward implements:
//   dX = dY_real * What          (never sees the gradient quantizer)
//   dW = quant(dY)^T * Xhat
//   db = column sum of dY_real
// Backward state (Xhat, What) lives in the node built by forward, so a
// backward without a preceding forward cannot be expressed.
class QLinear {
 public:
  QLinear() = default;
  QLinear(int64_t in_features, int64_t out_features, LayerQuantSpec spec,
          bool with_bias = true);
  // Shares an externally owned [out,in] weight (tied embeddings). No bias.
  static QLinear tied(Tensor weight, LayerQuantSpec spec);

  // x [n, in] -> [n, out]
  Tensor forward(const Tensor& x);

  Tensor& weight() { return w_; }
  const Tensor& weight() const { return w_; }
  Tensor& bias() { return b_; }
  const Tensor& bias() const { return b_; }
  bool has_bias() const { return b_.defined(); }
  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }
  const LayerQuantSpec& spec() const { return spec_; }
  LayerQuantSpec& spec() { return spec_; }

  // Observers for diagnostics; both are copied into the graph when forward
  // runs, so they fire even if the layer is reconfigured afterwards.
  // on_input sees the raw input before any quantization.
  std::function<void(std::span<const double>, const Shape&)> on_input;
  // Fires once per backward when grad_out is set, with the squared L2 error
  // ||dY - quant(dY)||^2 and the element count.
  std::function<void(double err_sq, int64_t count)> on_grad_quant_error;

 private:
  int64_t in_ = 0, out_ = 0;
  LayerQuantSpec spec_;
  Tensor w_, b_;
};

}  // namespace qtrain

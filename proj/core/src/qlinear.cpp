#include "qtrain/qlinear.hpp"

#include <Eigen/Dense>

#include "qtrain/errors.hpp"
#include "qtrain/ops.hpp"

namespace qtrain {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

void LayerQuantSpec::validate() const {
  if (weight) {
    weight->validate();
    if (weight->granularity == Granularity::PerToken) {
      throw ConfigError("weights cannot use per-token quantization");
    }
  }
  if (activation) activation->validate();
  if (grad_out) {
    grad_out->validate();
    if (grad_out->granularity == Granularity::PerChannel) {
      throw ConfigError(
          "output gradients support per-tensor or per-token quantization");
    }
  }
}

QLinear::QLinear(int64_t in_features, int64_t out_features, LayerQuantSpec spec,
                 bool with_bias)
    : in_(in_features), out_(out_features), spec_(std::move(spec)) {
  if (in_ <= 0 || out_ <= 0) {
    throw ConfigError("linear layer dims must be positive");
  }
  spec_.validate();
  w_ = Tensor::leaf({out_, in_}, true);
  if (with_bias) b_ = Tensor::leaf({out_}, true);
}

QLinear QLinear::tied(Tensor weight, LayerQuantSpec spec) {
  if (weight.rank() != 2) {
    throw ConfigError("tied linear weight must be 2-D");
  }
  QLinear l;
  l.out_ = weight.dim(0);
  l.in_ = weight.dim(1);
  l.spec_ = std::move(spec);
  l.spec_.validate();
  l.w_ = std::move(weight);
  return l;
}

Tensor QLinear::forward(const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != in_) {
    throw StateError("linear expects input [n," + std::to_string(in_) +
                     "], got " + shape_str(x.shape()));
  }
  int64_t n = x.dim(0), in = in_, out = out_;
  if (on_input) {
    on_input(std::span<const double>(x.data().data(), x.data().size()),
             x.shape());
  }

  // The fake-quantize node values pin the exact operands the layer
  // multiplies, and the straight-through estimator routes their gradients
  // back to x / W unchanged.
  Tensor xq = spec_.activation ? fake_quantize(x, *spec_.activation) : x;
  Tensor wq = spec_.weight ? fake_quantize(w_, *spec_.weight) : w_;
  Tensor wt = transpose(wq);  // [in, out]

  std::vector<double> y(static_cast<size_t>(n * out));
  {
    CMapM A(xq.data().data(), n, in), B(wt.data().data(), in, out);
    MapM C(y.data(), n, out);
    C.noalias() = A * B;
  }

  std::optional<QuantConfig> grad_cfg = spec_.grad_out;
  bool qdx = spec_.quantize_dx_path;
  auto err_hook = on_grad_quant_error;
  auto an = xq.node();
  auto bn = wt.node();

  // This node is a plain matmul except that the weight-bound gradient can be
  // built from a quantized dY. With grad quantization off, the backward
  // expressions are the same ones the plain matmul uses, so results agree
  // bit for bit; dX always consumes the same dY expression unless the
  // quantize_dx_path diagnostic deliberately poisons it.
  Tensor out_t = custom_grad(
      {xq, wt}, std::move(y), {n, out},
      [an, bn, grad_cfg, qdx, err_hook, n, in, out](
          std::span<const double> dy, const std::vector<double*>& dst) {
        std::vector<double> dyq;
        if (grad_cfg) {
          dyq = fake_quantize_span(dy, {n, out}, *grad_cfg);
          if (err_hook) {
            double err_sq = 0.0;
            for (size_t i = 0; i < dy.size(); ++i) {
              double e = dy[i] - dyq[i];
              err_sq += e * e;
            }
            err_hook(err_sq, static_cast<int64_t>(dy.size()));
          }
        }
        CMapM A(an->value.data(), n, in), B(bn->value.data(), in, out);
        if (dst[0]) {
          const double* src = (qdx && grad_cfg) ? dyq.data() : dy.data();
          CMapM dC(src, n, out);
          MapM dA(dst[0], n, in);
          dA.noalias() += dC * B.transpose();
        }
        if (dst[1]) {
          const double* src = grad_cfg ? dyq.data() : dy.data();
          CMapM dC(src, n, out);
          MapM dB(dst[1], in, out);
          dB.noalias() += A.transpose() * dC;
        }
      },
      "qlinear_matmul");
  if (has_bias()) out_t = add_rowvec(out_t, b_);
  return out_t;
}

}  // namespace qtrain

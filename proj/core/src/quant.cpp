#include "qtrain/quant.hpp"

#include <cmath>
#include <limits>

#include "qtrain/errors.hpp"
#include "qtrain/ops.hpp"

namespace qtrain {

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) {
    throw ConfigError("quantization bits must be in [2,8], got " +
                      std::to_string(bits));
  }
  if (granularity == Granularity::PerChannel && channel_axis < 0) {
    throw ConfigError("channel axis must be non-negative");
  }
}

void QuantConfig::validate_for(const Shape& shape) const {
  validate();
  if (granularity == Granularity::PerChannel &&
      channel_axis >= static_cast<int>(shape.size())) {
    throw ConfigError("channel axis " + std::to_string(channel_axis) +
                      " out of range for shape " + shape_str(shape));
  }
  if (granularity == Granularity::PerToken && shape.size() < 2) {
    throw ConfigError("per-token quantization needs rank >= 2, got shape " +
                      shape_str(shape));
  }
}

std::string granularity_str(const QuantConfig& cfg) {
  switch (cfg.granularity) {
    case Granularity::PerTensor:
      return "tensor";
    case Granularity::PerChannel:
      return "channel:" + std::to_string(cfg.channel_axis);
    case Granularity::PerToken:
      return "token";
  }
  return "?";
}

std::string mode_str(QuantMode mode) {
  return mode == QuantMode::Symmetric ? "symmetric" : "asymmetric";
}

std::string QuantConfig::describe() const {
  return std::to_string(bits) + "-bit " + granularity_str(*this) + " " +
         mode_str(mode);
}

QuantRange quant_range(int bits) {
  QuantConfig probe;
  probe.bits = bits;
  probe.validate();
  int64_t half = int64_t{1} << (bits - 1);
  return {-half, half - 1};
}

int64_t quant_groups(const Shape& shape, const QuantConfig& cfg) {
  cfg.validate_for(shape);
  switch (cfg.granularity) {
    case Granularity::PerTensor:
      return 1;
    case Granularity::PerChannel:
      return shape[cfg.channel_axis];
    case Granularity::PerToken:
      return shape_numel(shape) / shape.back();
  }
  return 1;
}

int64_t quant_group_of(const Shape& shape, const QuantConfig& cfg,
                       int64_t flat_index) {
  switch (cfg.granularity) {
    case Granularity::PerTensor:
      return 0;
    case Granularity::PerChannel: {
      int64_t stride = 1;
      for (size_t i = cfg.channel_axis + 1; i < shape.size(); ++i)
        stride *= shape[i];
      return (flat_index / stride) % shape[cfg.channel_axis];
    }
    case Granularity::PerToken:
      return flat_index / shape.back();
  }
  return 0;
}

void compute_scale(std::span<const double> x, const Shape& shape,
                   const QuantConfig& cfg, std::vector<double>& scales,
                   std::vector<int32_t>& zero_points) {
  cfg.validate_for(shape);
  if (static_cast<int64_t>(x.size()) != shape_numel(shape)) {
    throw StateError("quantizer input size does not match shape " +
                     shape_str(shape));
  }
  int64_t groups = quant_groups(shape, cfg);
  QuantRange range = quant_range(cfg.bits);
  double hi = static_cast<double>(range.hi);

  std::vector<double> max_abs(groups, 0.0);
  std::vector<double> min_val(groups, std::numeric_limits<double>::infinity());
  bool asym = cfg.mode == QuantMode::Asymmetric;
  for (int64_t i = 0; i < static_cast<int64_t>(x.size()); ++i) {
    double v = x[i];
    if (!std::isfinite(v)) {
      throw DataError("quantizer input contains NaN or Inf at index " +
                      std::to_string(i));
    }
    int64_t g = quant_group_of(shape, cfg, i);
    double a = std::fabs(v);
    if (a > max_abs[g]) max_abs[g] = a;
    if (asym && v < min_val[g]) min_val[g] = v;
  }

  scales.assign(groups, 1.0);
  zero_points.assign(groups, 0);
  for (int64_t g = 0; g < groups; ++g) {
    if (max_abs[g] > 0.0) scales[g] = max_abs[g] / hi;
    if (asym) {
      zero_points[g] = static_cast<int32_t>(std::round(min_val[g] / scales[g]));
    }
  }
}

QuantizedTensor quantize(std::span<const double> x, const Shape& shape,
                         const QuantConfig& cfg) {
  QuantizedTensor q;
  q.config = cfg;
  q.shape = shape;
  compute_scale(x, shape, cfg, q.scales, q.zero_points);
  QuantRange range = quant_range(cfg.bits);
  q.ints.resize(x.size());
  for (int64_t i = 0; i < static_cast<int64_t>(x.size()); ++i) {
    int64_t g = quant_group_of(shape, cfg, i);
    double r = std::round(x[i] / q.scales[g]);
    int64_t code = static_cast<int64_t>(r) - q.zero_points[g];
    if (code < range.lo) code = range.lo;
    if (code > range.hi) code = range.hi;
    q.ints[i] = static_cast<int32_t>(code);
  }
  return q;
}

std::vector<double> dequantize(const QuantizedTensor& q) {
  std::vector<double> out(q.ints.size());
  for (int64_t i = 0; i < static_cast<int64_t>(q.ints.size()); ++i) {
    int64_t g = quant_group_of(q.shape, q.config, i);
    out[i] = q.scales[g] * (q.ints[i] + q.zero_points[g]);
  }
  return out;
}

std::vector<double> fake_quantize_span(std::span<const double> x,
                                       const Shape& shape,
                                       const QuantConfig& cfg) {
  return dequantize(quantize(x, shape, cfg));
}

Tensor fake_quantize(const Tensor& x, const QuantConfig& cfg) {
  std::vector<double> value = fake_quantize_span(
      std::span<const double>(x.data().data(), x.data().size()), x.shape(), cfg);
  // Straight-through estimator: the gradient ignores rounding and clipping
  // entirely and flows to x unchanged.
  return custom_grad(
      {x}, std::move(value), x.shape(),
      [](std::span<const double> up, const std::vector<double*>& dst) {
        if (!dst[0]) return;
        for (size_t i = 0; i < up.size(); ++i) dst[0][i] += up[i];
      },
      "fake_quantize");
}

double zero_bin_fraction(const QuantizedTensor& q) {
  if (q.ints.empty()) return 0.0;
  int64_t zeros = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(q.ints.size()); ++i) {
    int64_t g = quant_group_of(q.shape, q.config, i);
    if (q.ints[i] == -q.zero_points[g]) ++zeros;
  }
  return static_cast<double>(zeros) / static_cast<double>(q.ints.size());
}

}  // namespace qtrain

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qtrain/tensor.hpp"

// Linear (uniform affine) quantization.
//
// For each group g with scale s and zero point z:
//   q   = clip(round(x / s) - z, lo, hi)     round half away from zero
//   xhat = s * (q + z)
// with [lo, hi] = [-2^(b-1), 2^(b-1)-1]. The scale is max|x| / hi over the
// group (1.0 when the group is all zeros, so zeros stay exact). Symmetric
// mode pins z = 0; asymmetric mode sets z = round(min(x) / s) with the same
// scale, which shifts the usable range toward one-sided distributions.

namespace qtrain {

enum class Granularity {
  PerTensor,   // one group for the whole tensor
  PerChannel,  // one group per index along a chosen axis
  PerToken,    // one group per row of the flattened leading axes
};

enum class QuantMode { Symmetric, Asymmetric };

struct QuantConfig {
  int bits = 8;  // 2..8
  Granularity granularity = Granularity::PerTensor;
  int channel_axis = 0;  // only meaningful for PerChannel
  QuantMode mode = QuantMode::Symmetric;

  // Throws ConfigError for bits outside [2,8] or a negative axis.
  void validate() const;
  // Also checks the axis against the rank and PerToken against rank >= 2.
  void validate_for(const Shape& shape) const;
  // e.g. "4-bit channel:0 asymmetric"
  std::string describe() const;
};

// "tensor" | "channel:<axis>" | "token", the grammar used in config files.
std::string granularity_str(const QuantConfig& cfg);
std::string mode_str(QuantMode mode);

struct QuantRange {
  int64_t lo;
  int64_t hi;
};
QuantRange quant_range(int bits);

struct QuantizedTensor {
  std::vector<int32_t> ints;         // same row-major layout as the source
  std::vector<double> scales;        // one per group
  std::vector<int32_t> zero_points;  // one per group, all 0 when symmetric
  QuantConfig config;
  Shape shape;
  int64_t group_count() const { return static_cast<int64_t>(scales.size()); }
};

// Number of groups the config induces on the shape.
int64_t quant_groups(const Shape& shape, const QuantConfig& cfg);
// Group owning flat (row-major) element index.
int64_t quant_group_of(const Shape& shape, const QuantConfig& cfg,
                       int64_t flat_index);

// Per-group scales and zero points. NaN/Inf input throws DataError.
void compute_scale(std::span<const double> x, const Shape& shape,
                   const QuantConfig& cfg, std::vector<double>& scales,
                   std::vector<int32_t>& zero_points);

QuantizedTensor quantize(std::span<const double> x, const Shape& shape,
                         const QuantConfig& cfg);
std::vector<double> dequantize(const QuantizedTensor& q);

// dequantize(quantize(x)) without touching the graph.
std::vector<double> fake_quantize_span(std::span<const double> x,
                                       const Shape& shape,
                                       const QuantConfig& cfg);

// Graph op: value is the fake-quantized x, gradient is straight-through
// (passed to x unchanged, no clip masking).
Tensor fake_quantize(const Tensor& x, const QuantConfig& cfg);

// Fraction of elements whose integer code equals the negated zero point,
// i.e. elements that dequantize to exactly zero.
double zero_bin_fraction(const QuantizedTensor& q);

}  // namespace qtrain

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "qtrain/tensor.hpp"

// Differentiable primitives. All take row-major tensors and return a new
// graph node; backward rules add into parent gradient buffers. Shape
// violations throw StateError, never crash.

namespace qtrain {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Batched over leading dim: a [g,m,k], b [g,k,n] -> [g,m,n]. trans_a /
// trans_b transpose the trailing two dims of the respective input.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                      bool trans_b = false);

// 2-D transpose.
Tensor transpose(const Tensor& x);

// Same element count, new shape. Data is copied; layout is row-major.
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& x, double c);

// [n,d] + broadcast row vector [d].
Tensor add_rowvec(const Tensor& x, const Tensor& v);

// Stack x on itself `times` times along dim 0: [r,...] -> [times*r,...].
Tensor tile_rows(const Tensor& x, int64_t times);

// out[i,:] = table[ids[i],:]. Backward scatter-adds into table rows.
Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& ids);

// Columns [c0, c1) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);

// [batch*seq, heads*hd] -> [batch*heads, seq, hd] and its inverse.
Tensor split_heads(const Tensor& x, int64_t batch, int64_t seq, int64_t heads);
Tensor merge_heads(const Tensor& x, int64_t batch, int64_t seq, int64_t heads);

// Adds -1e30 to entries above the diagonal of each [t,t] score matrix in a
// [g,t,t] stack. exp(-1e30 + finite) underflows to exactly 0 after softmax,
// so masked positions contribute nothing, bit for bit.
Tensor causal_mask(const Tensor& scores);

// Softmax over the last axis.
Tensor softmax_lastdim(const Tensor& x);

// Tanh-approximation GELU.
Tensor gelu(const Tensor& x);
double gelu_scalar(double x);

// Layer normalization over the last axis with learned gain/bias of shape
// [d]. eps sits inside the square root.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);

// Mean token-level cross entropy from logits [n,v] against n target ids.
// Log-sum-exp is max-shifted for stability.
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int32_t>& targets);

// Escape hatch for ops with hand-written gradients (the quantizer's
// straight-through estimator uses it). `rule` receives the upstream gradient
// and one destination pointer per parent, nullptr where the parent does not
// need a gradient; it must ADD into the destinations.
using CustomBackward = std::function<void(
    std::span<const double> upstream, const std::vector<double*>& parent_grads)>;
Tensor custom_grad(const std::vector<Tensor>& parents,
                   std::vector<double> value, Shape shape, CustomBackward rule,
                   const char* op_name = "custom");

}  // namespace qtrain

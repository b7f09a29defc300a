#pragma once

#include <span>
#include <vector>

#include "kpop/tensor.hpp"

namespace kpop::nn {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
// mean((a - b)^2); shapes must match exactly.
Tensor mse(const Tensor& a, const Tensor& b);
// Mean negative log-likelihood of labels under softmax(logits), logits [n, classes].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Batched matrix product. Accepts [m,k]x[k,n], [b,m,k]x[b,k,n] and mixes
/// where either batch is 1 or absent (broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in, out] (+ bias[out]). Right-multiplication by the weight.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

/// Softmax over the last axis, stabilised by max subtraction.
Tensor softmax_lastdim(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> order);
Tensor concat(std::span<const Tensor> parts, int axis);
inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}
// [1, ...] -> [b, ...]
Tensor expand_batch(const Tensor& x, std::int64_t b);

/// 2-D convolution, NCHW input, weight [out, in, kh, kw], stride 1, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding);
Tensor avg_pool2(const Tensor& x);
Tensor upsample2(const Tensor& x);

void check_finite(const Tensor& x, const char* where);

}  // namespace kpop::nn

#pragma once

#include <cstddef>
#include <vector>

#include "mixssm/tensor.hpp"

// Primitive operation catalogue. Every op records a tape node when an input
// requires grad, and every op rejects non-finite results.
//
// Broadcasting (add, sub, mul, maximum): shapes are aligned at the trailing
// axis; each aligned pair of extents must be equal or one of them must be 1.
// Missing leading axes count as 1. Nothing else broadcasts.

namespace mixssm {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise max; ties send the gradient to `a`.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset);

/// (..., M, K) x (K, N) -> (..., M, N), or batched (B..., M, K) x (B..., K, N)
/// with identical leading extents.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

enum class Padding { same, valid };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::same;
  /// 1 (dense) or the input channel count (depthwise, one filter per channel).
  std::size_t groups = 1;
};

/// Channels-last 2-D convolution. x: (..., H, W, Cin); weight: (Kh, Kw, Cin / groups, Cout);
/// bias: (Cout) or undefined. SAME padding follows the ceil(H / stride) rule with
/// the extra pad row/column at the bottom/right.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions options = {});

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);
/// Half-open range [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// out[..., k, ...] = x[..., index[k], ...] along `axis`.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::size_t>& index);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);
/// Natural log; requires strictly positive input.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
/// Requires non-negative input.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
/// max(x, floor); gradient passes where x > floor.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor);

/// Normalizes over the last axis, then applies gamma * x_hat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim = false);
/// Gradient goes to the first maximal element.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

}  // namespace mixssm

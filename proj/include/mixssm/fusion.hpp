#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mixssm/random.hpp"
#include "mixssm/tensor.hpp"

namespace mixssm {

enum class Pooling { average, max, l2, stochastic };

/// How branch outputs are combined: the learned per-channel softmax gate, or
/// a parameter-free elementwise reduction across branches.
enum class Aggregation { selective, max, average };

/// Pooling randomness is explicit: stochastic pooling samples only when
/// `training` is set, and then requires `rng`.
struct PoolContext {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
struct SelectiveParams {
  std::size_t strategies = 4;
  std::size_t reduction = 4;
  /// Side of the depthwise SAME convolution applied before pooling; 1 skips it.
  std::size_t kernel = 3;
  Pooling pooling = Pooling::average;
  Aggregation mode = Aggregation::selective;

  Tensor<T> dw_weight;  // (k, k, 1, C), only when kernel > 1
  Tensor<T> dw_bias;    // (C)
  Tensor<T> w1;         // (C, C / reduction)
  Tensor<T> b1;         // (C / reduction)
  Tensor<T> w2;         // (C / reduction, C * strategies); column c * strategies + m
  Tensor<T> b2;         // (C * strategies)
};

/// Parameters exist only in selective mode. Throws ConfigError when
/// strategies < 1, reduction does not divide channels, or kernel is even.
template <typename T>
SelectiveParams<T> init_selective(std::size_t channels, std::size_t strategies, std::size_t kernel,
                                  std::size_t reduction, Pooling pooling, Aggregation mode, Rng& rng);

/// Elementwise sum of same-shape branch outputs.
template <typename T>
Tensor<T> fuse_sum(const std::vector<Tensor<T>>& branches);

/// (..., H, W, C) -> (..., C).
///   average: spatial mean;  max: spatial maximum;
///   l2: sqrt(spatial mean of squares + 1e-12);
///   stochastic: per channel, positions weighted by a softmax over the
///   activations; training draws one position, evaluation returns the
///   expectation.
template <typename T>
Tensor<T> pool_global(const Tensor<T>& f, Pooling method, const PoolContext& ctx = {});

/// Weight MLP on pooled features g (..., C) -> softmax over strategies, (..., C, n).
template <typename T>
Tensor<T> selective_weights(const Tensor<T>& g, const SelectiveParams<T>& p);

/// Sum over m of weights[..., :, m] (broadcast over H, W) times branch m.
template <typename T>
Tensor<T> selective_combine(const std::vector<Tensor<T>>& branches, const Tensor<T>& weights);

/// Full module in the configured mode. When `weights_out` is non-null and the
/// mode is selective, it receives the per-channel strategy weights.
template <typename T>
Tensor<T> selective_module(const std::vector<Tensor<T>>& branches, const SelectiveParams<T>& p,
                           const PoolContext& ctx = {}, Tensor<T>* weights_out = nullptr);

template <typename T, typename F>
void for_each_parameter(const SelectiveParams<T>& p, const std::string& prefix, F&& fn) {
  if (p.dw_weight.defined()) {
    fn(prefix + "dw_weight", p.dw_weight);
    fn(prefix + "dw_bias", p.dw_bias);
  }
  if (p.w1.defined()) {
    fn(prefix + "w1", p.w1);
    fn(prefix + "b1", p.b1);
    fn(prefix + "w2", p.w2);
    fn(prefix + "b2", p.b2);
  }
}

std::string to_string(Pooling p);
std::string to_string(Aggregation a);
Pooling parse_pooling(const std::string& s);
Aggregation parse_aggregation(const std::string& s);

}  // namespace mixssm

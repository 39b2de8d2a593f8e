#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mixssm/random.hpp"
#include "mixssm/tensor.hpp"

// The four visual encoding branches. Every branch maps a channels-last
// feature map (..., H, W, C) to a tensor of the same shape; leading axes are
// treated as batch.

namespace mixssm {

enum class Activation { identity, gelu, silu };

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act);

// ---------------------------------------------------------------------------
// Convolution branch

template <typename T>
struct ConvBranchParams {
  Tensor<T> weight;  // (Kh, Kw, C, C)
  Tensor<T> bias;    // (C)
  Activation activation = Activation::gelu;
};

template <typename T>
ConvBranchParams<T> init_conv_branch(std::size_t channels, Rng& rng, std::size_t kernel = 3);

/// SAME, stride-1 convolution plus bias, then the configured activation.
template <typename T>
Tensor<T> conv_branch(const Tensor<T>& v, const ConvBranchParams<T>& p);

// ---------------------------------------------------------------------------
// Multi-head self-attention branch

/// Head h owns columns [h*d, (h+1)*d) of the query/key/value projections.
template <typename T>
struct MSAParams {
  Tensor<T> w_query;  // (C, heads*d)
  Tensor<T> w_key;    // (C, heads*d)
  Tensor<T> w_value;  // (C, heads*d)
  Tensor<T> w_out;    // (heads*d, C)
  std::size_t heads = 1;
};

template <typename T>
MSAParams<T> init_msa_branch(std::size_t channels, std::size_t heads, Rng& rng);

/// Receives the attention matrices, (batch, heads, L, L), when non-null.
template <typename T>
struct AttentionTrace {
  Tensor<T> weights;
};

/// Full (non-windowed) attention over the H*W tokens of each feature map.
template <typename T>
Tensor<T> msa_branch(const Tensor<T>& v, const MSAParams<T>& p, AttentionTrace<T>* trace = nullptr);

// ---------------------------------------------------------------------------
// Channel MLP branch

template <typename T>
struct MLPBranchParams {
  Tensor<T> w1;  // (C, hidden)
  Tensor<T> b1;  // (hidden)
  Tensor<T> w2;  // (hidden, C)
  Tensor<T> b2;  // (C)
  Activation activation = Activation::gelu;
};

template <typename T>
MLPBranchParams<T> init_mlp_branch(std::size_t channels, std::size_t hidden, Rng& rng);

template <typename T>
Tensor<T> mlp_branch(const Tensor<T>& v, const MLPBranchParams<T>& p);

// ---------------------------------------------------------------------------
// Selective state-space branch

/// Input-dependent projections and state parameters for one scan direction.
/// The state matrix is stored as a_log with A = -exp(a_log), which keeps
/// every diagonal entry strictly negative.
template <typename T>
struct ScanParams {
  Tensor<T> delta_weight;  // (C, C)
  Tensor<T> delta_bias;    // (C)
  Tensor<T> b_weight;      // (C, N)
  Tensor<T> c_weight;      // (C, N)
  Tensor<T> a_log;         // (C, N)
  Tensor<T> d_skip;        // (C)
};

template <typename T>
struct SSMParams {
  std::size_t state_dim = 8;
  /// One entry shared by all four directions, or four (one per direction).
  std::vector<ScanParams<T>> directions;
  Tensor<T> out_weight;  // (C, C)
};

template <typename T>
SSMParams<T> init_ssm_branch(std::size_t channels, std::size_t state_dim, bool separate_directions, Rng& rng);

/// Unrolls (..., H, W, C) into four (..., H*W, C) sequences: row-major,
/// reversed row-major, column-major, reversed column-major.
template <typename T>
std::array<Tensor<T>, 4> cross_scan(const Tensor<T>& v);

/// Inverse-reorders each of the four sequences onto the H x W grid and sums them.
template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& sequences, std::size_t height, std::size_t width);

/// Discretized selective recurrence with explicit per-token parameters.
///   u, delta: (..., L, C);  a: (C, N) (negative for a stable scan);
///   b, c: (..., L, N);  d_skip: (C).
/// Per channel, h_0 = 0,
///   h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * u_t
///   y_t = <c_t, h_t> + d_skip * u_t.
/// Evaluated in blocks of `block` tokens: each block scans from a zero
/// state, then block carries are propagated in sequence.
template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                              const Tensor<T>& c, const Tensor<T>& d_skip, std::size_t block = 16);

/// Projects tokens u (..., L, C) to step sizes and B/C vectors, then scans.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const ScanParams<T>& p);

template <typename T>
Tensor<T> ssm_branch(const Tensor<T>& v, const SSMParams<T>& p);

/// Row-major order of the four traversals as indices into the H*W grid.
std::array<std::vector<std::size_t>, 4> scan_orders(std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Parameter enumeration. Visitors receive (name, tensor) in a fixed order;
// tensors are handles, so a visitor may copy one to update it in place.

template <typename T, typename F>
void for_each_parameter(const ConvBranchParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + "weight", p.weight);
  fn(prefix + "bias", p.bias);
}

template <typename T, typename F>
void for_each_parameter(const MSAParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + "w_query", p.w_query);
  fn(prefix + "w_key", p.w_key);
  fn(prefix + "w_value", p.w_value);
  fn(prefix + "w_out", p.w_out);
}

template <typename T, typename F>
void for_each_parameter(const MLPBranchParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + "w1", p.w1);
  fn(prefix + "b1", p.b1);
  fn(prefix + "w2", p.w2);
  fn(prefix + "b2", p.b2);
}

template <typename T, typename F>
void for_each_parameter(const SSMParams<T>& p, const std::string& prefix, F&& fn) {
  for (std::size_t k = 0; k < p.directions.size(); ++k) {
    const auto& d = p.directions[k];
    const std::string dir = prefix + "dir" + std::to_string(k) + ".";
    fn(dir + "delta_weight", d.delta_weight);
    fn(dir + "delta_bias", d.delta_bias);
    fn(dir + "b_weight", d.b_weight);
    fn(dir + "c_weight", d.c_weight);
    fn(dir + "a_log", d.a_log);
    fn(dir + "d_skip", d.d_skip);
  }
  fn(prefix + "out_weight", p.out_weight);
}

/// Flat list of parameter handles, in visiting order.
template <typename T, typename P>
std::vector<Tensor<T>> parameter_list(const P& p) {
  std::vector<Tensor<T>> out;
  for_each_parameter(p, "", [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

}  // namespace mixssm

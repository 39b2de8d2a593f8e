#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mixssm/encoders.hpp"
#include "mixssm/fusion.hpp"
#include "mixssm/tensor.hpp"

namespace mixssm {

/// Canonical branch order; enabled branches feed the selective module in this order.
enum class Branch { ssm, conv, mlp, msa };

std::string to_string(Branch b);
/// Accepts "ssm", "conv" (or "cnn"), "mlp", "msa".
Branch parse_branch(const std::string& s);

struct SelectiveConfig {
  std::size_t kernel = 3;
  Pooling pooling = Pooling::average;
  Aggregation mode = Aggregation::selective;
  std::size_t reduction = 4;

  bool operator==(const SelectiveConfig&) const = default;
};

struct ModelConfig {
  std::size_t image_height = 224;
  std::size_t image_width = 224;
  std::size_t in_channels = 3;
  std::size_t patch_size = 4;
  std::vector<std::size_t> depths{2, 2, 4, 2};
  std::vector<std::size_t> channels{32, 64, 128, 256};
  /// Attention heads per stage; empty means channels / 16 (at least 1).
  std::vector<std::size_t> heads;
  std::vector<Branch> branches{Branch::ssm, Branch::conv, Branch::mlp, Branch::msa};
  std::size_t ssm_state = 8;
  bool ssm_separate_directions = false;
  std::size_t mlp_ratio = 2;
  std::size_t conv_kernel = 3;
  SelectiveConfig selective;
  std::size_t num_classes = 102;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t stage_heads(std::size_t stage) const;
  bool has_branch(Branch b) const;

  bool operator==(const ModelConfig&) const = default;
};

/// 224x224 input, depths [2,2,4,2], channels [32,64,128,256].
ModelConfig default_config();
/// 32x32 input, depths [1,1,2,1], channels [16,32,64,128], 4 classes.
ModelConfig desk_config();

/// The eight branch subsets of the ablation table, full model first.
std::vector<std::pair<std::string, std::vector<Branch>>> ablation_rows();

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct PatchEmbedParams {
  Tensor<T> weight;  // (P, P, in_channels, C)
  Tensor<T> bias;    // (C)
  LayerNormParams<T> norm;
};

template <typename T>
struct BlockParams {
  LayerNormParams<T> norm;
  std::optional<SSMParams<T>> ssm;
  std::optional<ConvBranchParams<T>> conv;
  std::optional<MLPBranchParams<T>> mlp;
  std::optional<MSAParams<T>> msa;
  SelectiveParams<T> selective;
};

template <typename T>
struct MergeParams {
  LayerNormParams<T> norm;  // over 4C
  Tensor<T> weight;         // (4C, 2C)
};

template <typename T>
struct StageParams {
  std::vector<BlockParams<T>> blocks;
  std::optional<MergeParams<T>> merge;  // absent after the last stage
};

template <typename T>
struct Model {
  ModelConfig config;
  PatchEmbedParams<T> embed;
  std::vector<StageParams<T>> stages;
  LayerNormParams<T> head_norm;
  Tensor<T> head_weight;  // (C_last, num_classes)
  Tensor<T> head_bias;    // (num_classes)
};

/// Deterministic in config.seed. Each block and branch draws from its own
/// forked stream, so toggling a branch leaves the others' initial values intact.
template <typename T>
Model<T> init_model(const ModelConfig& config);

/// Feature-map shape entering each stage: the embedding output, then each merged map.
struct ForwardTrace {
  std::vector<Shape> shapes;
};

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& p, std::size_t patch);

/// Runs every enabled branch on U and fuses them.
template <typename T>
Tensor<T> mix_branches(const Tensor<T>& u, const BlockParams<T>& p, const PoolContext& ctx = {});

/// V + mix_branches(layer_norm(V)).
template <typename T>
Tensor<T> mix_ssm_block(const Tensor<T>& v, const BlockParams<T>& p, const PoolContext& ctx = {});

/// (..., H, W, C) -> (..., H/2, W/2, 2C): 2x2 neighbourhoods concatenated in
/// the order (0,0), (1,0), (0,1), (1,1), normalized, projected without bias.
template <typename T>
Tensor<T> patch_merging(const Tensor<T>& v, const MergeParams<T>& p);

/// Images (B, H, W, in_channels) or (H, W, in_channels) -> logits (B, K) or (K).
template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images, const PoolContext& ctx = {},
                         ForwardTrace* trace = nullptr);

/// Softmax of forward_logits over classes.
template <typename T>
Tensor<T> forward_classify(const Model<T>& model, const Tensor<T>& images, const PoolContext& ctx = {});

template <typename T, typename F>
void for_each_parameter(const LayerNormParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + "gamma", p.gamma);
  fn(prefix + "beta", p.beta);
}

template <typename T, typename F>
void for_each_parameter(const BlockParams<T>& p, const std::string& prefix, F&& fn) {
  for_each_parameter(p.norm, prefix + "norm.", fn);
  if (p.ssm) for_each_parameter(*p.ssm, prefix + "ssm.", fn);
  if (p.conv) for_each_parameter(*p.conv, prefix + "conv.", fn);
  if (p.mlp) for_each_parameter(*p.mlp, prefix + "mlp.", fn);
  if (p.msa) for_each_parameter(*p.msa, prefix + "msa.", fn);
  for_each_parameter(p.selective, prefix + "selective.", fn);
}

/// Visits every parameter under a stable dotted name such as
/// "stages.0.blocks.1.ssm.dir0.a_log".
template <typename T, typename F>
void for_each_parameter(const Model<T>& m, F&& fn) {
  fn(std::string("embed.weight"), m.embed.weight);
  fn(std::string("embed.bias"), m.embed.bias);
  for_each_parameter(m.embed.norm, "embed.norm.", fn);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    const std::string stage = "stages." + std::to_string(s) + ".";
    for (std::size_t b = 0; b < m.stages[s].blocks.size(); ++b) {
      for_each_parameter(m.stages[s].blocks[b], stage + "blocks." + std::to_string(b) + ".", fn);
    }
    if (m.stages[s].merge) {
      for_each_parameter(m.stages[s].merge->norm, stage + "merge.norm.", fn);
      fn(stage + "merge.weight", m.stages[s].merge->weight);
    }
  }
  for_each_parameter(m.head_norm, "head.norm.", fn);
  fn(std::string("head.weight"), m.head_weight);
  fn(std::string("head.bias"), m.head_bias);
}

template <typename T>
std::vector<Tensor<T>> model_parameters(const Model<T>& m) {
  std::vector<Tensor<T>> out;
  for_each_parameter(m, [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::size_t parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  for_each_parameter(m, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

/// Parameter counts grouped as embed, ssm, conv, mlp, msa, selective, norm,
/// merge, head. Every group is listed, including empty ones; the counts sum
/// to parameter_count.
template <typename T>
std::vector<std::pair<std::string, std::size_t>> module_parameter_counts(const Model<T>& m);

}  // namespace mixssm

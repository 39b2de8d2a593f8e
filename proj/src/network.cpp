#include "mixssm/network.hpp"

#include <algorithm>

#include "mixssm/errors.hpp"
#include "mixssm/ops.hpp"

namespace mixssm {
namespace {

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
LayerNormParams<T> init_norm(std::size_t channels) {
  return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::zeros({channels}, true)};
}

template <typename T>
Tensor<T> apply_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta);
}

std::string field_error(const std::string& field, const std::string& what) { return "model." + field + ": " + what; }

}  // namespace

std::string to_string(Branch b) {
  switch (b) {
    case Branch::ssm:
      return "ssm";
    case Branch::conv:
      return "conv";
    case Branch::mlp:
      return "mlp";
    case Branch::msa:
      return "msa";
  }
  return "?";
}

Branch parse_branch(const std::string& s) {
  if (s == "ssm") return Branch::ssm;
  if (s == "conv" || s == "cnn") return Branch::conv;
  if (s == "mlp") return Branch::mlp;
  if (s == "msa") return Branch::msa;
  throw ConfigError("unknown branch '" + s + "' (expected ssm, conv, mlp, msa)");
}

std::size_t ModelConfig::stage_heads(std::size_t stage) const {
  if (!heads.empty()) return heads.at(stage);
  return std::max<std::size_t>(1, channels.at(stage) / 16);
}

bool ModelConfig::has_branch(Branch b) const { return std::find(branches.begin(), branches.end(), b) != branches.end(); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) { throw ConfigError(field_error(field, what)); };
  if (in_channels == 0) fail("in_channels", "must be positive");
  if (patch_size == 0) fail("patch_size", "must be positive");
  if (image_height == 0 || image_height % patch_size != 0) {
    fail("image_height", std::to_string(image_height) + " is not a positive multiple of the patch size " +
                             std::to_string(patch_size));
  }
  if (image_width == 0 || image_width % patch_size != 0) {
    fail("image_width", std::to_string(image_width) + " is not a positive multiple of the patch size " +
                            std::to_string(patch_size));
  }
  if (depths.empty()) fail("depths", "needs at least one stage");
  if (channels.size() != depths.size()) {
    fail("channels", "has " + std::to_string(channels.size()) + " entries for " + std::to_string(depths.size()) +
                         " stages");
  }
  for (std::size_t s = 0; s < depths.size(); ++s) {
    if (depths[s] == 0) fail("depths", "stage " + std::to_string(s) + " has no blocks");
  }
  if (channels[0] == 0) fail("channels", "must be positive");
  for (std::size_t s = 1; s < channels.size(); ++s) {
    if (channels[s] != 2 * channels[s - 1]) fail("channels", "each stage must double the previous width");
  }
  const std::size_t factor = std::size_t(1) << (depths.size() - 1);
  if ((image_height / patch_size) % factor != 0 || (image_width / patch_size) % factor != 0) {
    fail("image_height", "embedded grid " + std::to_string(image_height / patch_size) + "x" +
                             std::to_string(image_width / patch_size) + " cannot be halved " +
                             std::to_string(depths.size() - 1) + " times");
  }
  if (!heads.empty() && heads.size() != depths.size()) fail("heads", "needs one entry per stage");
  if (branches.empty()) fail("branches", "at least one branch must be enabled");
  for (std::size_t i = 0; i < branches.size(); ++i) {
    for (std::size_t j = i + 1; j < branches.size(); ++j) {
      if (branches[i] == branches[j]) fail("branches", "'" + to_string(branches[i]) + "' listed twice");
    }
  }
  for (std::size_t s = 0; s < depths.size(); ++s) {
    const std::size_t h = stage_heads(s);
    if (h == 0 || channels[s] % h != 0) {
      fail("heads", std::to_string(h) + " heads do not divide " + std::to_string(channels[s]) + " channels");
    }
    if (selective.reduction == 0 || channels[s] % selective.reduction != 0) {
      fail("selective.reduction", std::to_string(selective.reduction) + " does not divide " +
                                      std::to_string(channels[s]) + " channels");
    }
  }
  if (ssm_state == 0) fail("ssm_state", "must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio", "must be positive");
  if (conv_kernel % 2 == 0) fail("conv_kernel", "must be odd");
  if (selective.kernel % 2 == 0) fail("selective.kernel", "must be odd");
  if (num_classes < 2) fail("num_classes", "needs at least two classes");
}

ModelConfig default_config() { return ModelConfig{}; }

ModelConfig desk_config() {
  ModelConfig c;
  c.image_height = c.image_width = 32;
  c.depths = {1, 1, 2, 1};
  c.channels = {16, 32, 64, 128};
  c.num_classes = 4;
  return c;
}

std::vector<std::pair<std::string, std::vector<Branch>>> ablation_rows() {
  using B = Branch;
  return {
      {"full", {B::ssm, B::conv, B::mlp, B::msa}},
      {"-CNN", {B::ssm, B::mlp, B::msa}},
      {"-MSA", {B::ssm, B::conv, B::mlp}},
      {"-MLP", {B::ssm, B::conv, B::msa}},
      {"-CNN-MSA", {B::ssm, B::mlp}},
      {"-CNN-MLP", {B::ssm, B::msa}},
      {"-MSA-MLP", {B::ssm, B::conv}},
      {"SSM-only", {B::ssm}},
  };
}

template <typename T>
Model<T> init_model(const ModelConfig& config) {
  config.validate();
  Model<T> m;
  m.config = config;
  Rng root(config.seed);

  Rng embed_rng = root.fork(0);
  const std::size_t c0 = config.channels[0];
  m.embed.weight = trunc_normal<T>({config.patch_size, config.patch_size, config.in_channels, c0}, embed_rng);
  m.embed.bias = Tensor<T>::zeros({c0}, true);
  m.embed.norm = init_norm<T>(c0);

  // Canonical branch order, selective settings last.
  std::vector<Branch> enabled;
  for (auto b : {Branch::ssm, Branch::conv, Branch::mlp, Branch::msa}) {
    if (config.has_branch(b)) enabled.push_back(b);
  }

  for (std::size_t s = 0; s < config.depths.size(); ++s) {
    Rng stage_rng = root.fork(1 + s);
    const std::size_t ch = config.channels[s];
    StageParams<T> stage;
    for (std::size_t b = 0; b < config.depths[s]; ++b) {
      Rng block_rng = stage_rng.fork(b);
      Rng ssm_rng = block_rng.fork(0), conv_rng = block_rng.fork(1), mlp_rng = block_rng.fork(2),
          msa_rng = block_rng.fork(3), sel_rng = block_rng.fork(4);
      BlockParams<T> block;
      block.norm = init_norm<T>(ch);
      if (config.has_branch(Branch::ssm)) {
        block.ssm = init_ssm_branch<T>(ch, config.ssm_state, config.ssm_separate_directions, ssm_rng);
      }
      if (config.has_branch(Branch::conv)) block.conv = init_conv_branch<T>(ch, conv_rng, config.conv_kernel);
      if (config.has_branch(Branch::mlp)) block.mlp = init_mlp_branch<T>(ch, ch * config.mlp_ratio, mlp_rng);
      if (config.has_branch(Branch::msa)) block.msa = init_msa_branch<T>(ch, config.stage_heads(s), msa_rng);
      const auto& sc = config.selective;
      block.selective = init_selective<T>(ch, enabled.size(), sc.kernel, sc.reduction, sc.pooling, sc.mode, sel_rng);
      stage.blocks.push_back(std::move(block));
    }
    if (s + 1 < config.depths.size()) {
      Rng merge_rng = stage_rng.fork(1000);
      MergeParams<T> merge;
      merge.norm = init_norm<T>(4 * ch);
      merge.weight = trunc_normal<T>({4 * ch, 2 * ch}, merge_rng);
      stage.merge = std::move(merge);
    }
    m.stages.push_back(std::move(stage));
  }

  Rng head_rng = root.fork(1000);
  const std::size_t last = config.channels.back();
  m.head_norm = init_norm<T>(last);
  m.head_weight = trunc_normal<T>({last, config.num_classes}, head_rng);
  m.head_bias = Tensor<T>::zeros({config.num_classes}, true);
  return m;
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& p, std::size_t patch) {
  const Shape& s = image.shape();
  if (s.size() < 3) throw ShapeError("patch_embed: expected (..., H, W, C), got " + shape_string(s));
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2];
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patch_embed: " + std::to_string(h) + "x" + std::to_string(w) +
                     " image is not divisible into " + std::to_string(patch) + "x" + std::to_string(patch) +
                     " patches");
  }
  const auto proj = conv2d(image, p.weight, p.bias, {patch, Padding::valid, 1});
  return apply_norm(proj, p.norm);
}

template <typename T>
Tensor<T> mix_branches(const Tensor<T>& u, const BlockParams<T>& p, const PoolContext& ctx) {
  std::vector<Tensor<T>> outs;
  if (p.ssm) outs.push_back(ssm_branch(u, *p.ssm));
  if (p.conv) outs.push_back(conv_branch(u, *p.conv));
  if (p.mlp) outs.push_back(mlp_branch(u, *p.mlp));
  if (p.msa) outs.push_back(msa_branch(u, *p.msa));
  if (outs.empty()) throw ConfigError("mix_ssm_block: no branch enabled");
  return selective_module(outs, p.selective, ctx);
}

template <typename T>
Tensor<T> mix_ssm_block(const Tensor<T>& v, const BlockParams<T>& p, const PoolContext& ctx) {
  return add(v, mix_branches(apply_norm(v, p.norm), p, ctx));
}

template <typename T>
Tensor<T> patch_merging(const Tensor<T>& v, const MergeParams<T>& p) {
  const Shape& s = v.shape();
  if (s.size() < 3) throw ShapeError("patch_merging: expected (..., H, W, C), got " + shape_string(s));
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2], c = s.back();
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("patch_merging: spatial dims must be even, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t lead = v.numel() / (h * w * c);
  auto x = reshape(v, {lead, h / 2, 2, w / 2, 2, c});
  x = permute(x, {0, 1, 3, 4, 2, 5});
  Shape merged(s.begin(), s.end() - 3);
  merged.insert(merged.end(), {h / 2, w / 2, 4 * c});
  x = reshape(x, merged);
  return matmul(apply_norm(x, p.norm), p.weight);
}

template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images, const PoolContext& ctx,
                         ForwardTrace* trace) {
  const auto& cfg = model.config;
  const Shape expected{cfg.image_height, cfg.image_width, cfg.in_channels};
  const Shape& s = images.shape();
  if ((s.size() != 3 && s.size() != 4) || !std::equal(expected.begin(), expected.end(), s.end() - 3)) {
    throw ShapeError("forward: expected image of shape " + shape_string(expected) + " (optionally batched), got " +
                     shape_string(s));
  }
  const bool single = s.size() == 3;
  auto x = single ? reshape(images, {1, s[0], s[1], s[2]}) : images;

  x = patch_embed(x, model.embed, cfg.patch_size);
  if (trace) trace->shapes.push_back(Shape(x.shape().begin() + 1, x.shape().end()));
  for (const auto& stage : model.stages) {
    for (const auto& block : stage.blocks) x = mix_ssm_block(x, block, ctx);
    if (stage.merge) {
      x = patch_merging(x, *stage.merge);
      if (trace) trace->shapes.push_back(Shape(x.shape().begin() + 1, x.shape().end()));
    }
  }
  x = apply_norm(x, model.head_norm);
  const Shape& xs = x.shape();
  const auto pooled = reduce_mean(reshape(x, {xs[0], xs[1] * xs[2], xs[3]}), -2);
  auto logits = add(matmul(pooled, model.head_weight), model.head_bias);
  if (single) logits = reshape(logits, {cfg.num_classes});
  return logits;
}

template <typename T>
Tensor<T> forward_classify(const Model<T>& model, const Tensor<T>& images, const PoolContext& ctx) {
  return softmax(forward_logits(model, images, ctx), -1);
}

template <typename T>
std::vector<std::pair<std::string, std::size_t>> module_parameter_counts(const Model<T>& m) {
  std::vector<std::pair<std::string, std::size_t>> groups{{"embed", 0}, {"ssm", 0},  {"conv", 0},
                                                          {"mlp", 0},   {"msa", 0},  {"selective", 0},
                                                          {"norm", 0},  {"merge", 0}, {"head", 0}};
  auto bump = [&](const std::string& g, std::size_t n) {
    for (auto& [name, count] : groups) {
      if (name == g) count += n;
    }
  };
  for_each_parameter(m, [&](const std::string& name, const Tensor<T>& t) {
    auto has = [&](const char* part) { return name.find(part) != std::string::npos; };
    if (name.rfind("embed.", 0) == 0) {
      bump("embed", t.numel());
    } else if (name.rfind("head.", 0) == 0) {
      bump("head", t.numel());
    } else if (has(".merge.")) {
      bump("merge", t.numel());
    } else {
      for (const char* g : {"ssm", "conv", "mlp", "msa", "selective", "norm"}) {
        if (has((std::string(".") + g + ".").c_str())) {
          bump(g, t.numel());
          break;
        }
      }
    }
  });
  return groups;
}

#define MIXSSM_INSTANTIATE_NETWORK(T)                                                                    \
  template Model<T> init_model<T>(const ModelConfig&);                                                 \
  template Tensor<T> patch_embed(const Tensor<T>&, const PatchEmbedParams<T>&, std::size_t);          \
  template Tensor<T> mix_branches(const Tensor<T>&, const BlockParams<T>&, const PoolContext&);       \
  template Tensor<T> mix_ssm_block(const Tensor<T>&, const BlockParams<T>&, const PoolContext&);      \
  template Tensor<T> patch_merging(const Tensor<T>&, const MergeParams<T>&);                          \
  template Tensor<T> forward_logits(const Model<T>&, const Tensor<T>&, const PoolContext&, ForwardTrace*); \
  template Tensor<T> forward_classify(const Model<T>&, const Tensor<T>&, const PoolContext&);         \
  template std::vector<std::pair<std::string, std::size_t>> module_parameter_counts(const Model<T>&);

MIXSSM_INSTANTIATE_NETWORK(float)
MIXSSM_INSTANTIATE_NETWORK(double)

}  // namespace mixssm

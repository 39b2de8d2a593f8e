#include "mixssm/fusion.hpp"

#include <cmath>

#include "mixssm/ops.hpp"

namespace mixssm {
namespace {

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(shape, std::move(v), true);
}

void require_same_shapes(const char* op, const std::vector<Shape>& shapes) {
  if (shapes.empty()) throw ShapeError(std::string(op) + ": needs at least one branch");
  for (const auto& s : shapes) {
    if (s != shapes[0]) {
      throw ShapeError(std::string(op) + ": branch shapes differ, " + shape_string(shapes[0]) + " vs " +
                       shape_string(s));
    }
  }
}

template <typename T>
std::vector<Shape> shapes_of(const std::vector<Tensor<T>>& ts) {
  std::vector<Shape> out;
  for (const auto& t : ts) out.push_back(t.shape());
  return out;
}

// Training-mode stochastic pooling over x (..., L, C): one sampled position
// per (batch, channel) with probability softmax(x) along L.
template <typename T>
Tensor<T> stochastic_sample(const Tensor<T>& x, Rng& rng) {
  const Shape& s = x.shape();
  const std::size_t len = s[s.size() - 2];
  const std::size_t ch = s.back();
  const std::size_t batch = x.numel() / (len * ch);
  const auto xv = x.data();
  std::vector<std::size_t> picked(batch * ch);
  std::vector<T> out(batch * ch);
  std::vector<double> prob(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      double mx = -INFINITY;
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, double(xv[(b * len + t) * ch + c]));
      double total = 0;
      for (std::size_t t = 0; t < len; ++t) {
        prob[t] = std::exp(double(xv[(b * len + t) * ch + c]) - mx);
        total += prob[t];
      }
      double r = rng.uniform() * total;
      std::size_t t = 0;
      while (t + 1 < len && r >= prob[t]) {
        r -= prob[t];
        ++t;
      }
      picked[b * ch + c] = (b * len + t) * ch + c;
      out[b * ch + c] = xv[picked[b * ch + c]];
    }
  }
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.push_back(ch);
  return make_op_result<T>("stochastic_pool", std::move(out_shape), std::move(out), {x},
                           [picked = std::move(picked)](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[picked[i]] += g[i];
                           });
}

}  // namespace

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::average:
      return "average";
    case Pooling::max:
      return "max";
    case Pooling::l2:
      return "l2";
    case Pooling::stochastic:
      return "stochastic";
  }
  return "?";
}

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::selective:
      return "selective";
    case Aggregation::max:
      return "max";
    case Aggregation::average:
      return "average";
  }
  return "?";
}

Pooling parse_pooling(const std::string& s) {
  if (s == "average") return Pooling::average;
  if (s == "max") return Pooling::max;
  if (s == "l2") return Pooling::l2;
  if (s == "stochastic") return Pooling::stochastic;
  throw ConfigError("unknown pooling method '" + s + "' (expected average, max, l2, stochastic)");
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "selective") return Aggregation::selective;
  if (s == "max") return Aggregation::max;
  if (s == "average") return Aggregation::average;
  throw ConfigError("unknown aggregation mode '" + s + "' (expected selective, max, average)");
}

template <typename T>
SelectiveParams<T> init_selective(std::size_t channels, std::size_t strategies, std::size_t kernel,
                                  std::size_t reduction, Pooling pooling, Aggregation mode, Rng& rng) {
  if (strategies < 1) throw ConfigError("selective module: needs at least one strategy");
  if (kernel % 2 == 0) throw ConfigError("selective module: kernel size must be odd, got " + std::to_string(kernel));
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("selective module: reduction " + std::to_string(reduction) + " does not divide " +
                      std::to_string(channels) + " channels");
  }
  SelectiveParams<T> p;
  p.strategies = strategies;
  p.reduction = reduction;
  p.kernel = kernel;
  p.pooling = pooling;
  p.mode = mode;
  if (mode != Aggregation::selective) return p;

  if (kernel > 1) {
    // Starts near an identity filter so pooling first sees the fused map itself.
    auto w = trunc_normal<T>({kernel, kernel, 1, channels}, rng);
    auto wd = w.mutable_data();
    const std::size_t center = (kernel / 2) * kernel + kernel / 2;
    for (std::size_t c = 0; c < channels; ++c) wd[center * channels + c] += T(1);
    p.dw_weight = w;
    p.dw_bias = Tensor<T>::zeros({channels}, true);
  }
  const std::size_t hidden = channels / reduction;
  p.w1 = trunc_normal<T>({channels, hidden}, rng);
  p.b1 = Tensor<T>::zeros({hidden}, true);
  p.w2 = trunc_normal<T>({hidden, channels * strategies}, rng);
  p.b2 = Tensor<T>::zeros({channels * strategies}, true);
  return p;
}

template <typename T>
Tensor<T> fuse_sum(const std::vector<Tensor<T>>& branches) {
  require_same_shapes("fuse_sum", shapes_of(branches));
  Tensor<T> total = branches[0];
  for (std::size_t m = 1; m < branches.size(); ++m) total = add(total, branches[m]);
  return total;
}

template <typename T>
Tensor<T> pool_global(const Tensor<T>& f, Pooling method, const PoolContext& ctx) {
  const Shape& s = f.shape();
  if (s.size() < 3) throw ShapeError("pool_global: expected (..., H, W, C), got " + shape_string(s));
  if (s[s.size() - 3] == 0 || s[s.size() - 2] == 0) throw ShapeError("pool_global: empty spatial extent");
  Shape flat(s.begin(), s.end() - 3);
  flat.insert(flat.end(), {s[s.size() - 3] * s[s.size() - 2], s.back()});
  const auto x = reshape(f, flat);
  switch (method) {
    case Pooling::average:
      return reduce_mean(x, -2);
    case Pooling::max:
      return reduce_max(x, -2);
    case Pooling::l2:
      return sqrt(add_scalar(reduce_mean(mul(x, x), -2), T(1e-12)));
    case Pooling::stochastic:
      if (ctx.training) {
        if (!ctx.rng) throw Error("pool_global: stochastic pooling in training mode needs a random stream");
        return stochastic_sample(x, *ctx.rng);
      }
      return reduce_sum(mul(softmax(x, -2), x), -2);
  }
  throw ConfigError("pool_global: unknown method");
}

template <typename T>
Tensor<T> selective_weights(const Tensor<T>& g, const SelectiveParams<T>& p) {
  if (!p.w1.defined()) throw ConfigError("selective_weights: module has no weight MLP (non-selective mode)");
  const std::size_t channels = g.shape().empty() ? 0 : g.shape().back();
  if (p.w1.dim(0) != channels) {
    throw ShapeError("selective_weights: pooled features have " + std::to_string(channels) +
                     " channels, weight MLP expects " + std::to_string(p.w1.dim(0)));
  }
  const auto rows = g.rank() == 1 ? reshape(g, {1, channels}) : g;
  const auto hidden = gelu(add(matmul(rows, p.w1), p.b1));
  const auto logits = add(matmul(hidden, p.w2), p.b2);
  Shape split(g.shape().begin(), g.shape().end() - 1);
  split.insert(split.end(), {channels, p.strategies});
  return softmax(reshape(logits, split), -1);
}

template <typename T>
Tensor<T> selective_combine(const std::vector<Tensor<T>>& branches, const Tensor<T>& weights) {
  require_same_shapes("selective_combine", shapes_of(branches));
  const Shape& fs = branches[0].shape();
  if (fs.size() < 3) throw ShapeError("selective_combine: branches must be (..., H, W, C), got " + shape_string(fs));
  Shape expected(fs.begin(), fs.end() - 3);
  expected.insert(expected.end(), {fs.back(), branches.size()});
  if (weights.shape() != expected) {
    throw ShapeError("selective_combine: weights must be " + shape_string(expected) + ", got " +
                     shape_string(weights.shape()));
  }
  Shape per_branch(fs.begin(), fs.end() - 3);
  per_branch.insert(per_branch.end(), {1, 1, fs.back()});
  Tensor<T> total;
  for (std::size_t m = 0; m < branches.size(); ++m) {
    const auto w = reshape(slice(weights, -1, m, m + 1), per_branch);
    const auto term = mul(branches[m], w);
    total = m == 0 ? term : add(total, term);
  }
  return total;
}

template <typename T>
Tensor<T> selective_module(const std::vector<Tensor<T>>& branches, const SelectiveParams<T>& p,
                           const PoolContext& ctx, Tensor<T>* weights_out) {
  require_same_shapes("selective_module", shapes_of(branches));
  switch (p.mode) {
    case Aggregation::max: {
      Tensor<T> out = branches[0];
      for (std::size_t m = 1; m < branches.size(); ++m) out = maximum(out, branches[m]);
      return out;
    }
    case Aggregation::average:
      return scale(fuse_sum(branches), T(1) / T(branches.size()));
    case Aggregation::selective:
      break;
  }
  if (branches.size() != p.strategies) {
    throw ShapeError("selective_module: got " + std::to_string(branches.size()) + " branches for " +
                     std::to_string(p.strategies) + " strategies");
  }
  auto fused = fuse_sum(branches);
  if (p.kernel > 1) {
    fused = conv2d(fused, p.dw_weight, p.dw_bias, {1, Padding::same, fused.shape().back()});
  }
  const auto weights = selective_weights(pool_global(fused, p.pooling, ctx), p);
  if (weights_out) *weights_out = weights;
  return selective_combine(branches, weights);
}

#define MIXSSM_INSTANTIATE_FUSION(T)                                                                            \
  template SelectiveParams<T> init_selective<T>(std::size_t, std::size_t, std::size_t, std::size_t, Pooling, \
                                                Aggregation, Rng&);                                            \
  template Tensor<T> fuse_sum(const std::vector<Tensor<T>>&);                                                 \
  template Tensor<T> pool_global(const Tensor<T>&, Pooling, const PoolContext&);                              \
  template Tensor<T> selective_weights(const Tensor<T>&, const SelectiveParams<T>&);                          \
  template Tensor<T> selective_combine(const std::vector<Tensor<T>>&, const Tensor<T>&);                      \
  template Tensor<T> selective_module(const std::vector<Tensor<T>>&, const SelectiveParams<T>&,               \
                                      const PoolContext&, Tensor<T>*);

MIXSSM_INSTANTIATE_FUSION(float)
MIXSSM_INSTANTIATE_FUSION(double)

}  // namespace mixssm

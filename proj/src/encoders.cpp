#include "mixssm/encoders.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mixssm/ops.hpp"
#include "mixssm/parallel.hpp"

namespace mixssm {
namespace {

template <typename T>
Tensor<T> trunc_normal(const Shape& shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
Tensor<T> param_full(const Shape& shape, T value) {
  return Tensor<T>::full(shape, value, true);
}

struct MapDims {
  Shape lead;
  std::size_t batch = 1, height = 0, width = 0, channels = 0;
};

MapDims map_dims(const Shape& s, const char* op) {
  if (s.size() < 3) throw ShapeError(std::string(op) + ": expected (..., H, W, C), got " + shape_string(s));
  MapDims d;
  d.lead.assign(s.begin(), s.end() - 3);
  for (auto x : d.lead) d.batch *= x;
  d.height = s[s.size() - 3];
  d.width = s[s.size() - 2];
  d.channels = s.back();
  return d;
}

Shape with_tail(const Shape& lead, std::initializer_list<std::size_t> tail) {
  Shape s = lead;
  s.insert(s.end(), tail);
  return s;
}

void require_shape(const char* op, const char* what, const Shape& got, const Shape& want) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": " + what + " must be " + shape_string(want) + ", got " + shape_string(got));
  }
}

}  // namespace

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  switch (act) {
    case Activation::identity:
      return x;
    case Activation::gelu:
      return gelu(x);
    case Activation::silu:
      return silu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------

template <typename T>
ConvBranchParams<T> init_conv_branch(std::size_t channels, Rng& rng, std::size_t kernel) {
  ConvBranchParams<T> p;
  p.weight = trunc_normal<T>({kernel, kernel, channels, channels}, rng);
  p.bias = param_full<T>({channels}, T(0));
  return p;
}

template <typename T>
Tensor<T> conv_branch(const Tensor<T>& v, const ConvBranchParams<T>& p) {
  const auto d = map_dims(v.shape(), "conv_branch");
  const auto& ws = p.weight.shape();
  if (ws.size() != 4 || ws[2] != d.channels || ws[3] != d.channels) {
    throw ShapeError("conv_branch: channel mismatch, input has " + std::to_string(d.channels) +
                     " channels but kernel is " + shape_string(ws));
  }
  return activate(conv2d(v, p.weight, p.bias, {1, Padding::same, 1}), p.activation);
}

// ---------------------------------------------------------------------------

template <typename T>
MSAParams<T> init_msa_branch(std::size_t channels, std::size_t heads, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("msa: " + std::to_string(heads) + " heads do not divide " + std::to_string(channels) + " channels");
  }
  MSAParams<T> p;
  p.heads = heads;
  p.w_query = trunc_normal<T>({channels, channels}, rng);
  p.w_key = trunc_normal<T>({channels, channels}, rng);
  p.w_value = trunc_normal<T>({channels, channels}, rng);
  p.w_out = trunc_normal<T>({channels, channels}, rng);
  return p;
}

template <typename T>
Tensor<T> msa_branch(const Tensor<T>& v, const MSAParams<T>& p, AttentionTrace<T>* trace) {
  const auto d = map_dims(v.shape(), "msa_branch");
  if (p.heads == 0 || p.w_query.rank() != 2 || p.w_query.dim(1) % p.heads != 0) {
    throw ConfigError("msa_branch: head count must divide the projection width");
  }
  const std::size_t inner = p.w_query.dim(1);
  const std::size_t head_dim = inner / p.heads;
  require_shape("msa_branch", "w_query", p.w_query.shape(), {d.channels, inner});
  require_shape("msa_branch", "w_key", p.w_key.shape(), {d.channels, inner});
  require_shape("msa_branch", "w_value", p.w_value.shape(), {d.channels, inner});
  require_shape("msa_branch", "w_out", p.w_out.shape(), {inner, d.channels});

  const std::size_t tokens = d.height * d.width;
  const auto x = reshape(v, {d.batch, tokens, d.channels});
  auto heads_first = [&](const Tensor<T>& w) {
    return permute(reshape(matmul(x, w), {d.batch, tokens, p.heads, head_dim}), {0, 2, 1, 3});
  };
  const auto q = heads_first(p.w_query);
  const auto k = heads_first(p.w_key);
  const auto val = heads_first(p.w_value);
  const auto scores = scale(matmul(q, transpose(k, 2, 3)), T(1) / std::sqrt(T(head_dim)));
  const auto attn = softmax(scores, -1);
  if (trace) trace->weights = attn;
  const auto mixed = permute(matmul(attn, val), {0, 2, 1, 3});
  const auto out = matmul(reshape(mixed, {d.batch, tokens, inner}), p.w_out);
  return reshape(out, v.shape());
}

// ---------------------------------------------------------------------------

template <typename T>
MLPBranchParams<T> init_mlp_branch(std::size_t channels, std::size_t hidden, Rng& rng) {
  MLPBranchParams<T> p;
  p.w1 = trunc_normal<T>({channels, hidden}, rng);
  p.b1 = param_full<T>({hidden}, T(0));
  p.w2 = trunc_normal<T>({hidden, channels}, rng);
  p.b2 = param_full<T>({channels}, T(0));
  return p;
}

template <typename T>
Tensor<T> mlp_branch(const Tensor<T>& v, const MLPBranchParams<T>& p) {
  const auto d = map_dims(v.shape(), "mlp_branch");
  if (p.w1.rank() != 2 || p.w1.dim(0) != d.channels) {
    throw ShapeError("mlp_branch: first layer expects " + std::to_string(d.channels) + " input channels, got " +
                     shape_string(p.w1.shape()));
  }
  const auto hidden = activate(add(matmul(v, p.w1), p.b1), p.activation);
  return add(matmul(hidden, p.w2), p.b2);
}

// ---------------------------------------------------------------------------

std::array<std::vector<std::size_t>, 4> scan_orders(std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  std::array<std::vector<std::size_t>, 4> orders;
  orders[0].resize(n);
  std::iota(orders[0].begin(), orders[0].end(), 0);
  orders[1].assign(orders[0].rbegin(), orders[0].rend());
  orders[2].reserve(n);
  for (std::size_t j = 0; j < width; ++j) {
    for (std::size_t i = 0; i < height; ++i) orders[2].push_back(i * width + j);
  }
  orders[3].assign(orders[2].rbegin(), orders[2].rend());
  return orders;
}

template <typename T>
std::array<Tensor<T>, 4> cross_scan(const Tensor<T>& v) {
  const auto d = map_dims(v.shape(), "cross_scan");
  const auto x = reshape(v, with_tail(d.lead, {d.height * d.width, d.channels}));
  const auto orders = scan_orders(d.height, d.width);
  return {x, index_select(x, -2, orders[1]), index_select(x, -2, orders[2]), index_select(x, -2, orders[3])};
}

template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& sequences, std::size_t height, std::size_t width) {
  const auto orders = scan_orders(height, width);
  const Shape& s = sequences[0].shape();
  if (s.size() < 2 || s[s.size() - 2] != height * width) {
    throw ShapeError("cross_merge: sequences of shape " + shape_string(s) + " do not cover a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  Tensor<T> total;
  for (std::size_t k = 0; k < 4; ++k) {
    if (sequences[k].shape() != s) throw ShapeError("cross_merge: direction shapes differ");
    std::vector<std::size_t> inverse(orders[k].size());
    for (std::size_t pos = 0; pos < orders[k].size(); ++pos) inverse[orders[k][pos]] = pos;
    const auto grid = k == 0 ? sequences[k] : index_select(sequences[k], -2, inverse);
    total = k == 0 ? grid : add(total, grid);
  }
  Shape out(s.begin(), s.end() - 2);
  out.insert(out.end(), {height, width, s.back()});
  return reshape(total, std::move(out));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> selective_scan_core(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                              const Tensor<T>& c, const Tensor<T>& d_skip, std::size_t block) {
  constexpr const char* op = "selective_scan";
  const Shape& us = u.shape();
  if (us.size() < 2) throw ShapeError(std::string(op) + ": tokens must be (..., L, C), got " + shape_string(us));
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": A must be (C, N), got " + shape_string(a.shape()));
  const std::size_t len = us[us.size() - 2];
  const std::size_t ch = us.back();
  const std::size_t nstate = a.dim(1);
  if (nstate < 1) throw ConfigError("selective_scan: state dimension must be at least 1");
  if (len < 1) throw ShapeError("selective_scan: sequence must hold at least one token");
  Shape bc_shape(us.begin(), us.end() - 1);
  bc_shape.push_back(nstate);
  require_shape(op, "delta", delta.shape(), us);
  require_shape(op, "A", a.shape(), {ch, nstate});
  require_shape(op, "B", b.shape(), bc_shape);
  require_shape(op, "C", c.shape(), bc_shape);
  require_shape(op, "D", d_skip.shape(), {ch});
  if (block == 0) block = len;
  const std::size_t batch = u.numel() / (len * ch);

  const T* uv = u.data().data();
  const T* dv = delta.data().data();
  const T* av = a.data().data();
  const T* bv = b.data().data();
  const T* cv = c.data().data();
  const T* sv = d_skip.data().data();

  // states[((bi * ch + c) * len + t) * nstate + n]
  std::vector<T> states(batch * ch * len * nstate);
  std::vector<T> y(u.numel());
  parallel_for(batch, [&](std::size_t bi) {
    std::vector<T> cum(len * nstate);
    for (std::size_t cc = 0; cc < ch; ++cc) {
      T* h = states.data() + (bi * ch + cc) * len * nstate;
      // Pass 1: each block scans from a zero state; cum holds the running decay product.
      for (std::size_t start = 0; start < len; start += block) {
        const std::size_t end = std::min(len, start + block);
        for (std::size_t n = 0; n < nstate; ++n) {
          T local = 0;
          T decay = 1;
          for (std::size_t t = start; t < end; ++t) {
            const std::size_t tok = bi * len + t;
            const T dt = dv[tok * ch + cc];
            const T abar = std::exp(dt * av[cc * nstate + n]);
            local = abar * local + dt * bv[tok * nstate + n] * uv[tok * ch + cc];
            decay *= abar;
            h[t * nstate + n] = local;
            cum[t * nstate + n] = decay;
          }
        }
      }
      // Pass 2: propagate block carries.
      for (std::size_t start = block; start < len; start += block) {
        const std::size_t end = std::min(len, start + block);
        for (std::size_t n = 0; n < nstate; ++n) {
          const T carry = h[(start - 1) * nstate + n];
          for (std::size_t t = start; t < end; ++t) h[t * nstate + n] += cum[t * nstate + n] * carry;
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t tok = bi * len + t;
        T acc = sv[cc] * uv[tok * ch + cc];
        for (std::size_t n = 0; n < nstate; ++n) acc += cv[tok * nstate + n] * h[t * nstate + n];
        y[tok * ch + cc] = acc;
      }
    }
  });

  return make_op_result<T>(
      op, us, std::move(y), {u, delta, a, b, c, d_skip},
      [batch, len, ch, nstate, states = std::move(states)](detail::BackwardContext<T>& ctx) {
        const T* gy = ctx.grad_output().data();
        const T* uv = ctx.input(0).data();
        const T* dv = ctx.input(1).data();
        const T* av = ctx.input(2).data();
        const T* bv = ctx.input(3).data();
        const T* cv = ctx.input(4).data();
        const T* sv = ctx.input(5).data();
        auto gu = ctx.grad(0);
        auto gdelta = ctx.grad(1);
        auto ga = ctx.grad(2);
        auto gb = ctx.grad(3);
        auto gc = ctx.grad(4);
        auto gs = ctx.grad(5);
        // Per-batch partials for the shared A and D, summed in batch order below.
        std::vector<T> ga_part(ga.empty() ? 0 : batch * ch * nstate, T(0));
        std::vector<T> gs_part(gs.empty() ? 0 : batch * ch, T(0));
        parallel_for(batch, [&](std::size_t bi) {
          std::vector<T> adj(nstate);
          for (std::size_t cc = 0; cc < ch; ++cc) {
            const T* h = states.data() + (bi * ch + cc) * len * nstate;
            std::fill(adj.begin(), adj.end(), T(0));
            for (std::size_t t = len; t-- > 0;) {
              const std::size_t tok = bi * len + t;
              const T g = gy[tok * ch + cc];
              const T dt = dv[tok * ch + cc];
              const T ut = uv[tok * ch + cc];
              T g_u = g * sv[cc];
              T g_dt = 0;
              for (std::size_t n = 0; n < nstate; ++n) {
                const T an = av[cc * nstate + n];
                const T abar = std::exp(dt * an);
                const T hprev = t > 0 ? h[(t - 1) * nstate + n] : T(0);
                const T bn = bv[tok * nstate + n];
                const T gh = cv[tok * nstate + n] * g + adj[n];
                if (!gc.empty()) gc[tok * nstate + n] += g * h[t * nstate + n];
                if (!gb.empty()) gb[tok * nstate + n] += gh * dt * ut;
                if (!ga_part.empty()) ga_part[(bi * ch + cc) * nstate + n] += gh * hprev * abar * dt;
                g_dt += gh * (hprev * abar * an + bn * ut);
                g_u += gh * dt * bn;
                adj[n] = gh * abar;
              }
              if (!gu.empty()) gu[tok * ch + cc] += g_u;
              if (!gdelta.empty()) gdelta[tok * ch + cc] += g_dt;
              if (!gs_part.empty()) gs_part[bi * ch + cc] += g * ut;
            }
          }
        });
        for (std::size_t bi = 0; bi < batch; ++bi) {
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ga_part[bi * ch * nstate + i];
          for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += gs_part[bi * ch + i];
        }
      });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const ScanParams<T>& p) {
  const auto delta = softplus(add(matmul(u, p.delta_weight), p.delta_bias));
  const auto a = scale(exp(p.a_log), T(-1));
  return selective_scan_core(u, delta, a, matmul(u, p.b_weight), matmul(u, p.c_weight), p.d_skip);
}

template <typename T>
SSMParams<T> init_ssm_branch(std::size_t channels, std::size_t state_dim, bool separate_directions, Rng& rng) {
  if (state_dim < 1) throw ConfigError("ssm: state dimension must be at least 1");
  SSMParams<T> p;
  p.state_dim = state_dim;
  const std::size_t sets = separate_directions ? 4 : 1;
  for (std::size_t k = 0; k < sets; ++k) {
    ScanParams<T> s;
    s.delta_weight = trunc_normal<T>({channels, channels}, rng);
    // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is softplus^-1 of that draw.
    std::vector<T> bias(channels);
    for (auto& x : bias) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      x = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    s.delta_bias = Tensor<T>({channels}, std::move(bias), true);
    s.b_weight = trunc_normal<T>({channels, state_dim}, rng);
    s.c_weight = trunc_normal<T>({channels, state_dim}, rng);
    std::vector<T> a_log(channels * state_dim);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t n = 0; n < state_dim; ++n) a_log[c * state_dim + n] = static_cast<T>(std::log(double(n + 1)));
    }
    s.a_log = Tensor<T>({channels, state_dim}, std::move(a_log), true);
    s.d_skip = param_full<T>({channels}, T(1));
    p.directions.push_back(std::move(s));
  }
  p.out_weight = trunc_normal<T>({channels, channels}, rng);
  return p;
}

template <typename T>
Tensor<T> ssm_branch(const Tensor<T>& v, const SSMParams<T>& p) {
  const auto d = map_dims(v.shape(), "ssm_branch");
  if (p.state_dim < 1) throw ConfigError("ssm_branch: state dimension must be at least 1");
  if (p.directions.size() != 1 && p.directions.size() != 4) {
    throw ConfigError("ssm_branch: expected 1 shared or 4 per-direction parameter sets");
  }
  const auto sequences = cross_scan(v);
  std::array<Tensor<T>, 4> outputs;
  for (std::size_t k = 0; k < 4; ++k) {
    outputs[k] = selective_scan(sequences[k], p.directions[p.directions.size() == 1 ? 0 : k]);
  }
  return matmul(cross_merge(outputs, d.height, d.width), p.out_weight);
}

#define MIXSSM_INSTANTIATE_ENCODERS(T)                                                                       \
  template Tensor<T> activate(const Tensor<T>&, Activation);                                                 \
  template ConvBranchParams<T> init_conv_branch<T>(std::size_t, Rng&, std::size_t);                          \
  template Tensor<T> conv_branch(const Tensor<T>&, const ConvBranchParams<T>&);                              \
  template MSAParams<T> init_msa_branch<T>(std::size_t, std::size_t, Rng&);                                  \
  template Tensor<T> msa_branch(const Tensor<T>&, const MSAParams<T>&, AttentionTrace<T>*);                  \
  template MLPBranchParams<T> init_mlp_branch<T>(std::size_t, std::size_t, Rng&);                            \
  template Tensor<T> mlp_branch(const Tensor<T>&, const MLPBranchParams<T>&);                                \
  template std::array<Tensor<T>, 4> cross_scan(const Tensor<T>&);                                            \
  template Tensor<T> cross_merge(const std::array<Tensor<T>, 4>&, std::size_t, std::size_t);                 \
  template Tensor<T> selective_scan_core(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                         const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template Tensor<T> selective_scan(const Tensor<T>&, const ScanParams<T>&);                                 \
  template SSMParams<T> init_ssm_branch<T>(std::size_t, std::size_t, bool, Rng&);                            \
  template Tensor<T> ssm_branch(const Tensor<T>&, const SSMParams<T>&);

MIXSSM_INSTANTIATE_ENCODERS(float)
MIXSSM_INSTANTIATE_ENCODERS(double)

}  // namespace mixssm

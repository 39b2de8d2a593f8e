#include "mixssm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mixssm/parallel.hpp"

namespace mixssm {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string pair_string(const Shape& a, const Shape& b) { return shape_string(a) + " vs " + shape_string(b); }

// ---------------------------------------------------------------------------
// Broadcasting

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::size_t db = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_fail(op, "cannot broadcast " + pair_string(a, b));
    out[k] = da == 1 ? db : da;
  }
  return out;
}

// Maps each flat output index to the flat index of `in`; empty when `in == out`.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  if (in == out) return {};
  const std::size_t n = shape_numel(out);
  const std::size_t n_in = shape_numel(in);
  std::vector<std::size_t> idx(n);
  // Fast path: `in` (minus leading ones) is a suffix of `out`.
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  const Shape core(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end());
  if (core.size() <= out.size() && std::equal(core.begin(), core.end(), out.end() - static_cast<std::ptrdiff_t>(core.size()))) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = n_in ? i % n_in : 0;
    return idx;
  }
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = rank; k-- > 0;) {
    const std::size_t offset = rank - in.size();
    if (k >= offset) {
      const std::size_t d = in[k - offset];
      stride[k] = d == 1 ? 0 : s;
      s *= d;
    }
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = pos;
    for (std::size_t k = rank; k-- > 0;) {
      ++counter[k];
      pos += stride[k];
      if (counter[k] < out[k]) break;
      pos -= stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  return idx;
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  auto ia = broadcast_index(a.shape(), out_shape);
  auto ib = broadcast_index(b.shape(), out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[ia.empty() ? i : ia[i]], bv[ib.empty() ? i : ib[i]]);
  }
  return make_op_result<T>(op, std::move(out_shape), std::move(out), {a, b},
                           [ia = std::move(ia), ib = std::move(ib), da, db](detail::BackwardContext<T>& ctx) {
                             const auto g = ctx.grad_output();
                             const auto x = ctx.input(0);
                             const auto y = ctx.input(1);
                             auto ga = ctx.grad(0);
                             auto gb = ctx.grad(1);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const std::size_t xa = ia.empty() ? i : ia[i];
                               const std::size_t yb = ib.empty() ? i : ib[i];
                               if (!ga.empty()) ga[xa] += g[i] * da(x[xa], y[yb]);
                               if (!gb.empty()) gb[yb] += g[i] * db(x[xa], y[yb]);
                             }
                           });
}

template <typename T, typename F, typename DF>
Tensor<T> unary_op(const char* op, const Tensor<T>& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op_result<T>(op, x.shape(), std::move(out), {x}, [df](detail::BackwardContext<T>& ctx) {
    auto gx = ctx.grad(0);
    if (gx.empty()) return;
    const auto g = ctx.grad_output();
    const auto in = ctx.input(0);
    const auto out = ctx.output();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], out[i]);
  });
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t k = 0; k < axis; ++k) r.outer *= s[k];
  r.extent = s[axis];
  for (std::size_t k = axis + 1; k < s.size(); ++k) r.inner *= s[k];
  return r;
}

// For each output flat index, the input flat index under an axis permutation.
std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& order, Shape& out) {
  const std::size_t rank = in.size();
  out.assign(rank, 0);
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t k = rank; k-- > 1;) in_stride[k - 1] = in_stride[k] * in[k];
  std::vector<std::size_t> stride(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    out[k] = in[order[k]];
    stride[k] = in_stride[order[k]];
  }
  const std::size_t n = shape_numel(in);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = pos;
    for (std::size_t k = rank; k-- > 0;) {
      ++counter[k];
      pos += stride[k];
      if (counter[k] < out[k]) break;
      pos -= stride[k] * counter[k];
      counter[k] = 0;
    }
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Convolution geometry

struct ConvGeometry {
  std::size_t batch = 1, h = 0, w = 0, cin = 0, kh = 0, kw = 0, cout = 0;
  std::size_t ho = 0, wo = 0, stride = 1, pad_top = 0, pad_left = 0;
  bool depthwise = false;
  std::size_t patch() const { return kh * kw * cin; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& opt) {
  constexpr const char* op = "conv2d";
  if (xs.size() < 3) shape_fail(op, "input must be (..., H, W, C), got " + shape_string(xs));
  if (ws.size() != 4) shape_fail(op, "weight must be (Kh, Kw, Cin/groups, Cout), got " + shape_string(ws));
  if (opt.stride == 0) shape_fail(op, "stride must be positive");
  ConvGeometry g;
  const std::size_t r = xs.size();
  g.h = xs[r - 3];
  g.w = xs[r - 2];
  g.cin = xs[r - 1];
  for (std::size_t k = 0; k + 3 < r; ++k) g.batch *= xs[k];
  g.kh = ws[0];
  g.kw = ws[1];
  g.cout = ws[3];
  g.stride = opt.stride;
  if (opt.groups == 1) {
    if (ws[2] != g.cin) shape_fail(op, "weight input channels " + std::to_string(ws[2]) + " != input channels " + std::to_string(g.cin));
  } else if (opt.groups == g.cin) {
    if (ws[2] != 1 || g.cout != g.cin) shape_fail(op, "depthwise weight must be (Kh, Kw, 1, C), got " + shape_string(ws));
    g.depthwise = true;
  } else {
    shape_fail(op, "groups must be 1 or the input channel count");
  }
  if (opt.padding == Padding::same) {
    g.ho = (g.h + g.stride - 1) / g.stride;
    g.wo = (g.w + g.stride - 1) / g.stride;
    const std::size_t need_h = (g.ho - 1) * g.stride + g.kh;
    const std::size_t need_w = (g.wo - 1) * g.stride + g.kw;
    g.pad_top = need_h > g.h ? (need_h - g.h) / 2 : 0;
    g.pad_left = need_w > g.w ? (need_w - g.w) / 2 : 0;
  } else {
    if (g.h < g.kh || g.w < g.kw) shape_fail(op, "VALID padding needs input at least kernel size, got " + shape_string(xs));
    g.ho = (g.h - g.kh) / g.stride + 1;
    g.wo = (g.w - g.kw) / g.stride + 1;
  }
  return g;
}

// Fills cols (batch * ho * wo, kh * kw * cin) for dense convolution.
template <typename T>
void im2col(std::span<const T> x, const ConvGeometry& g, std::vector<T>& cols) {
  const std::size_t rows_per = g.ho * g.wo;
  cols.assign(g.batch * rows_per * g.patch(), T(0));
  parallel_for(g.batch, [&](std::size_t b) {
    const T* xb = x.data() + b * g.h * g.w * g.cin;
    for (std::size_t i = 0; i < g.ho; ++i) {
      for (std::size_t j = 0; j < g.wo; ++j) {
        T* row = cols.data() + ((b * g.ho + i) * g.wo + j) * g.patch();
        for (std::size_t m = 0; m < g.kh; ++m) {
          const long yi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.pad_top);
          if (yi < 0 || yi >= static_cast<long>(g.h)) continue;
          for (std::size_t n = 0; n < g.kw; ++n) {
            const long xj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.pad_left);
            if (xj < 0 || xj >= static_cast<long>(g.w)) continue;
            const T* src = xb + (static_cast<std::size_t>(yi) * g.w + static_cast<std::size_t>(xj)) * g.cin;
            std::copy(src, src + g.cin, row + (m * g.kw + n) * g.cin);
          }
        }
      }
    }
  });
}

template <typename T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& g, std::span<T> gx) {
  parallel_for(g.batch, [&](std::size_t b) {
    T* xb = gx.data() + b * g.h * g.w * g.cin;
    for (std::size_t i = 0; i < g.ho; ++i) {
      for (std::size_t j = 0; j < g.wo; ++j) {
        const T* row = cols.data() + ((b * g.ho + i) * g.wo + j) * g.patch();
        for (std::size_t m = 0; m < g.kh; ++m) {
          const long yi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.pad_top);
          if (yi < 0 || yi >= static_cast<long>(g.h)) continue;
          for (std::size_t n = 0; n < g.kw; ++n) {
            const long xj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.pad_left);
            if (xj < 0 || xj >= static_cast<long>(g.w)) continue;
            T* dst = xb + (static_cast<std::size_t>(yi) * g.w + static_cast<std::size_t>(xj)) * g.cin;
            const T* src = row + (m * g.kw + n) * g.cin;
            for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>("maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
                      [](T x, T y) { return x >= y ? T(1) : T(0); }, [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary_op<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary_op<T>("add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (!(v > T(0))) throw NumericError("log: input must be strictly positive");
  }
  return unary_op<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (v < T(0)) throw NumericError("sqrt: input must be non-negative");
  }
  return unary_op<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                     [](T, T y) { return y > T(0) ? T(0.5) / y : std::numeric_limits<T>::infinity(); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary_op<T>(
      "softplus", x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary_op<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_op<T>(
      "silu", x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
  return unary_op<T>("clamp_min", x, [floor](T v) { return v > floor ? v : floor; },
                     [floor](T v, T) { return v > floor ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Contractions

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr const char* op = "matmul";
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_fail(op, "operands need rank >= 2, got " + pair_string(as, bs));
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) shape_fail(op, "inner extents differ: " + pair_string(as, bs));
  const std::size_t n = bs.back();

  if (bs.size() == 2) {
    const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);
    std::vector<T> out(rows * n);
    MutMap<T>(out.data(), rows, n).noalias() = ConstMap<T>(a.data().data(), rows, k) * ConstMap<T>(b.data().data(), k, n);
    return make_op_result<T>(op, std::move(out_shape), std::move(out), {a, b},
                             [rows, k, n](detail::BackwardContext<T>& ctx) {
                               ConstMap<T> g(ctx.grad_output().data(), rows, n);
                               if (auto ga = ctx.grad(0); !ga.empty()) {
                                 MutMap<T>(ga.data(), rows, k).noalias() += g * ConstMap<T>(ctx.input(1).data(), k, n).transpose();
                               }
                               if (auto gb = ctx.grad(1); !gb.empty()) {
                                 MutMap<T>(gb.data(), k, n).noalias() += ConstMap<T>(ctx.input(0).data(), rows, k).transpose() * g;
                               }
                             });
  }

  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    shape_fail(op, "batched operands need identical leading extents: " + pair_string(as, bs));
  }
  const std::size_t m = as[as.size() - 2];
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  parallel_for(batch, [&](std::size_t i) {
    MutMap<T>(out.data() + i * m * n, m, n).noalias() =
        ConstMap<T>(ap + i * m * k, m, k) * ConstMap<T>(bp + i * k * n, k, n);
  });
  return make_op_result<T>(op, std::move(out_shape), std::move(out), {a, b},
                           [batch, m, k, n](detail::BackwardContext<T>& ctx) {
                             const T* g = ctx.grad_output().data();
                             const T* x = ctx.input(0).data();
                             const T* y = ctx.input(1).data();
                             auto ga = ctx.grad(0);
                             auto gb = ctx.grad(1);
                             parallel_for(batch, [&](std::size_t i) {
                               ConstMap<T> gi(g + i * m * n, m, n);
                               if (!ga.empty()) {
                                 MutMap<T>(ga.data() + i * m * k, m, k).noalias() +=
                                     gi * ConstMap<T>(y + i * k * n, k, n).transpose();
                               }
                               if (!gb.empty()) {
                                 MutMap<T>(gb.data() + i * k * n, k, n).noalias() +=
                                     ConstMap<T>(x + i * m * k, m, k).transpose() * gi;
                               }
                             });
                           });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), options);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    shape_fail("conv2d", "bias must be (" + std::to_string(g.cout) + "), got " + shape_string(bias.shape()));
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 3);
  out_shape.insert(out_shape.end(), {g.ho, g.wo, g.cout});
  const std::size_t out_rows = g.batch * g.ho * g.wo;
  std::vector<T> out(out_rows * g.cout, T(0));
  const auto xv = x.data();
  const auto wv = weight.data();

  if (!g.depthwise) {
    std::vector<T> cols;
    im2col<T>(xv, g, cols);
    MutMap<T>(out.data(), out_rows, g.cout).noalias() =
        ConstMap<T>(cols.data(), out_rows, g.patch()) * ConstMap<T>(wv.data(), g.patch(), g.cout);
  } else {
    parallel_for(g.batch, [&](std::size_t b) {
      const T* xb = xv.data() + b * g.h * g.w * g.cin;
      for (std::size_t i = 0; i < g.ho; ++i) {
        for (std::size_t j = 0; j < g.wo; ++j) {
          T* o = out.data() + ((b * g.ho + i) * g.wo + j) * g.cout;
          for (std::size_t m = 0; m < g.kh; ++m) {
            const long yi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.pad_top);
            if (yi < 0 || yi >= static_cast<long>(g.h)) continue;
            for (std::size_t n = 0; n < g.kw; ++n) {
              const long xj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.pad_left);
              if (xj < 0 || xj >= static_cast<long>(g.w)) continue;
              const T* src = xb + (static_cast<std::size_t>(yi) * g.w + static_cast<std::size_t>(xj)) * g.cin;
              const T* k = wv.data() + (m * g.kw + n) * g.cout;
              for (std::size_t c = 0; c < g.cin; ++c) o[c] += src[c] * k[c];
            }
          }
        }
      }
    });
  }
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < out_rows; ++r) {
      for (std::size_t c = 0; c < g.cout; ++c) out[r * g.cout + c] += bv[c];
    }
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op_result<T>("conv2d", std::move(out_shape), std::move(out), inputs,
                           [g, has_bias, out_rows](detail::BackwardContext<T>& ctx) {
                             const auto gy = ctx.grad_output();
                             const auto xv = ctx.input(0);
                             const auto wv = ctx.input(1);
                             auto gx = ctx.grad(0);
                             auto gw = ctx.grad(1);
                             if (has_bias) {
                               if (auto gb = ctx.grad(2); !gb.empty()) {
                                 for (std::size_t r = 0; r < out_rows; ++r) {
                                   for (std::size_t c = 0; c < g.cout; ++c) gb[c] += gy[r * g.cout + c];
                                 }
                               }
                             }
                             if (!g.depthwise) {
                               ConstMap<T> gm(gy.data(), out_rows, g.cout);
                               if (!gw.empty()) {
                                 std::vector<T> cols;
                                 im2col<T>(xv, g, cols);
                                 MutMap<T>(gw.data(), g.patch(), g.cout).noalias() +=
                                     ConstMap<T>(cols.data(), out_rows, g.patch()).transpose() * gm;
                               }
                               if (!gx.empty()) {
                                 std::vector<T> gcols(out_rows * g.patch());
                                 MutMap<T>(gcols.data(), out_rows, g.patch()).noalias() =
                                     gm * ConstMap<T>(wv.data(), g.patch(), g.cout).transpose();
                                 col2im_add<T>(gcols, g, gx);
                               }
                               return;
                             }
                             for (std::size_t b = 0; b < g.batch; ++b) {
                               const std::size_t xoff = b * g.h * g.w * g.cin;
                               for (std::size_t i = 0; i < g.ho; ++i) {
                                 for (std::size_t j = 0; j < g.wo; ++j) {
                                   const T* go = gy.data() + ((b * g.ho + i) * g.wo + j) * g.cout;
                                   for (std::size_t m = 0; m < g.kh; ++m) {
                                     const long yi = static_cast<long>(i * g.stride + m) - static_cast<long>(g.pad_top);
                                     if (yi < 0 || yi >= static_cast<long>(g.h)) continue;
                                     for (std::size_t n = 0; n < g.kw; ++n) {
                                       const long xj = static_cast<long>(j * g.stride + n) - static_cast<long>(g.pad_left);
                                       if (xj < 0 || xj >= static_cast<long>(g.w)) continue;
                                       const std::size_t xi =
                                           xoff + (static_cast<std::size_t>(yi) * g.w + static_cast<std::size_t>(xj)) * g.cin;
                                       const std::size_t wi = (m * g.kw + n) * g.cout;
                                       for (std::size_t c = 0; c < g.cin; ++c) {
                                         if (!gw.empty()) gw[wi + c] += go[c] * xv[xi + c];
                                         if (!gx.empty()) gx[xi + c] += go[c] * wv[wi + c];
                                       }
                                     }
                                   }
                                 }
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  return make_op_result<T>("reshape", std::move(shape), x.to_vector(), {x}, [](detail::BackwardContext<T>& ctx) {
    auto gx = ctx.grad(0);
    const auto g = ctx.grad_output();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> check(order);
  std::sort(check.begin(), check.end());
  std::vector<std::size_t> ident(rank);
  std::iota(ident.begin(), ident.end(), 0);
  if (check != ident) shape_fail("permute", "order is not a permutation of rank " + std::to_string(rank));
  Shape out_shape;
  auto idx = permute_index(x.shape(), order, out_shape);
  const auto xv = x.data();
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  return make_op_result<T>("permute", std::move(out_shape), std::move(out), {x},
                           [idx = std::move(idx)](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[idx[i]] += g[i];
                           });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const auto a0 = normalize_axis(axis0, x.rank(), "transpose");
  const auto a1 = normalize_axis(axis1, x.rank(), "transpose");
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[a0], order[a1]);
  return permute(x, order);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const auto ax = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin > end || end > s.extent) {
    shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for extent " +
                            std::to_string(s.extent));
  }
  const std::size_t len = end - begin;
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const auto xv = x.data();
  std::vector<T> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const T* src = xv.data() + (o * s.extent + begin) * s.inner;
    std::copy(src, src + len * s.inner, out.data() + o * len * s.inner);
  }
  return make_op_result<T>("slice", std::move(out_shape), std::move(out), {x},
                           [s, begin, len](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               T* dst = gx.data() + (o * s.extent + begin) * s.inner;
                               const T* src = g.data() + o * len * s.inner;
                               for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                             }
                           });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const auto ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != out_shape.size()) shape_fail("concat", "rank mismatch " + pair_string(parts[0].shape(), ps));
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (k != ax && ps[k] != parts[0].shape()[k]) shape_fail("concat", "extent mismatch " + pair_string(parts[0].shape(), ps));
    }
    extents.push_back(ps[ax]);
    out_shape[ax] += ps[ax];
  }
  const AxisSplit s = split_at(out_shape, ax);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const std::size_t len = extents[p];
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(pv.data() + o * len * s.inner, pv.data() + (o + 1) * len * s.inner,
                out.data() + (o * s.extent + offset) * s.inner);
    }
    offset += len;
  }
  return make_op_result<T>("concat", std::move(out_shape), std::move(out), parts,
                           [s, extents](detail::BackwardContext<T>& ctx) {
                             const auto g = ctx.grad_output();
                             std::size_t offset = 0;
                             for (std::size_t p = 0; p < extents.size(); ++p) {
                               const std::size_t len = extents[p];
                               if (auto gp = ctx.grad(p); !gp.empty()) {
                                 for (std::size_t o = 0; o < s.outer; ++o) {
                                   const T* src = g.data() + (o * s.extent + offset) * s.inner;
                                   T* dst = gp.data() + o * len * s.inner;
                                   for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                                 }
                               }
                               offset += len;
                             }
                           });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::size_t>& index) {
  const auto ax = normalize_axis(axis, x.rank(), "index_select");
  const AxisSplit s = split_at(x.shape(), ax);
  for (auto i : index) {
    if (i >= s.extent) shape_fail("index_select", "index " + std::to_string(i) + " out of range " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = index.size();
  const auto xv = x.data();
  std::vector<T> out(s.outer * index.size() * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < index.size(); ++k) {
      const T* src = xv.data() + (o * s.extent + index[k]) * s.inner;
      std::copy(src, src + s.inner, out.data() + (o * index.size() + k) * s.inner);
    }
  }
  return make_op_result<T>("index_select", std::move(out_shape), std::move(out), {x},
                           [s, index](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               for (std::size_t k = 0; k < index.size(); ++k) {
                                 T* dst = gx.data() + (o * s.extent + index[k]) * s.inner;
                                 const T* src = g.data() + (o * index.size() + k) * s.inner;
                                 for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) shape_fail("layer_norm", "input must have at least one axis");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    shape_fail("layer_norm", "gamma/beta must be (" + std::to_string(c) + "), got " +
                                 pair_string(gamma.shape(), beta.shape()));
  }
  const std::size_t rows = x.numel() / std::max<std::size_t>(c, 1);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += xr[i];
    mean /= T(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= T(c);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i) {
      const T h = (xr[i] - mean) * rstd[r];
      xhat[r * c + i] = h;
      out[r * c + i] = h * gv[i] + bv[i];
    }
  }
  return make_op_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](detail::BackwardContext<T>& ctx) {
        const auto g = ctx.grad_output();
        const auto gv = ctx.input(1);
        auto gx = ctx.grad(0);
        auto ggamma = ctx.grad(1);
        auto gbeta = ctx.grad(2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * c;
          const T* hr = xhat.data() + r * c;
          if (!ggamma.empty()) {
            for (std::size_t i = 0; i < c; ++i) ggamma[i] += gr[i] * hr[i];
          }
          if (!gbeta.empty()) {
            for (std::size_t i = 0; i < c; ++i) gbeta[i] += gr[i];
          }
          if (!gx.empty()) {
            T mean_g = 0, mean_gh = 0;
            for (std::size_t i = 0; i < c; ++i) {
              const T gi = gr[i] * gv[i];
              mean_g += gi;
              mean_gh += gi * hr[i];
            }
            mean_g /= T(c);
            mean_gh /= T(c);
            for (std::size_t i = 0; i < c; ++i) {
              gx[r * c + i] += rstd[r] * (gr[i] * gv[i] - mean_g - hr[i] * mean_gh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T sum = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= sum;
    }
  }
  return make_op_result<T>("softmax", x.shape(), std::move(out), {x}, [s](detail::BackwardContext<T>& ctx) {
    auto gx = ctx.grad(0);
    const auto g = ctx.grad_output();
    const auto y = ctx.output();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

Shape reduced_shape(const Shape& in, std::size_t axis, bool keepdim) {
  Shape out = in;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

template <typename T>
Tensor<T> reduce_linear(const char* op, const Tensor<T>& x, int axis, bool keepdim, bool mean) {
  const auto ax = normalize_axis(axis, x.rank(), op);
  const AxisSplit s = split_at(x.shape(), ax);
  if (mean && s.extent == 0) shape_fail(op, "mean over empty axis");
  const T factor = mean ? T(1) / T(s.extent) : T(1);
  const auto xv = x.data();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* src = xv.data() + (o * s.extent + k) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  if (mean) {
    for (auto& v : out) v *= factor;
  }
  return make_op_result<T>(op, reduced_shape(x.shape(), ax, keepdim), std::move(out), {x},
                           [s, factor](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               for (std::size_t k = 0; k < s.extent; ++k) {
                                 T* dst = gx.data() + (o * s.extent + k) * s.inner;
                                 const T* src = g.data() + o * s.inner;
                                 for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in] * factor;
                               }
                             }
                           });
}

}  // namespace

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis, bool keepdim) {
  return reduce_linear<T>("reduce_sum", x, axis, keepdim, false);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis, bool keepdim) {
  return reduce_linear<T>("reduce_mean", x, axis, keepdim, true);
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis, bool keepdim) {
  const auto ax = normalize_axis(axis, x.rank(), "reduce_max");
  const AxisSplit s = split_at(x.shape(), ax);
  if (s.extent == 0) shape_fail("reduce_max", "max over empty axis");
  const auto xv = x.data();
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.extent * s.inner + in;
      for (std::size_t k = 1; k < s.extent; ++k) {
        const std::size_t i = (o * s.extent + k) * s.inner + in;
        if (xv[i] > xv[best]) best = i;
      }
      out[o * s.inner + in] = xv[best];
      arg[o * s.inner + in] = best;
    }
  }
  return make_op_result<T>("reduce_max", reduced_shape(x.shape(), ax, keepdim), std::move(out), {x},
                           [arg = std::move(arg)](detail::BackwardContext<T>& ctx) {
                             auto gx = ctx.grad(0);
                             const auto g = ctx.grad_output();
                             for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                           });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  return reduce_sum(reshape(x, Shape{x.numel()}), 0);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return reduce_mean(reshape(x, Shape{x.numel()}), 0);
}

#define MIXSSM_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                        \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> index_select(const Tensor<T>&, int, const std::vector<std::size_t>&);         \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> sqrt(const Tensor<T>&);                                                       \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> silu(const Tensor<T>&);                                                       \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template Tensor<T> reduce_sum(const Tensor<T>&, int, bool);                                      \
  template Tensor<T> reduce_mean(const Tensor<T>&, int, bool);                                     \
  template Tensor<T> reduce_max(const Tensor<T>&, int, bool);                                      \
  template Tensor<T> sum_all(const Tensor<T>&);                                                    \
  template Tensor<T> mean_all(const Tensor<T>&);

MIXSSM_INSTANTIATE_OPS(float)
MIXSSM_INSTANTIATE_OPS(double)

}  // namespace mixssm

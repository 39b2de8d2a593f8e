#pragma once

// Direct, loop-level references shared by the unit and acceptance tests.

#include <cmath>
#include <cstddef>
#include <vector>

#include "mixssm/tensor.hpp"

namespace mixssm::testing {

// Direct evaluation of a SAME, stride-1 convolution with bias.
inline Tensor<double> naive_conv(const Tensor<double>& v, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t h = v.dim(0), wd = v.dim(1), cin = v.dim(2);
  const std::size_t kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const long pt = long(kh - 1) / 2, pl = long(kw - 1) / 2;
  std::vector<double> out(h * wd * cout, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < wd; ++j)
      for (std::size_t k = 0; k < cout; ++k) {
        double acc = b.data()[k];
        for (std::size_t l = 0; l < cin; ++l)
          for (std::size_t m = 0; m < kh; ++m)
            for (std::size_t n = 0; n < kw; ++n) {
              const long y = long(i + m) - pt, x = long(j + n) - pl;
              if (y < 0 || x < 0 || y >= long(h) || x >= long(wd)) continue;
              acc += v.at({std::size_t(y), std::size_t(x), l}) * w.at({m, n, l, k});
            }
        out[(i * wd + j) * cout + k] = acc;
      }
  return Tensor<double>({h, wd, cout}, out);
}

// Token-by-token recurrence, one state vector per channel.
inline std::vector<double> sequential_scan(const Tensor<double>& u, const Tensor<double>& delta, const Tensor<double>& a,
                                           const Tensor<double>& b, const Tensor<double>& c, const Tensor<double>& d) {
  const std::size_t len = u.dim(0), ch = u.dim(1), ns = a.dim(1);
  std::vector<double> y(len * ch);
  for (std::size_t cc = 0; cc < ch; ++cc) {
    std::vector<double> h(ns, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      double out = d.data()[cc] * u.at({t, cc});
      for (std::size_t n = 0; n < ns; ++n) {
        const double dt = delta.at({t, cc});
        h[n] = std::exp(dt * a.at({cc, n})) * h[n] + dt * b.at({t, n}) * u.at({t, cc});
        out += c.at({t, n}) * h[n];
      }
      y[t * ch + cc] = out;
    }
  }
  return y;
}

// Confusion matrix and macro scores straight from the definitions.
struct BruteMetrics {
  double acc, prec, rec, f1;
  std::vector<std::vector<std::size_t>> matrix;
};

inline BruteMetrics brute_metrics(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth, std::size_t k) {
  BruteMetrics b{0, 0, 0, 0, std::vector<std::vector<std::size_t>>(k, std::vector<std::size_t>(k, 0))};
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < pred.size(); ++i) b.matrix[t][p] += truth[i] == t && pred[i] == p;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  b.acc = double(hits) / double(pred.size());
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && truth[i] == c;
      fp += pred[i] == c && truth[i] != c;
      fn += pred[i] != c && truth[i] == c;
    }
    const double p = tp + fp ? double(tp) / double(tp + fp) : 0;
    const double r = tp + fn ? double(tp) / double(tp + fn) : 0;
    b.prec += p / double(k);
    b.rec += r / double(k);
    b.f1 += (p + r > 0 ? 2 * p * r / (p + r) : 0) / double(k);
  }
  return b;
}

}  // namespace mixssm::testing

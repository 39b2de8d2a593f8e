#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mixssm/fusion.hpp"
#include "mixssm/gradcheck.hpp"
#include "mixssm/ops.hpp"
#include "test_util.hpp"

using namespace mixssm;
using mixssm::testing::bitwise_equal;
using mixssm::testing::max_abs_diff;
using mixssm::testing::random_tensor;
using T64 = Tensor<double>;

namespace {

std::vector<T64> random_branches(std::size_t n, const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::vector<T64> out;
  for (std::size_t m = 0; m < n; ++m) out.push_back(random_tensor(shape, rng, stddev));
  return out;
}

SelectiveParams<double> random_selective(std::size_t ch, std::size_t n, std::size_t k, Pooling pool, Rng& rng,
                                         double stddev = 0.5) {
  auto p = init_selective<double>(ch, n, k, 2, pool, Aggregation::selective, rng);
  for_each_parameter(p, "", [&](const std::string&, const T64& t) {
    auto h = t;
    for (auto& x : h.mutable_data()) x += rng.normal() * stddev;
  });
  return p;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// g (C) -> C x n weights by explicit loops.
std::vector<double> weights_oracle(const T64& g, const SelectiveParams<double>& p) {
  const std::size_t ch = p.w1.dim(0), hid = p.w1.dim(1), n = p.strategies;
  std::vector<double> h(hid);
  for (std::size_t j = 0; j < hid; ++j) {
    double acc = p.b1.data()[j];
    for (std::size_t c = 0; c < ch; ++c) acc += g.data()[c] * p.w1.at({c, j});
    h[j] = gelu_ref(acc);
  }
  std::vector<double> out(ch * n);
  for (std::size_t c = 0; c < ch; ++c) {
    std::vector<double> z(n);
    for (std::size_t m = 0; m < n; ++m) {
      double acc = p.b2.data()[c * n + m];
      for (std::size_t j = 0; j < hid; ++j) acc += h[j] * p.w2.at({j, c * n + m});
      z[m] = acc;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0;
    for (auto& v : z) total += (v = std::exp(v - mx));
    for (std::size_t m = 0; m < n; ++m) out[c * n + m] = z[m] / total;
  }
  return out;
}

}  // namespace

TEST_CASE("fuse_sum") {
  Rng rng(1);
  const auto v = random_tensor({3, 3, 4}, rng);
  CHECK(bitwise_equal(fuse_sum<double>({v, T64::zeros({3, 3, 4})}), v));
  CHECK(max_abs_diff(fuse_sum<double>({v, v, v, v}), scale(v, 4.0)) < 1e-12);
  auto bs = random_branches(4, {3, 3, 4}, rng);
  auto rev = bs;
  std::reverse(rev.begin(), rev.end());
  CHECK(max_abs_diff(fuse_sum(bs), fuse_sum(rev)) < 1e-12);
  CHECK_THROWS_AS(fuse_sum<double>({v, T64::zeros({3, 3, 5})}), ShapeError);
  CHECK_THROWS_AS(fuse_sum<double>({}), ShapeError);
}

TEST_CASE("global pooling") {
  const T64 f({2, 2, 1}, {1, 2, 3, 4});
  CHECK(pool_global(f, Pooling::average).item() == doctest::Approx(2.5));
  CHECK(pool_global(f, Pooling::max).item() == doctest::Approx(4.0));
  CHECK(pool_global(f, Pooling::l2).item() == doctest::Approx(std::sqrt(7.5)).epsilon(1e-12));
  CHECK(pool_global(f, Pooling::l2).item() == doctest::Approx(2.7386).epsilon(1e-4));

  const auto constant = T64::full({3, 5, 2}, 1.75);
  for (auto m : {Pooling::average, Pooling::max, Pooling::l2, Pooling::stochastic}) {
    const auto g = pool_global(constant, m);
    CHECK(g.shape() == Shape{2});
    for (auto x : g.data()) CHECK(x == doctest::Approx(1.75));
  }

  // Expectation over softmax(x) weighted x, per channel.
  const auto e = pool_global(f, Pooling::stochastic).item();
  double num = 0, den = 0;
  for (double x : {1.0, 2.0, 3.0, 4.0}) {
    num += x * std::exp(x);
    den += std::exp(x);
  }
  CHECK(e == doctest::Approx(num / den).epsilon(1e-12));

  // Training draws positions from the stream: every draw is a map value and
  // the empirical frequency tracks the softmax.
  Rng rng(5);
  PoolContext train{true, &rng};
  std::vector<int> hits(5, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const double s = pool_global(f, Pooling::stochastic, train).item();
    REQUIRE((s == 1 || s == 2 || s == 3 || s == 4));
    ++hits[int(s)];
  }
  CHECK(double(hits[4]) / draws == doctest::Approx(std::exp(4.0) / den).epsilon(0.03));
  CHECK_THROWS(pool_global(f, Pooling::stochastic, PoolContext{true, nullptr}));

  CHECK_THROWS_AS(pool_global(T64::zeros({2, 2}), Pooling::average), ShapeError);
  CHECK_THROWS_AS(parse_pooling("median"), ConfigError);
  for (auto m : {Pooling::average, Pooling::max, Pooling::l2, Pooling::stochastic})
    CHECK(parse_pooling(to_string(m)) == m);

  // Leading axes are batch.
  Rng r2(2);
  const auto batch = random_tensor({3, 4, 4, 5}, r2);
  const auto pooled = pool_global(batch, Pooling::max);
  CHECK(pooled.shape() == Shape{3, 5});
  CHECK(bitwise_equal(slice(pooled, 0, 1, 2), pool_global(slice(batch, 0, 1, 2), Pooling::max)));
}

TEST_CASE("selective weights") {
  Rng rng(3);
  SUBCASE("zero MLP output gives uniform weights") {
    auto p = init_selective<double>(8, 4, 1, 4, Pooling::average, Aggregation::selective, rng);
    for (auto& x : p.w2.mutable_data()) x = 0;
    const auto w = selective_weights(random_tensor({8}, rng), p);
    CHECK(w.shape() == Shape{8, 4});
    for (auto x : w.data()) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("saturated logit") {
    auto p = init_selective<double>(8, 4, 1, 4, Pooling::average, Aggregation::selective, rng);
    for (auto& x : p.w2.mutable_data()) x = 0;
    for (std::size_t c = 0; c < 8; ++c) p.b2.mutable_data()[c * 4 + 2] = 20;
    const auto w = selective_weights(random_tensor({8}, rng), p);
    for (std::size_t c = 0; c < 8; ++c) CHECK(w.at({c, 2}) > 0.9999);
  }
  SUBCASE("matches loop oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      auto p = random_selective(8, 4, 1, Pooling::average, r);
      const auto g = random_tensor({8}, r);
      const auto w = selective_weights(g, p);
      const auto ref = weights_oracle(g, p);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(w.data()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    }
  }
  SUBCASE("single strategy") {
    auto p = random_selective(4, 1, 1, Pooling::average, rng);
    const auto w = selective_weights(random_tensor({4}, rng), p);
    CHECK(w.shape() == Shape{4, 1});
    for (auto x : w.data()) CHECK(x == doctest::Approx(1.0));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(init_selective<double>(8, 0, 3, 4, Pooling::average, Aggregation::selective, rng), ConfigError);
    CHECK_THROWS_AS(init_selective<double>(8, 4, 3, 3, Pooling::average, Aggregation::selective, rng), ConfigError);
    CHECK_THROWS_AS(init_selective<double>(8, 4, 4, 4, Pooling::average, Aggregation::selective, rng), ConfigError);
    auto p = init_selective<double>(8, 4, 1, 4, Pooling::average, Aggregation::selective, rng);
    CHECK_THROWS_AS(selective_weights(random_tensor({6}, rng), p), ShapeError);
  }
}

TEST_CASE("selective combine") {
  Rng rng(4);
  const auto bs = random_branches(4, {2, 2, 2}, rng);

  std::vector<double> onehot(2 * 4, 0.0);
  onehot[0 * 4 + 1] = onehot[1 * 4 + 1] = 1;
  CHECK(bitwise_equal(selective_combine(bs, T64({2, 4}, onehot)), bs[1]));

  const std::vector<T64> same(4, bs[0]);
  CHECK(max_abs_diff(selective_combine(same, T64::full({2, 4}, 0.25)), bs[0]) < 1e-12);

  // Random convex weights against the elementwise formula.
  std::vector<double> wv(8);
  for (std::size_t c = 0; c < 2; ++c) {
    double total = 0;
    for (std::size_t m = 0; m < 4; ++m) total += (wv[c * 4 + m] = rng.uniform(0.1, 1.0));
    for (std::size_t m = 0; m < 4; ++m) wv[c * 4 + m] /= total;
  }
  const T64 w({2, 4}, wv);
  const auto out = selective_combine(bs, w);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        double ref = 0;
        for (std::size_t m = 0; m < 4; ++m) ref += wv[c * 4 + m] * bs[m].at({i, j, c});
        CHECK(out.at({i, j, c}) == doctest::Approx(ref).epsilon(1e-12));
      }

  CHECK_THROWS_AS(selective_combine(bs, T64::full({2, 3}, 0.3)), ShapeError);
  CHECK_THROWS_AS(selective_combine(bs, T64::full({3, 4}, 0.25)), ShapeError);
}

TEST_CASE("selective module") {
  Rng rng(6);
  const auto v = random_tensor({3, 3, 4}, rng);

  SUBCASE("elementwise baselines") {
    auto avg = init_selective<double>(4, 3, 3, 4, Pooling::average, Aggregation::average, rng);
    CHECK(!avg.w1.defined());
    CHECK(max_abs_diff(selective_module<double>({v, v, v}, avg), v) < 1e-12);
    auto mx = init_selective<double>(4, 2, 3, 4, Pooling::average, Aggregation::max, rng);
    CHECK(bitwise_equal(selective_module<double>({v, add_scalar(v, -1.0)}, mx), v));
    CHECK(bitwise_equal(selective_module<double>({add_scalar(v, -1.0), v}, mx), v));
    CHECK_THROWS_AS(parse_aggregation("sum"), ConfigError);
  }

  SUBCASE("k=1 equals the composed ops") {
    auto p = random_selective(4, 3, 1, Pooling::average, rng);
    const auto bs = random_branches(3, {3, 3, 4}, rng);
    T64 weights;
    const auto out = selective_module(bs, p, {}, &weights);
    const auto ref_w = selective_weights(pool_global(fuse_sum(bs), Pooling::average), p);
    CHECK(bitwise_equal(weights, ref_w));
    CHECK(bitwise_equal(out, selective_combine(bs, ref_w)));
  }

  SUBCASE("k=3 convolves the fused map before pooling") {
    auto p = random_selective(4, 2, 3, Pooling::max, rng);
    CHECK(p.dw_weight.shape() == Shape{3, 3, 1, 4});
    const auto bs = random_branches(2, {3, 3, 4}, rng);
    T64 weights;
    selective_module(bs, p, {}, &weights);
    const auto conv = conv2d(fuse_sum(bs), p.dw_weight, p.dw_bias, {1, Padding::same, 4});
    CHECK(bitwise_equal(weights, selective_weights(pool_global(conv, Pooling::max), p)));
  }

  SUBCASE("branch count must match strategies") {
    auto p = random_selective(4, 3, 1, Pooling::average, rng);
    CHECK_THROWS_AS(selective_module<double>({v, v}, p), ShapeError);
  }
}

TEST_CASE("selective module invariants on random inputs") {
  const Pooling pools[] = {Pooling::average, Pooling::max, Pooling::l2, Pooling::stochastic};
  const std::size_t kernels[] = {1, 3, 5, 7};
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    const std::size_t n = 1 + trial % 4;
    const std::size_t ch = 4 * (1 + trial % 3);
    const auto pool = pools[trial % 4];
    auto p = random_selective(ch, n, kernels[(trial / 4) % 4], pool, rng, 1.0);
    const auto bs = random_branches(n, {2, 1 + trial % 4, 3, ch}, rng, 2.0);
    T64 w;
    const auto out = selective_module(bs, p, {}, &w);
    CAPTURE(trial);

    REQUIRE(w.shape() == Shape{2, ch, n});
    for (std::size_t r = 0; r < 2 * ch; ++r) {
      double total = 0;
      for (std::size_t m = 0; m < n; ++m) {
        const double x = w.data()[r * n + m];
        CHECK(x > 0.0);
        CHECK(x <= 1.0);
        total += x;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }

    for (std::size_t i = 0; i < out.numel(); ++i) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& b : bs) {
        lo = std::min(lo, b.data()[i]);
        hi = std::max(hi, b.data()[i]);
      }
      CHECK(out.data()[i] >= lo - 1e-12);
      CHECK(out.data()[i] <= hi + 1e-12);
    }

    // Permute the branches and the matching weight-MLP output columns.
    std::vector<std::size_t> sigma(n);
    std::iota(sigma.begin(), sigma.end(), 0);
    rng.shuffle(sigma);
    auto q = p;
    q.w2 = T64(p.w2.shape(), p.w2.to_vector(), true);
    q.b2 = T64(p.b2.shape(), p.b2.to_vector(), true);
    auto w2 = q.w2.mutable_data();
    auto b2 = q.b2.mutable_data();
    const std::size_t hid = p.w2.dim(0);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t m = 0; m < n; ++m) {
        b2[c * n + m] = p.b2.data()[c * n + sigma[m]];
        for (std::size_t j = 0; j < hid; ++j) w2[j * ch * n + c * n + m] = p.w2.data()[j * ch * n + c * n + sigma[m]];
      }
    std::vector<T64> permuted;
    for (std::size_t m = 0; m < n; ++m) permuted.push_back(bs[sigma[m]]);
    CHECK(max_abs_diff(selective_module(permuted, q), out) < 1e-10);
  }
}

TEST_CASE("selective module gradients") {
  for (auto pool : {Pooling::average, Pooling::max, Pooling::l2, Pooling::stochastic}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(40 + seed);
      auto p = random_selective(4, 3, 3, pool, rng);
      std::vector<T64> inputs;
      for (std::size_t m = 0; m < 3; ++m) inputs.push_back(random_tensor({3, 3, 4}, rng, 1.0, true));
      const auto weights = random_tensor({3, 3, 4}, rng);
      const auto branches = inputs;
      for_each_parameter(p, "", [&](const std::string&, const T64& t) { inputs.push_back(t); });
      const auto report = finite_diff_check(
          [&] { return sum_all(mul(selective_module(branches, p), weights)); }, inputs, 1e-5, 1e-3);
      CAPTURE(to_string(pool));
      CAPTURE(seed);
      CHECK(report.components > 150);
      CHECK(report.pass);
    }
  }
}

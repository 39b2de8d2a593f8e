#include <cmath>
#include <functional>

#include "doctest.h"
#include "mixssm/encoders.hpp"
#include "mixssm/gradcheck.hpp"
#include "mixssm/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mixssm;
using mixssm::testing::bitwise_equal;
using mixssm::testing::max_abs_diff;
using mixssm::testing::naive_conv;
using mixssm::testing::sequential_scan;
using mixssm::testing::random_tensor;
using T64 = Tensor<double>;

namespace {

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

T64 spatial_transpose(const T64& v) { return transpose(v, -3, -2); }

// Rescale freshly initialized parameters so gradient checks see O(1) signal.
template <typename P>
void randomize(P& p, Rng& rng, double stddev) {
  for (auto t : parameter_list<double>(p)) {
    for (auto& x : t.mutable_data()) x = rng.normal() * stddev;
  }
}

double branch_gradcheck(const std::function<T64(const T64&)>& branch, std::vector<T64> params, std::uint64_t seed) {
  Rng rng(seed);
  auto v = random_tensor({4, 4, 8}, rng);
  auto weights = random_tensor({4, 4, 8}, rng);
  params.push_back(v);
  auto report = finite_diff_check([&] { return sum_all(mul(branch(v), weights)); }, params, 1e-5, 1e-3);
  return report.max_rel_error;
}

}  // namespace

TEST_CASE("conv branch") {
  Rng rng(1);
  SUBCASE("identity 1x1 kernel reproduces the input") {
    ConvBranchParams<double> p;
    std::vector<double> eye(9, 0.0);
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    p.weight = T64({1, 1, 3, 3}, eye);
    p.bias = T64::zeros({3});
    p.activation = Activation::identity;
    auto v = random_tensor({4, 5, 3}, rng);
    CHECK(bitwise_equal(conv_branch(v, p), v));
  }
  SUBCASE("zero kernel leaves only the bias") {
    ConvBranchParams<double> p{T64::zeros({3, 3, 2, 2}), T64::full({2}, 5.0), Activation::identity};
    auto out = conv_branch(random_tensor({3, 3, 2}, rng), p);
    for (auto x : out.data()) CHECK(x == 5.0);
  }
  SUBCASE("matches a nested-loop convolution") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      auto v = random_tensor({5, 5, 2}, r);
      ConvBranchParams<double> p{random_tensor({3, 3, 2, 2}, r), random_tensor({2}, r), Activation::identity};
      CHECK(max_abs_diff(conv_branch(v, p), naive_conv(v, p.weight, p.bias)) < 1e-6);
    }
  }
  SUBCASE("channel mismatch is an error") {
    auto p = init_conv_branch<double>(4, rng);
    CHECK_THROWS_AS(conv_branch(random_tensor({3, 3, 2}, rng), p), ShapeError);
  }
  SUBCASE("1x1 kernels commute with spatial permutation") {
    ConvBranchParams<double> p{random_tensor({1, 1, 3, 3}, rng), random_tensor({3}, rng), Activation::gelu};
    auto v = random_tensor({2, 3, 3}, rng);
    auto perm = reshape(index_select(reshape(v, {6, 3}), 0, {4, 2, 0, 5, 1, 3}), {2, 3, 3});
    auto lhs = reshape(index_select(reshape(conv_branch(v, p), {6, 3}), 0, {4, 2, 0, 5, 1, 3}), {2, 3, 3});
    CHECK(max_abs_diff(lhs, conv_branch(perm, p)) < 1e-12);
  }
}

TEST_CASE("msa branch") {
  Rng rng(2);
  SUBCASE("a single token attends to itself") {
    auto p = init_msa_branch<double>(4, 2, rng);
    randomize(p, rng, 0.5);
    auto v = random_tensor({1, 1, 4}, rng);
    AttentionTrace<double> trace;
    auto out = msa_branch(v, p, &trace);
    CHECK(trace.weights.shape() == Shape{1, 2, 1, 1});
    for (auto w : trace.weights.data()) CHECK(w == 1.0);
    auto expected = matmul(matmul(reshape(v, {1, 4}), p.w_value), p.w_out);
    CHECK(max_abs_diff(reshape(out, {1, 4}), expected) < 1e-12);
  }
  SUBCASE("identical tokens give uniform attention") {
    auto p = init_msa_branch<double>(4, 1, rng);
    randomize(p, rng, 0.5);
    auto token = random_tensor({1, 1, 4}, rng);
    auto v = concat(std::vector<T64>(6, token), 1);
    v = reshape(v, {2, 3, 4});
    AttentionTrace<double> trace;
    msa_branch(v, p, &trace);
    for (auto w : trace.weights.data()) CHECK(std::abs(w - 1.0 / 6.0) < 1e-12);
  }
  SUBCASE("two-token oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      const std::size_t c = 3;
      auto p = init_msa_branch<double>(c, 1, r);
      randomize(p, r, 0.7);
      auto v = random_tensor({2, 1, c}, r);
      auto out = msa_branch(v, p);
      auto row = [&](const T64& w, std::size_t tok, std::size_t j) {
        double s = 0;
        for (std::size_t i = 0; i < c; ++i) s += v.at({tok, 0, i}) * w.at({i, j});
        return s;
      };
      double q[2][3], k[2][3], val[2][3];
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t j = 0; j < c; ++j) {
          q[t][j] = row(p.w_query, t, j);
          k[t][j] = row(p.w_key, t, j);
          val[t][j] = row(p.w_value, t, j);
        }
      for (std::size_t t = 0; t < 2; ++t) {
        double s[2];
        for (std::size_t u = 0; u < 2; ++u) {
          s[u] = 0;
          for (std::size_t j = 0; j < c; ++j) s[u] += q[t][j] * k[u][j];
          s[u] /= std::sqrt(double(c));
        }
        const double a0 = 1.0 / (1.0 + std::exp(s[1] - s[0]));
        const double a1 = 1.0 - a0;
        for (std::size_t o = 0; o < c; ++o) {
          double acc = 0;
          for (std::size_t j = 0; j < c; ++j) acc += (a0 * val[0][j] + a1 * val[1][j]) * p.w_out.at({j, o});
          CHECK(std::abs(out.at({t, 0, o}) - acc) < 1e-6);
        }
      }
    }
  }
  SUBCASE("attention rows sum to one") {
    auto p = init_msa_branch<double>(8, 4, rng);
    randomize(p, rng, 1.0);
    AttentionTrace<double> trace;
    msa_branch(random_tensor({2, 3, 3, 8}, rng, 3.0), p, &trace);
    const auto w = trace.weights;
    const std::size_t rows = w.numel() / 9;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 9; ++k) s += w.data()[r * 9 + k];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("heads must divide channels") { CHECK_THROWS_AS(init_msa_branch<double>(6, 4, rng), ConfigError); }
}

TEST_CASE("mlp branch") {
  Rng rng(3);
  SUBCASE("zero input with zero biases maps to zero") {
    auto p = init_mlp_branch<double>(4, 8, rng);
    auto out = mlp_branch(T64::zeros({2, 2, 4}), p);
    for (auto x : out.data()) CHECK(x == 0.0);
  }
  SUBCASE("commutes with spatial permutation") {
    auto p = init_mlp_branch<double>(3, 6, rng);
    randomize(p, rng, 0.5);
    auto v = random_tensor({2, 2, 3}, rng);
    const std::vector<std::size_t> perm{3, 0, 2, 1};
    auto shuffled = reshape(index_select(reshape(v, {4, 3}), 0, perm), {2, 2, 3});
    auto lhs = reshape(index_select(reshape(mlp_branch(v, p), {4, 3}), 0, perm), {2, 2, 3});
    CHECK(max_abs_diff(lhs, mlp_branch(shuffled, p)) < 1e-12);
  }
  SUBCASE("two-matmul oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      auto p = init_mlp_branch<double>(3, 6, r);
      randomize(p, r, 0.8);
      auto v = random_tensor({1, 1, 3}, r);
      auto out = mlp_branch(v, p);
      std::vector<double> h(6);
      for (std::size_t i = 0; i < 6; ++i) {
        double s = p.b1.data()[i];
        for (std::size_t j = 0; j < 3; ++j) s += p.w1.at({j, i}) * v.data()[j];
        h[i] = gelu_ref(s);
      }
      for (std::size_t o = 0; o < 3; ++o) {
        double s = p.b2.data()[o];
        for (std::size_t i = 0; i < 6; ++i) s += p.w2.at({i, o}) * h[i];
        CHECK(std::abs(out.data()[o] - s) < 1e-6);
      }
    }
  }
}

TEST_CASE("cross scan traversal orders") {
  T64 v({2, 2, 1}, {1, 2, 3, 4});  // [[a,b],[c,d]]
  auto s = cross_scan(v);
  CHECK(s[0].to_vector() == std::vector<double>{1, 2, 3, 4});
  CHECK(s[1].to_vector() == std::vector<double>{4, 3, 2, 1});
  CHECK(s[2].to_vector() == std::vector<double>{1, 3, 2, 4});
  CHECK(s[3].to_vector() == std::vector<double>{4, 2, 3, 1});

  T64 single({1, 1, 3}, {7, 8, 9});
  for (const auto& seq : cross_scan(single)) CHECK(seq.to_vector() == single.to_vector());

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t h = 1 + rng.below(5), w = 1 + rng.below(5);
    auto x = testing::random_integers<float>({2, h, w, 3}, rng, -1000, 1000);
    auto merged = cross_merge(cross_scan(x), h, w);
    CHECK(bitwise_equal(merged, scale(x, 4.0f)));
  }
}

TEST_CASE("selective scan core") {
  SUBCASE("memoryless passthrough") {
    Rng rng(5);
    const std::size_t len = 6, ch = 3, ns = 4;
    auto u = random_tensor({len, ch}, rng);
    auto out = selective_scan_core(u, T64::full({len, ch}, 1.0), T64::full({ch, ns}, -1e4), T64::full({len, ns}, 1.0),
                                   T64::full({len, ns}, 1.0 / ns), T64::zeros({ch}));
    CHECK(max_abs_diff(out, u) < 1e-12);
  }
  SUBCASE("pure accumulator gives prefix sums") {
    T64 u({5, 1}, {1, 2, 3, 4, 5});
    auto out = selective_scan_core(u, T64::full({5, 1}, 1.0), T64::zeros({1, 1}), T64::full({5, 1}, 1.0),
                                   T64::full({5, 1}, 1.0), T64::zeros({1}), 2);
    CHECK(out.to_vector() == std::vector<double>{1, 3, 6, 10, 15});
  }
  SUBCASE("blocked evaluation matches the sequential recurrence") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const std::size_t len = 16, ch = 3, ns = 4;
      auto u = random_tensor({len, ch}, rng);
      auto delta = testing::random_uniform({len, ch}, rng, 0.01, 1.0);
      auto a = testing::random_uniform({ch, ns}, rng, -2.0, -0.1);
      auto b = random_tensor({len, ns}, rng);
      auto c = random_tensor({len, ns}, rng);
      auto d = random_tensor({ch}, rng);
      const auto ref = sequential_scan(u, delta, a, b, c, d);
      for (std::size_t block : {1, 3, 5, 16, 64}) {
        auto out = selective_scan_core(u, delta, a, b, c, d, block);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.data()[i] - ref[i]) < 1e-5);
      }
    }
  }
  SUBCASE("vanishing step size leaves only the skip path") {
    Rng rng(6);
    const std::size_t len = 8, ch = 2, ns = 3;
    auto u = random_tensor({len, ch}, rng);
    auto d = random_tensor({ch}, rng);
    auto out = selective_scan_core(u, T64::full({len, ch}, 1e-8), T64::full({ch, ns}, -1.0),
                                   random_tensor({len, ns}, rng), random_tensor({len, ns}, rng), d);
    CHECK(max_abs_diff(out, mul(u, d)) < 1e-5);
  }
  SUBCASE("gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed + 40);
      const std::size_t len = 7, ch = 2, ns = 3;
      std::vector<T64> in{random_tensor({2, len, ch}, rng), testing::random_uniform({2, len, ch}, rng, 0.1, 1.0),
                          testing::random_uniform({ch, ns}, rng, -1.5, -0.2), random_tensor({2, len, ns}, rng),
                          random_tensor({2, len, ns}, rng), random_tensor({ch}, rng)};
      auto w = random_tensor({2, len, ch}, rng);
      auto report = finite_diff_check(
          [&] { return sum_all(mul(selective_scan_core(in[0], in[1], in[2], in[3], in[4], in[5], 3), w)); }, in, 1e-5,
          1e-4);
      CHECK(report.max_rel_error < 1e-4);
    }
  }
  SUBCASE("state dimension zero is a configuration error") {
    Rng rng(1);
    CHECK_THROWS_AS(init_ssm_branch<double>(4, 0, false, rng), ConfigError);
  }
}

TEST_CASE("ssm branch") {
  Rng rng(7);
  SUBCASE("single token: four identical directions through the output mix") {
    auto p = init_ssm_branch<double>(4, 3, false, rng);
    randomize(p, rng, 0.5);
    auto v = random_tensor({1, 1, 4}, rng);
    auto scanned = selective_scan(reshape(v, {1, 4}), p.directions[0]);
    auto expected = matmul(scale(scanned, 4.0), p.out_weight);
    CHECK(max_abs_diff(reshape(ssm_branch(v, p), {1, 4}), expected) < 1e-12);
  }
  SUBCASE("spatial transpose symmetry with shared directions") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      auto p = init_ssm_branch<double>(4, 3, false, r);
      randomize(p, r, 0.5);
      auto v = random_tensor({3, 3, 4}, r);
      CHECK(max_abs_diff(ssm_branch(spatial_transpose(v), p), spatial_transpose(ssm_branch(v, p))) < 1e-10);
    }
  }
  SUBCASE("zero input maps to zero") {
    auto p = init_ssm_branch<double>(4, 8, true, rng);
    const auto out = ssm_branch(T64::zeros({3, 2, 4}), p);
    for (auto x : out.data()) CHECK(x == 0.0);
  }
  SUBCASE("initial A is strictly negative, initial step sizes lie in [1e-3, 1e-1]") {
    auto p = init_ssm_branch<double>(6, 8, false, rng);
    const auto a = scale(exp(p.directions[0].a_log), -1.0);
    for (auto x : a.data()) CHECK(x < 0.0);
    const auto steps = softplus(p.directions[0].delta_bias);
    for (auto x : steps.data()) {
      CHECK(x >= 1e-3 - 1e-12);
      CHECK(x <= 1e-1 + 1e-12);
    }
  }
  SUBCASE("separate direction parameters") {
    auto p = init_ssm_branch<double>(4, 2, true, rng);
    CHECK(p.directions.size() == 4);
    CHECK(ssm_branch(random_tensor({2, 3, 4}, rng), p).shape() == Shape{2, 3, 4});
  }
}

TEST_CASE("all branches preserve shape") {
  Rng rng(8);
  auto conv = init_conv_branch<float>(8, rng);
  auto msa = init_msa_branch<float>(8, 2, rng);
  auto mlp = init_mlp_branch<float>(8, 16, rng);
  auto ssm = init_ssm_branch<float>(8, 4, false, rng);
  for (Shape s : {Shape{1, 1, 8}, Shape{2, 5, 8}, Shape{3, 4, 4, 8}, Shape{7, 1, 8}}) {
    auto v = random_tensor<float>(s, rng);
    CHECK(conv_branch(v, conv).shape() == s);
    CHECK(msa_branch(v, msa).shape() == s);
    CHECK(mlp_branch(v, mlp).shape() == s);
    CHECK(ssm_branch(v, ssm).shape() == s);
  }
}

TEST_CASE("branch gradients over all parameters on a 4x4x8 map") {
  Rng rng(9);
  auto conv = init_conv_branch<double>(8, rng);
  randomize(conv, rng, 0.3);
  CHECK(branch_gradcheck([&](const T64& v) { return conv_branch(v, conv); }, parameter_list<double>(conv), 1) < 1e-3);

  auto msa = init_msa_branch<double>(8, 2, rng);
  randomize(msa, rng, 0.4);
  CHECK(branch_gradcheck([&](const T64& v) { return msa_branch(v, msa); }, parameter_list<double>(msa), 2) < 1e-3);

  auto mlp = init_mlp_branch<double>(8, 16, rng);
  randomize(mlp, rng, 0.4);
  CHECK(branch_gradcheck([&](const T64& v) { return mlp_branch(v, mlp); }, parameter_list<double>(mlp), 3) < 1e-3);

  auto ssm = init_ssm_branch<double>(8, 4, true, rng);
  randomize(ssm, rng, 0.3);
  CHECK(branch_gradcheck([&](const T64& v) { return ssm_branch(v, ssm); }, parameter_list<double>(ssm), 4) < 1e-3);
}

#include "mixssm/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "mixssm/gradcheck.hpp"
#include "mixssm/network.hpp"
#include "mixssm/ops.hpp"

namespace mixssm {
namespace {

using T64 = Tensor<double>;

T64 gaussian(const Shape& shape, Rng& rng, double stddev, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return T64(shape, std::move(v), requires_grad);
}

// Pushes freshly initialized parameters away from their init values so every
// path carries O(1) signal, and collects them as gradcheck inputs.
template <typename P>
std::vector<T64> perturbed(const P& p, Rng& rng, double stddev) {
  std::vector<T64> out;
  for_each_parameter(p, "", [&](const std::string&, const T64& t) {
    auto h = t;
    for (auto& x : h.mutable_data()) x += rng.normal() * stddev;
    out.push_back(t);
  });
  return out;
}

// Squares its input but reports d/dx = 3x.
T64 faulty_square(const T64& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * x.data()[i];
  return make_op_result<double>("faulty_square", x.shape(), std::move(v), {x}, [](detail::BackwardContext<double>& c) {
    auto gx = c.grad(0);
    const auto g = c.grad_output();
    const auto in = c.input(0).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 3.0 * in[i] * g[i];
  });
}

struct Case {
  std::function<T64()> objective;
  std::vector<T64> inputs;
};

using CaseBuilder = std::function<Case(Rng&)>;

// <y, w> accumulated in long double. A plain double reduction over the
// output adds enough roundoff to swamp central differences of components
// near 1e-7.
T64 probe_sum(const T64& y, const T64& w) {
  long double acc = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<long double>(y.data()[i]) * w.data()[i];
  return make_op_result<double>("probe_sum", Shape{}, {static_cast<double>(acc)}, {y},
                                [w](detail::BackwardContext<double>& c) {
                                  auto gy = c.grad(0);
                                  const double g = c.grad_output()[0];
                                  for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g * w.data()[i];
                                });
}

// Weighted sum so every output element has a distinct cotangent.
std::function<T64()> weighted(std::function<T64()> f, const Shape& shape, Rng& rng) {
  const auto w = gaussian(shape, rng, 1.0, false);
  return [f = std::move(f), w] { return probe_sum(f(), w); };
}

ModelConfig block_config() {
  ModelConfig c;
  c.image_height = c.image_width = 16;
  c.depths = {1};
  c.channels = {8};
  c.num_classes = 2;
  return c;
}

std::vector<std::pair<std::string, CaseBuilder>> builders(bool inject_fault) {
  const Shape map{4, 4, 8};
  std::vector<std::pair<std::string, CaseBuilder>> out;

  out.emplace_back("selective_scan_core", [](Rng& rng) {
    const std::size_t len = 7, ch = 3, n = 4;
    auto u = gaussian({2, len, ch}, rng, 1.0);
    std::vector<double> dv(2 * len * ch);
    for (auto& x : dv) x = rng.uniform(0.05, 0.6);
    T64 delta({2, len, ch}, dv, true);
    std::vector<double> av(ch * n);
    for (auto& x : av) x = -rng.uniform(0.2, 2.0);
    T64 a({ch, n}, av, true);
    auto b = gaussian({2, len, n}, rng, 1.0);
    auto c = gaussian({2, len, n}, rng, 1.0);
    auto d = gaussian({ch}, rng, 1.0);
    auto f = weighted([=] { return selective_scan_core(u, delta, a, b, c, d, 3); }, {2, len, ch}, rng);
    return Case{f, {u, delta, a, b, c, d}};
  });
  out.emplace_back("ssm_branch", [map](Rng& rng) {
    const auto p = init_ssm_branch<double>(8, 4, true, rng);
    auto inputs = perturbed(p, rng, 0.3);
    const auto v = gaussian(map, rng, 1.0);
    inputs.push_back(v);
    return Case{weighted([=] { return ssm_branch(v, p); }, map, rng), inputs};
  });
  out.emplace_back("conv_branch", [map](Rng& rng) {
    const auto p = init_conv_branch<double>(8, rng);
    auto inputs = perturbed(p, rng, 0.3);
    const auto v = gaussian(map, rng, 1.0);
    inputs.push_back(v);
    return Case{weighted([=] { return conv_branch(v, p); }, map, rng), inputs};
  });
  out.emplace_back("msa_branch", [map](Rng& rng) {
    const auto p = init_msa_branch<double>(8, 2, rng);
    auto inputs = perturbed(p, rng, 0.4);
    const auto v = gaussian(map, rng, 1.0);
    inputs.push_back(v);
    return Case{weighted([=] { return msa_branch(v, p); }, map, rng), inputs};
  });
  out.emplace_back("mlp_branch", [map](Rng& rng) {
    const auto p = init_mlp_branch<double>(8, 16, rng);
    auto inputs = perturbed(p, rng, 0.4);
    const auto v = gaussian(map, rng, 1.0);
    inputs.push_back(v);
    return Case{weighted([=] { return mlp_branch(v, p); }, map, rng), inputs};
  });
  out.emplace_back("selective_module", [map](Rng& rng) {
    const auto p = init_selective<double>(8, 4, 3, 4, Pooling::average, Aggregation::selective, rng);
    auto inputs = perturbed(p, rng, 0.5);
    std::vector<T64> branches;
    for (int m = 0; m < 4; ++m) branches.push_back(gaussian(map, rng, 1.0));
    inputs.insert(inputs.end(), branches.begin(), branches.end());
    return Case{weighted([=] { return selective_module(branches, p); }, map, rng), inputs};
  });
  out.emplace_back("mix_ssm_block", [map](Rng& rng) {
    auto cfg = block_config();
    cfg.seed = rng.below(1u << 30);
    const auto model = init_model<double>(cfg);
    const auto block = model.stages[0].blocks[0];
    auto inputs = perturbed(block, rng, 0.3);
    const auto v = gaussian(map, rng, 1.0);
    inputs.push_back(v);
    return Case{weighted([=] { return mix_ssm_block(v, block); }, map, rng), inputs};
  });
  if (inject_fault) {
    out.emplace_back("injected_fault", [](Rng& rng) {
      const auto x = gaussian({5}, rng, 1.0);
      return Case{weighted([=] { return faulty_square(x); }, {5}, rng), {x}};
    });
  }
  return out;
}

}  // namespace

std::vector<GradSuiteResult> run_gradient_suite(const GradSuiteOptions& options) {
  std::vector<GradSuiteResult> results;
  for (const auto& [name, build] : builders(options.inject_fault)) {
    GradSuiteResult r;
    r.component = name;
    r.pass = true;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(options.seed + s);
      auto c = build(rng);
      const auto report = finite_diff_check(c.objective, c.inputs, options.step, options.tolerance);
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error);
      r.components_checked += report.components;
      r.pass = r.pass && report.pass;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace mixssm

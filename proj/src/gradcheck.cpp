#include "mixssm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mixssm {

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                  double step, double tolerance) {
  if (!(step > 0.0)) throw Error("finite_diff_check: step must be positive");
  for (auto& x : inputs) {
    if (!x.is_leaf()) throw Error("finite_diff_check: inputs must be leaf tensors");
    x.set_requires_grad(true);
    x.zero_grad();
  }

  const double first = f().item();
  const Tensor<double> loss = f();
  if (loss.item() != first) throw Error("finite_diff_check: objective is not deterministic");
  loss.backward();

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    std::vector<double> grad(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), grad.begin());
    auto values = x.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = f().item();
      values[i] = saved - step;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(grad[i] - numeric) / denom;
      ++report.components;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
    }
    x.zero_grad();
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                                  double step, double tolerance) {
  return finite_diff_check([&] { return f(x); }, std::vector<Tensor<double>>{x}, step, tolerance);
}

}  // namespace mixssm

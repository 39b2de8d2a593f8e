#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mixssm/tensor.hpp"

namespace mixssm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;  // which tensor held the worst component
  std::size_t worst_index = 0;  // flat index within that tensor
  std::size_t components = 0;
  bool pass = false;
};

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h over every component of every tensor
/// in `inputs`. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator; `pass` means max_rel_error < tolerance.
///
/// Inputs are perturbed in place and restored; their grads are cleared. Throws if two baseline
/// evaluations of `f` disagree (non-deterministic objective) or `step <= 0`.
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                  double step, double tolerance);

/// Single-input form: f maps x to a scalar.
GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
                                  double step, double tolerance);

}  // namespace mixssm

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mixssm {

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  double tolerance = 1e-3;
  double step = 1e-4;
  /// Adds a component built on an op with a deliberately wrong backward rule.
  bool inject_fault = false;
};

struct GradSuiteResult {
  std::string component;
  double max_rel_error = 0.0;  // worst over all seeds
  std::size_t components_checked = 0;
  bool pass = false;
};

/// Central-difference checks in double precision of the scan core, each
/// branch, the selective module, and a full block, over all of their
/// parameters and inputs, for seeds seed .. seed + seeds - 1.
std::vector<GradSuiteResult> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace mixssm

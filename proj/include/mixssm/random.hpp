#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace mixssm {

/// Seeded stream. The mt19937_64 engine is fully specified by the standard;
/// the distributions below are written out so that draws are identical
/// across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  double normal();
  /// Normal(0, stddev) redrawn until |x| <= 2 stddev.
  double truncated_normal(double stddev);

  /// Independent child stream keyed by `stream`.
  Rng fork(std::uint64_t stream);

  template <typename Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(c[i - 1], c[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mixssm

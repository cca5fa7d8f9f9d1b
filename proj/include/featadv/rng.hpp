#pragma once

#include <cstdint>
#include <random>

#include <ATen/core/Generator.h>

namespace featadv {

/// Seeded random stream used by samplers and dataset rendering. Draws are
/// computed from raw engine output so they do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] (inclusive).
  int64_t integer(int64_t lo, int64_t hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Independent torch CPU generator for a seed.
at::Generator torch_generator(uint64_t seed);

/// Mixes a base seed with a stream tag so sub-streams stay independent.
uint64_t derive_seed(uint64_t seed, uint64_t stream);

}  // namespace featadv

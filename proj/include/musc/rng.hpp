#pragma once

#include <cstdint>

#include "musc/tensor.hpp"

namespace musc {

/// Counter-based generator: the i-th draw of a stream is
/// splitmix64_finalize(seed + (i + 1) * 0x9E3779B97F4A7C15), i.e. the SplitMix64
/// sequence written as a pure function of (seed, counter). Identical on every
/// platform; normals use Box-Muller on two consecutive uniforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng fork(std::uint64_t stream) const noexcept;

  template <typename T>
  BasicTensor<T> normal_tensor(Shape dims, double stddev = 1.0) {
    BasicTensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(stddev * normal());
    return t;
  }
  template <typename T>
  BasicTensor<T> uniform_tensor(Shape dims, double lo, double hi) {
    BasicTensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_finalize(std::uint64_t z) noexcept;

}  // namespace musc

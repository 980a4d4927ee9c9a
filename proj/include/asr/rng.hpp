#pragma once

#include <cstdint>
#include <string_view>

namespace asr {

/// Counter-based random stream: draw i is a pure function of (seed, i), so a
/// given (seed, counter) pair yields the same sequence on every platform.
/// Independent streams for separate stochastic sites are made with derive().
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : seed_(seed) {}

  /// Uniform double in [0, 1), 53-bit resolution. Consumes one draw.
  double uniform();

  /// Uniform double in [lo, hi). Consumes one draw.
  double uniform(double lo, double hi);

  /// True with probability p_true. Consumes one draw.
  bool bernoulli(double p_true);

  /// Standard normal via Box-Muller. Always consumes exactly two draws.
  double normal();

  /// Uniform integer in [0, n). n must be positive. Consumes one draw.
  uint64_t next_below(uint64_t n);

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

  /// Independent stream keyed by an integer tag; counter starts at zero.
  RngStream derive(uint64_t tag) const;

  /// Independent stream keyed by a site name.
  RngStream derive(std::string_view name) const;

 private:
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace asr

#include "asr/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace asr {
namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer
uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

}  // namespace

double RngStream::uniform() {
  ++counter_;
  const uint64_t bits = mix64(seed_ + counter_ * kGolden);
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

bool RngStream::bernoulli(double p_true) { return uniform() < p_true; }

double RngStream::normal() {
  // Shift into (0, 1] so log() stays finite.
  ++counter_;
  const double u1 =
      static_cast<double>((mix64(seed_ + counter_ * kGolden) >> 11) + 1) * 0x1.0p-53;
  ++counter_;
  const double u2 =
      static_cast<double>(mix64(seed_ + counter_ * kGolden) >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

uint64_t RngStream::next_below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::next_below: n must be positive");
  return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
}

RngStream RngStream::derive(uint64_t tag) const {
  return RngStream(mix64(seed_ ^ mix64(tag + 0xD1B54A32D192ED03ull)));
}

RngStream RngStream::derive(std::string_view name) const {
  // FNV-1a over the site name
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return derive(h);
}

}  // namespace asr

#pragma once

#include <cstdint>
#include <string_view>

namespace redwatch {

// SplitMix64 (Steele, Lea, Flood 2014). Output is fully specified by the
// algorithm, so runs are reproducible across compilers and standard libraries.
class SplitMix64 {
 public:
  static constexpr std::string_view kName = "splitmix64";

  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform integer in [0, bound). bound must be > 0. Lemire's nearly
  /// divisionless method with rejection, so the result is unbiased.
  uint64_t below(uint64_t bound) {
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * bound;
    auto low = static_cast<uint64_t>(m);
    if (low < bound) {
      const uint64_t threshold = (0 - bound) % bound;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * bound;
        low = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Independent stream derived from this one.
  SplitMix64 split() { return SplitMix64(next()); }

 private:
  uint64_t state_;
};

/// The SplitMix64 finalizer, used as a stateless 64-bit mixer.
constexpr uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace redwatch

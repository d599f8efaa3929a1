#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace cdef {

/// xoshiro256++ seeded through SplitMix64. Satisfies UniformRandomBitGenerator.
///
/// Streams are cheap to construct, so every random variable in the model gets
/// its own stream keyed by (seed, iteration, draw, variable). Rejection
/// samplers consuming a variable number of words then cannot shift the draws
/// of any other variable, which keeps common-random-number comparisons and
/// multi-threaded runs reproducible.
class RandomStream {
 public:
  using result_type = std::uint64_t;

  explicit RandomStream(std::uint64_t seed = 0) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on the open interval (0, 1); never returns 0 or 1.
  double uniform_open() noexcept {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Derive an independent stream from a key tuple.
  static RandomStream derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                             std::uint64_t c = 0, std::uint64_t d = 0) noexcept {
    std::uint64_t h = mix(seed ^ 0x9e3779b97f4a7c15ULL);
    h = mix(h ^ a);
    h = mix(h + b);
    h = mix(h ^ (c * 0xbf58476d1ce4e5b9ULL));
    h = mix(h + d);
    return RandomStream(h);
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static constexpr std::uint64_t splitmix(std::uint64_t& x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    return mix(x);
  }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace cdef

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace pnrsim {

namespace detail {

/// splitmix64 step; used both as a seed mixer and to expand seeds into state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

/// Derives a new master seed from (seed, salt); used to give sweep points and
/// bias points their own independent shot-stream families.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
  return detail::splitmix64(s);
}

/// Counter-seeded xoshiro256++ stream.
///
/// Identical (master_seed, stream_index) pairs always produce the identical
/// sample sequence; distinct stream indices get statistically independent
/// state via splitmix64 expansion. One stream per shot makes parallel and
/// serial simulation bit-identical.
class RandomStream {
 public:
  RandomStream(std::uint64_t master_seed, std::uint64_t stream_index)
      : master_seed_(master_seed), stream_index_(stream_index) {
    std::uint64_t s = master_seed ^ (0x9e3779b97f4a7c15ULL * (stream_index + 0x632be59bd9b4e019ULL));
    for (auto& w : state_) w = detail::splitmix64(s);
    // xoshiro state must not be all zero; splitmix64 output makes this
    // astronomically unlikely, but guard anyway.
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t master_seed() const { return master_seed_; }
  std::uint64_t stream_index() const { return stream_index_; }

  /// Next raw 64-bit value (xoshiro256++).
  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1]; safe as a log() argument.
  double uniform01_positive() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  /// Standard normal draw via Box-Muller (two uniforms per call, no cache,
  /// so the stream position stays schedule-independent).
  double standard_normal() {
    const double u1 = uniform01_positive();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Normal draw with given mean and standard deviation (sd >= 0).
  double normal(double mean, double sd) { return mean + sd * standard_normal(); }

 private:
  std::uint64_t state_[4];
  std::uint64_t master_seed_;
  std::uint64_t stream_index_;
};

}  // namespace pnrsim

#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace lcg {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Hashes an ordered tuple of integers into a 64-bit stream key.
constexpr std::uint64_t stream_key(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (auto p : parts) h = detail::splitmix64(h ^ detail::splitmix64(p));
  return h;
}

/// Purpose tags keep the per-node streams of different random decisions apart.
enum class StreamTag : std::uint64_t {
  Noise = 1,
  PcffSelect = 2,
  Dropout = 3,
  Shuffle = 4,
  Init = 5,
  Data = 6,
  Split = 7,
  Check = 8,
};

/// SplitMix64 generator usable with <random> distributions.
///
/// Each (seed, pass, node, tag) tuple maps to an independent stream, so
/// stochastic passes do not depend on the order in which nodes are visited.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr Rng stream(std::uint64_t seed, std::uint64_t pass, std::uint64_t node,
                              StreamTag tag) noexcept {
    return Rng(stream_key({seed, pass, node, static_cast<std::uint64_t>(tag)}));
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace lcg

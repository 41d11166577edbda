#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace natlab {

using Rng = std::mt19937_64;

// SplitMix64 finalizer. Used to derive independent stream seeds from
// (master seed, counter) pairs so that every sentence, update, or
// initialization site owns its own generator.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t counter) noexcept {
  return mix64(mix64(seed) ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t domain,
                                    std::uint64_t counter) noexcept {
  return stream_seed(stream_seed(seed, domain), counter);
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t counter) {
  return Rng{stream_seed(seed, counter)};
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t domain, std::uint64_t counter) {
  return Rng{stream_seed(seed, domain, counter)};
}

// The std:: distributions are implementation-defined; these are not, so
// corpora and checkpoints are reproducible across standard libraries.

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Uniform integer in the closed range [lo, hi].
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(rng());
  const std::uint64_t limit = Rng::max() - (Rng::max() % span + 1) % span;
  std::uint64_t draw;
  do {
    draw = rng();
  } while (draw > limit);
  return lo + static_cast<std::int64_t>(draw % span);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Box-Muller standard normal.
inline double standard_normal(Rng& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
}

/// Fisher-Yates shuffle.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::int64_t>(last - first);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = uniform_int(rng, 0, i);
    using std::swap;
    swap(first[i], first[j]);
  }
}

}  // namespace natlab

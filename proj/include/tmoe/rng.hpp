#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace tmoe {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ULL));
}

// FNV-1a; stable across platforms, used to derive per-parameter seeds.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Counter-based stream: the value at (key, index) never depends on how many
// values were drawn before it.
struct CounterRng {
  std::uint64_t key = 0;

  static CounterRng keyed(std::uint64_t seed, std::uint64_t layer, std::uint64_t step) {
    return CounterRng{hash_combine(hash_combine(splitmix64(seed), layer), step)};
  }

  std::uint64_t bits(std::uint64_t index) const { return hash_combine(key, index); }
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform(std::uint64_t index) const {
    return static_cast<double>(bits(index) >> 11) * 0x1.0p-53;
  }
};

// Sequential engine for initialisation and data generation; libstdc++'s
// mt19937_64 is fully specified, the distributions below are our own so the
// drawn values do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % span);
  }
  // Box-Muller; a fresh pair each call keeps the stream position simple.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Fisher-Yates with our own index draw (std::shuffle's draw sequence is
// implementation-defined).
template <class Vec>
void shuffle_in_place(Vec& v, Rng& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
    const auto j = rng.uniform_int(0, i);
    std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
  }
}

}  // namespace tmoe

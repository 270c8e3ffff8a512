#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace farmamba {

// Deterministic, platform-independent PRNG (splitmix64 core).
//
// Streams are derived by hashing a label or index into the seed, so every
// consumer (parameter init, data generation, degrade noise, shuffling) owns
// an independent stream keyed by (seed, label). Regenerating a stream from
// the same key is bit-identical on every platform; nothing about training
// order or module construction order can perturb another stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed + kGamma)) {}

  // Independent stream for (base seed, stream index).
  static Rng stream(std::uint64_t seed, std::uint64_t id) {
    return Rng(mix(seed + kGamma) ^ mix(id * 0x9e3779b97f4a7c15ULL + 0x6a09e667f3bcc909ULL));
  }

  // Independent stream keyed by a label, e.g. a parameter name.
  static Rng stream(std::uint64_t seed, std::string_view label) {
    return stream(seed, fnv1a(label));
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller. Two uniform draws per sample, no caching,
  // so the draw count per call is fixed and reproducible.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates.
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace farmamba

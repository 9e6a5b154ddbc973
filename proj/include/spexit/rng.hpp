#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace spexit {

/// Seeded pseudo-random source. The bitstream is std::mt19937_64 (fully
/// specified by the C++ standard); distributions come from Boost.Random so
/// draws are identical across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform integer on [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  double normal(double mean, double stddev);
  double gamma(double shape);
  double beta(double alpha, double beta);
  bool bernoulli(double p);
  /// Index drawn proportionally to non-negative `weights`.
  std::size_t categorical(std::span<const double> weights);

  /// Independent child generator; the child seed is splitmix64(seed ^ stream).
  [[nodiscard]] Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used for seed derivation and position hashing.
std::uint64_t splitmix64(std::uint64_t x);

/// Deterministic hash of (seed, a, b) mapped to [0, 1).
double hash_unit(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

}  // namespace spexit

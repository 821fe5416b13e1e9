#pragma once

#include <cstdint>

namespace ucam {

/// Counter-based random stream.
///
/// Draw k (k = 1, 2, ...) is splitmix64_finalize(seed + k * 0x9E3779B97F4A7C15),
/// i.e. the SplitMix64 sequence addressed by counter. Uniform doubles take the
/// top 53 bits. Gaussians use Box-Muller on two consecutive uniforms (cosine
/// branch only), so every gaussian consumes exactly two draws.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double gaussian(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream; does not advance this stream.
  RngStream split(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_finalize(std::uint64_t z);

}  // namespace ucam

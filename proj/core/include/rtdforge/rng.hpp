#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

namespace rtdforge {

/// Seeded pseudo-random source shared by every stochastic component.
///
/// All draws are derived directly from the raw 64-bit engine output, so the
/// full generator state is the engine state: `state()` / `set_state()` give
/// bit-identical continuation after a checkpoint round trip.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Unbiased uniform integer in [0, n). Requires n > 0.
  std::size_t uniform_index(std::size_t n);

  /// Standard normal draw (Box-Muller, no cached second value).
  double normal();

  /// Normal draw with the given stddev, resampled until |x| <= 2 stddev.
  double truncated_normal(double stddev);

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng fork(std::uint64_t stream) const;

  std::string state() const;
  void set_state(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used to decorrelate derived seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace rtdforge

#include "rtdforge/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "rtdforge/error.hpp"

namespace rtdforge {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) {
    throw ValueError("uniform_index: empty range");
  }
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection keeps the draw unbiased for bounds that do not divide 2^64.
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = engine_();
    if (r >= threshold) {
      return static_cast<std::size_t>(r % bound);
    }
  }
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= std::numeric_limits<double>::min()) {
    u1 = uniform();
  }
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    const double x = normal();
    if (std::abs(x) <= 2.0) {
      return x * stddev;
    }
  }
}

Rng Rng::fork(std::uint64_t stream) const {
  std::mt19937_64 copy = engine_;
  return Rng(mix_seed(copy(), stream));
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (in.fail()) {
    throw DataError("corrupt RNG state");
  }
}

}  // namespace rtdforge

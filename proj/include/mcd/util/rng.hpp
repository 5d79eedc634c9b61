#pragma once

#include <cstdint>
#include <random>

namespace mcd::util {

// Stateless 64-bit mixer used to derive child seeds, so that work item i
// draws the same stream whether items run serially or concurrently.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t child_seed(std::uint64_t master, std::uint64_t index,
                                   std::uint64_t stream = 0) {
  return splitmix64(splitmix64(master ^ splitmix64(stream)) + index);
}

// mt19937_64 with distribution code fixed here rather than taken from the
// standard library, whose distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; the spare deviate is cached.
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mcd::util

#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dsem {

// SplitMix64 (Steele, Lea & Flood). Every random draw in the project goes
// through this generator so runs are reproducible bit-for-bit:
//   state += 0x9E3779B97F4A7C15
//   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, bound), bound > 0.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Named sub-stream derived from a root seed: mixes FNV-1a(name) and an index
// into the seed so streams are independent of draw order elsewhere.
Rng derive_stream(std::uint64_t seed, std::string_view name,
                  std::uint64_t index = 0);

}  // namespace dsem

#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace margex {

// splitmix64: the standard 64-bit finalizer, used here only to derive
// well-separated seeds for substreams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed for substream `stream` of a master seed. Substreams depend only on
// (master, stream), never on consumption order or thread schedule, which is
// what makes datasets and Monte Carlo studies reproducible under parallelism.
inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^
                    splitmix64(stream * 0xD1342543DE82EF95ULL + 0x632BE59BD9B4E019ULL));
}

// Seeded stream of draws. Substreams derive from the seed, not engine state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  Rng substream(std::uint64_t stream) const { return Rng(substream_seed(seed_, stream)); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  // Index drawn from a categorical distribution given cumulative probabilities
  // (last entry assumed to be 1).
  int categorical(const std::vector<double>& cumulative) {
    const double u = uniform();
    for (std::size_t k = 0; k + 1 < cumulative.size(); ++k) {
      if (u < cumulative[k]) return static_cast<int>(k);
    }
    return static_cast<int>(cumulative.size()) - 1;
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace margex

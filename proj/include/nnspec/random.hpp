#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace nnspec {

// Platform-stable randomness. std::mt19937_64 is fully specified by the
// standard, but the std distributions are not, so the draws below are built
// directly on the engine's output bits.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound);

  // Standard normal via Box-Muller; caches the second variate.
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a root seed with a stream index; used to derive per-sample seeds that
// do not depend on batching.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

// `count` distinct indices drawn uniformly from [0, population), returned in
// ascending order. count == population returns every index.
std::vector<std::size_t> sample_without_replacement(std::size_t population,
                                                    std::size_t count,
                                                    std::uint64_t seed);

}  // namespace nnspec

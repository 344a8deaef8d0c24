#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mode {

// Seeded generator with a serializable state. Draws never cache values
// between calls, so saving and restoring the engine state is enough to
// resume a stream exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t next() { return engine_(); }

  std::string state() const;
  void set_state(const std::string& s);

  // Independent stream derived from (seed, index) for per-episode or
  // per-trial randomness.
  static Rng split(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mode

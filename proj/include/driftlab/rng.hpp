#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace driftlab {

// Seeded generator with labelled sub-streams. The engine is std::mt19937_64,
// whose output sequence is fixed by the standard; the distributions below are
// implemented here rather than taken from <random> because the library
// distributions are not required to be portable.
class RngStream {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64+splitmix64-derive";

  explicit RngStream(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  // Independent stream keyed by a path-like label, e.g. "init/layer3/wq".
  // Deriving never advances this stream.
  RngStream derive(std::string_view label) const;
  RngStream derive(std::uint64_t index) const;

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();
  // Uniform integer in [0, n).
  int uniform_int(int n);
  // Index drawn proportionally to non-negative weights.
  int categorical(std::span<const double> weights);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace driftlab

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace xfb {

// Seeded generator used for every random draw in the project.
//
// Engine: std::mt19937_64 (its output sequence is fixed by the C++ standard).
// The distributions are implemented here instead of using <random> because
// the standard leaves their algorithms unspecified:
//   uniform()  = (engine() >> 11) * 2^-53, in [0, 1)
//   normal()   = Box-Muller on two uniforms, both outputs used in turn
//   below(n)   = rejection sampling on the top bits, unbiased
//   shuffle()  = Fisher-Yates from the back
// Child streams are derived with SplitMix64 so per-purpose generators stay
// independent of how many draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  static std::uint64_t mix(std::uint64_t x);

  // Deterministic child seed for a named purpose (stream id).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    return mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t next() { return engine_(); }
  double uniform();
  double normal();
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xfb

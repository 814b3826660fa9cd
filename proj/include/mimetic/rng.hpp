#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mimetic {

// Deterministic RNG used everywhere results must be reproducible.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The distribution transforms are implemented here by hand because
// the std:: distributions are implementation-defined and would break
// cross-platform reproducibility of snapshots.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Box-Muller with a cached spare draw.
  double normal(double mean = 0.0, double stddev = 1.0);

  // N(0, stddev^2) resampled until |x| <= clip.
  double trunc_normal(double stddev, double clip);

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates using below().
  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::uint64_t j = below(i + 1);
      std::swap(v[i], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// 64-bit FNV-1a, used to turn stream tags into mixing constants.
std::uint64_t fnv1a64(std::string_view s);

std::uint64_t splitmix64(std::uint64_t x);

// Derives an independent seed for a named sub-stream of a run seed.
// Adding a new stream tag never perturbs the existing streams.
std::uint64_t derive_stream(std::uint64_t seed, std::string_view tag);

}  // namespace mimetic

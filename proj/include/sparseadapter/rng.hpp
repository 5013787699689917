#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sparseadapter {

// mt19937_64 with distribution code kept in-tree: the standard library
// distributions are implementation-defined, and seeds must reproduce
// bit-identical parameters across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent stream derived from (seed, stream) via splitmix64.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n), rejection-sampled (no modulo bias).
  std::uint64_t below(std::uint64_t n);

  // Box-Muller; caches the second variate.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace sparseadapter

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include "enrt/common.hpp"

namespace enrt {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// One named, independently seeded random stream. All randomness in the
// repository derives from (master seed, purpose tag, indices), so any
// consumer can be added or removed without perturbing the others.
class RngStream {
 public:
  RngStream(std::uint64_t master, std::string_view purpose,
            std::uint64_t i0 = 0, std::uint64_t i1 = 0) {
    std::uint64_t s = master ^ fnv1a(purpose);
    s ^= 0x632be59bd9b4e019ULL * (i0 + 1);
    s ^= 0x9e3779b97f4a7c15ULL * (i1 + 1);
    engine_.seed(splitmix64(s));
  }

  std::uint64_t u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return (u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; self-contained so results do not depend on the standard
  // library's distribution internals.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = ((u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Unit-rate exponential, for Dirichlet sampling via normalized Gamma(1).
  double exponential() {
    double u = ((u64() >> 11) + 1) * 0x1.0p-53;
    return -std::log(u);
  }

  std::uint64_t uniform_index(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(u64()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace enrt

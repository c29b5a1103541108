#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sdgc/common.hpp"

namespace sdgc {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based stream derivation: child seeds depend only on (master, label,
// index), never on draw order, so runs can be executed in any order.
inline uint64_t derive_seed(uint64_t master, const std::string& label, uint64_t index = 0) {
  uint64_t h = fnv1a(label, 0x9e3779b97f4a7c15ull ^ master);
  uint64_t s = h ^ (index * 0xd1b54a32d192ed03ull);
  return splitmix64(s);
}

// xoshiro256** with a Box-Muller gaussian. Self-contained so results do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x853c49e6748fea9bull) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
    have_cached_ = false;
  }

  uint64_t u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return u64() % n; }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double rayleigh(double sigma) {
    double u = 0.0;
    while (u <= 0.0) u = uniform();
    return sigma * std::sqrt(-2.0 * std::log(u));
  }

  template <typename T>
  void fill_normal(std::vector<T>& out, double scale = 1.0) {
    for (auto& v : out) v = static_cast<T>(normal() * scale);
  }

  // k distinct indices from [0, n), order not meaningful.
  std::vector<int> choose(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(below(static_cast<uint64_t>(n - i)));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

  Rng stream(const std::string& label, uint64_t index = 0) {
    uint64_t base = s_[0] ^ rotl(s_[3], 13);
    return Rng(derive_seed(base, label, index));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4] = {};
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace sdgc

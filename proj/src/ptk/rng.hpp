#pragma once

#include <cmath>
#include <vector>

#include "ptk/common.hpp"

namespace ptk {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(u64 seed = 0) { reseed(seed); }

  void reseed(u64 seed) {
    u64 x = seed;
    for (auto& si : s_) {
      x += 0x9e3779b97f4a7c15ull;
      u64 z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      si = z ^ (z >> 31);
    }
    have_spare_ = false;
  }

  u64 next_u64() {
    const u64 result = rotl(s_[0] + s_[3], 23) + s_[0];
    const u64 t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  i64 uniform_int(i64 n) {
    PTK_CHECK(n > 0, "uniform_int: n must be positive");
    return i64(next_u64() % u64(n));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename Seq>
  void shuffle(Seq& v) {
    for (i64 i = i64(v.size()) - 1; i > 0; --i) {
      const i64 j = uniform_int(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  // Index drawn from an unnormalized non-negative weight vector.
  i64 categorical(const std::vector<double>& weights) {
    double total = 0;
    for (double w : weights) total += w;
    PTK_CHECK(total > 0, "categorical: weights must have positive mass");
    double x = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      x -= weights[i];
      if (x < 0) return i64(i);
    }
    return i64(weights.size()) - 1;
  }

  // Derive an independent stream, e.g. per class or per grid cell.
  Rng fork(u64 salt) const {
    u64 h = fnv1a(&s_[0], sizeof(s_));
    h = fnv1a(&salt, sizeof(salt), h);
    return Rng(h);
  }

 private:
  static u64 rotl(u64 x, int k) { return (x << k) | (x >> (64 - k)); }

  u64 s_[4]{};
  bool have_spare_ = false;
  double spare_ = 0;
};

}  // namespace ptk

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gppde/core.hpp"

namespace gppde {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from (master seed, tag, index).
inline uint64_t derive_seed(uint64_t master, uint64_t tag, uint64_t index = 0) {
  uint64_t s = master ^ (0xA5A5A5A5DEADBEEFULL * (tag + 1)) ^ (0x9E3779B97F4A7C15ULL * (index + 1));
  splitmix64(s);
  return splitmix64(s);
}

/// xoshiro256++ with splitmix64 seeding. Chosen because the stream is fully
/// specified by the algorithm (unlike std::uniform_real_distribution), so
/// identical seeds give identical samples on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t seed() const { return seed_; }
  static const char* algorithm() { return "xoshiro256++"; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (deterministic given the stream).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Index in [0, n).
  uint64_t below(uint64_t n) {
    // Lemire-style rejection-free enough for our n << 2^64; use simple rejection
    // to keep the stream exactly reproducible and unbiased.
    const uint64_t threshold = (0ULL - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t seed_;
  std::array<uint64_t, 4> s_{};
  bool have_cached_ = false;
  double cached_ = 0.0;
};

/// n i.i.d. uniform points in a box, or on a union of faces with probability
/// proportional to face measure.
inline std::vector<Point> sample_uniform(const Region& region, size_t n, Rng& rng) {
  std::vector<Point> pts;
  pts.reserve(n);
  if (region.is_box) {
    for (size_t k = 0; k < n; ++k) {
      Point p;
      p.dim = region.dim;
      for (int i = 0; i < region.dim; ++i)
        p[i] = rng.uniform(region.lo[static_cast<size_t>(i)], region.hi[static_cast<size_t>(i)]);
      pts.push_back(p);
    }
    return pts;
  }
  double total = 0.0;
  std::vector<double> cum;
  cum.reserve(region.faces.size());
  for (const auto& f : region.faces) {
    total += region.face_measure(f);
    cum.push_back(total);
  }
  for (size_t k = 0; k < n; ++k) {
    const double r = rng.uniform() * total;
    size_t fi = 0;
    while (fi + 1 < cum.size() && r > cum[fi]) ++fi;
    const auto& f = region.faces[fi];
    Point p;
    p.dim = region.dim;
    for (int i = 0; i < region.dim; ++i) {
      if (i == f.fixed_axis)
        p[i] = f.fixed_value;
      else
        p[i] = rng.uniform(f.lo[static_cast<size_t>(i)], f.hi[static_cast<size_t>(i)]);
    }
    pts.push_back(p);
  }
  return pts;
}

/// k distinct indices drawn without replacement from [0, n) (partial
/// Fisher-Yates on an index array; deterministic given the stream).
inline std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  if (k > n) k = n;
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace gppde

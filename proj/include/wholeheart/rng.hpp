#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace wholeheart {

// splitmix64 finalizer. Fast avalanching mix used both as a counter-based
// noise generator and to derive independent sub-stream seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seed for a named sub-stream, e.g. derive_seed(run_seed, step) for the
// per-step mask plan or derive_seed(dataset_seed, subject) for a subject.
inline uint64_t derive_seed(uint64_t root, uint64_t a, uint64_t b = 0) {
  return mix64(mix64(root ^ 0x517cc1b727220a95ull) ^ mix64(a) ^
               mix64(b ^ 0xd1b54a32d192ed03ull));
}

// Counter-based standard normal: two mixed counters through Box-Muller.
// Evaluation order never matters, so voxel noise can be sampled by index.
inline double noise_normal(uint64_t seed, uint64_t counter) {
  uint64_t a = mix64(seed ^ mix64(counter));
  uint64_t b = mix64(a ^ 0x2545f4914f6cdd1dull);
  double u1 = (double(a >> 11) + 0.5) * 0x1.0p-53;  // (0, 1)
  double u2 = double(b >> 11) * 0x1.0p-53;          // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// mt19937_64 stream with hand-rolled output transforms. The engine itself is
// specified bit-exactly by the standard; the std distributions are not, so
// uniform/normal/shuffle are implemented here to keep every byte of output
// independent of the standard library build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= lim);
    return x % n;
  }

  // Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  // Standard normal clipped to |z| <= 2 by rejection (weight init).
  double truncated_normal() {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z;
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[size_t(below(i))]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace wholeheart

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace vmmt {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seeded generator with hand-rolled uniform/normal so that streams are
// reproducible bit-for-bit across runs. One Rng per worker; never shared.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // Derives an independent stream from a master seed and a key path,
  // e.g. derive(seed, {epoch, batch_index}).
  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> keys) {
    uint64_t s = seed;
    uint64_t h = splitmix64(s);
    for (uint64_t k : keys) {
      s ^= k + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
      h ^= splitmix64(s);
    }
    return Rng(h);
  }

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased index in [0, n) by rejection.
  size_t uniform_index(size_t n) {
    if (n <= 1) return 0;
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return static_cast<size_t>(v % n);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vmmt

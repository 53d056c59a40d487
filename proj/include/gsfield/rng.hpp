#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace gsf {

// Counter-based generator. Every consumer forks its own stream from a root
// seed, so draw order is independent of thread count and call interleaving.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix_(seed, 0x9e3779b97f4a7c15ull)) {}

  Rng fork(uint64_t salt) const { return Rng(mix_(key_, salt), 0); }
  Rng fork(std::string_view tag) const { return fork(hash_str_(tag)); }

  uint64_t next_u64() { return mix_(key_, ctr_++); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_index(uint64_t n) {
    // 128-bit multiply avoids modulo bias
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // standard normal via Box-Muller (one value per pair; the cosine leg)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  Rng(uint64_t key, uint64_t ctr) : key_(key), ctr_(ctr) {}

  static uint64_t mix_(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the keyed counter
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t hash_str_(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
    return h;
  }

  uint64_t key_;
  uint64_t ctr_ = 0;
};

}  // namespace gsf

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace mimco {

// xoshiro256** stream seeded through splitmix64. The state is four plain
// uint64 words plus the Box-Muller spare, so checkpoints can capture and
// restore a stream exactly.
class Rng {
 public:
  Rng() : Rng(0x9e3779b97f4a7c15ULL) {}

  explicit Rng(std::uint64_t seed) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  // Deterministic sub-stream derivation: fold tag words into the seed one by
  // one. Streams derived with distinct tags are independent for our purposes.
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t x = seed;
    for (std::uint64_t t : tags) {
      x ^= t + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
      std::uint64_t probe = x;
      x = splitmix64(probe);
    }
    return Rng(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, bound).
  std::uint64_t uniform_int(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::uniform_int: bound must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % bound;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller with cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal clipped by rejection to +-2 sigma, the usual transformer init.
  double trunc_normal(double stddev) {
    double x = normal();
    while (std::abs(x) > 2.0) x = normal();
    return x * stddev;
  }

  struct State {
    std::array<std::uint64_t, 4> words;
    bool has_spare;
    double spare;
  };

  State save_state() const { return {state_, has_spare_, spare_}; }

  void restore_state(const State& s) {
    state_ = s.words;
    has_spare_ = s.has_spare;
    spare_ = s.spare;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mimco

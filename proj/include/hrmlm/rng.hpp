#pragma once

#include <cstdint>

namespace hrmlm {

// Counter-based deterministic generator: draw i is a pure function of
// (seed, i), so streams replay bitwise across runs and platforms and a
// stream can be positioned by setting the counter.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), counter_(0) {}

  uint64_t next_u64();
  double uniform();                          // [0, 1)
  double normal(double mean, double std);    // Marsaglia polar
  // Rejection sample until the draw lands in [lo, hi]; std == 0 degenerates
  // to the mean (documented degenerate case, no rejection loop).
  double truncated_normal(double mean, double std, double lo, double hi);
  // Uniform integer in [0, n); n must be > 0.
  uint64_t uniform_int(uint64_t n);

  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }
  uint64_t seed() const { return seed_; }

  // Stateless mixing helpers for pure-function sampling (e.g. data offsets
  // derived from (seed, step, index) without a persistent stream).
  static uint64_t mix(uint64_t z);
  static uint64_t hash3(uint64_t a, uint64_t b, uint64_t c);

 private:
  uint64_t seed_;
  uint64_t counter_;
};

}  // namespace hrmlm

#include "hrmlm/rng.hpp"

#include <cmath>

#include "hrmlm/errors.hpp"

namespace hrmlm {

namespace {
constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
}

uint64_t Rng::mix(uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

uint64_t Rng::hash3(uint64_t a, uint64_t b, uint64_t c) {
  return mix(a * kGolden + mix(b * 0xC2B2AE3D27D4EB4Full + mix(c + kGolden)));
}

uint64_t Rng::next_u64() {
  ++counter_;
  return mix(seed_ + counter_ * kGolden);
}

double Rng::uniform() {
  // 53 high bits -> double in [0, 1)
  return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::normal(double mean, double std) {
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  return mean + std * u * std::sqrt(-2.0 * std::log(s) / s);
}

double Rng::truncated_normal(double mean, double std, double lo, double hi) {
  if (lo > hi) throw config_error("truncated_normal: lo > hi");
  if (std == 0.0) return mean;
  for (;;) {
    double x = normal(mean, std);
    if (x >= lo && x <= hi) return x;
  }
}

uint64_t Rng::uniform_int(uint64_t n) {
  if (n == 0) throw config_error("uniform_int: n must be positive");
  return next_u64() % n;
}

}  // namespace hrmlm

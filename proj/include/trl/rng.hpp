#ifndef TRL_RNG_HPP
#define TRL_RNG_HPP

#include <cmath>
#include <cstdint>

#include "trl/common.hpp"

namespace trl {

// PCG32 (XSH-RR 64/32) with hand-rolled uniform/normal transforms.
// Standard-library distributions are not portable across implementations,
// so every stream the project emits is reproducible from (seed, stream)
// alone.  Identifier recorded in dataset metadata: see generator_id().
class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed, std::uint64_t stream = 54u) {
    inc_ = (stream << 1u) | 1u;
    state_ = 0u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // uniform in [0,1) with the full 53-bit double mantissa
  double next_double() {
    std::uint64_t hi = next_u32();
    std::uint64_t lo = next_u32();
    std::uint64_t bits = ((hi << 32u) | lo) >> 11u;
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; caches the second variate
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_double();  // (0,1], keeps log() finite
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * kPi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  Vec normal_vec(Index n) {
    Vec out(n);
    for (Index i = 0; i < n; ++i) out[i] = normal();
    return out;
  }

  Vec uniform_vec(Index n, double lo, double hi) {
    Vec out(n);
    for (Index i = 0; i < n; ++i) out[i] = uniform(lo, hi);
    return out;
  }

  static const char* generator_id() { return "pcg32-boxmuller"; }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// standard normal CDF
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace trl

#endif

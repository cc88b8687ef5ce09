#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cpqe {

// splitmix64; used to derive independent sub-stream seeds from one master seed.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix64(master ^ mix64(stream + 0x632be59bd9b4e019ULL) ^
               mix64(index + 0x9e6c63d0876a9a47ULL));
}

// Stream ids for derive_seed. Keeping them in one place guarantees that
// adding a consumer never shifts the draws of an existing one.
namespace streams {
inline constexpr std::uint64_t kPolicyInit = 1;
inline constexpr std::uint64_t kCriticInit = 2;
inline constexpr std::uint64_t kBatch = 3;
inline constexpr std::uint64_t kNoise = 4;
inline constexpr std::uint64_t kCritic = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kEnv = 7;
inline constexpr std::uint64_t kBench = 8;
}  // namespace streams

// mt19937_64 with hand-rolled distributions. The standard distribution
// objects are implementation-defined, which would break byte-level
// reproducibility of datasets and checkpoints across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform() {
    return (gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // standard normal via Box-Muller
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cpqe

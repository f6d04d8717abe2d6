#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace wmb {

/// Seeded random source. Every consumer derives its own stream from the
/// run seed and a stable name ("module:purpose"), so adding a new consumer
/// never shifts the draws seen by existing ones.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  static Rng stream(std::uint64_t seed, std::string_view name) {
    return Rng(seed ^ fnv1a(name));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; no cached second draw.
  double normal();

  int uniform_int(int n) {
    return static_cast<int>(uniform() * static_cast<double>(n));
  }

  /// Draw an index from nonnegative weights (need not be normalized).
  int categorical(const Eigen::Ref<const Eigen::VectorXd>& weights);

  /// Draw from N(mean, cov); cov must be positive semidefinite.
  Eigen::VectorXd gaussian(const Eigen::VectorXd& mean,
                           const Eigen::MatrixXd& cov);

  std::uint64_t next_u64() { return engine_(); }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace wmb

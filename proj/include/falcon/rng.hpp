#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace falcon {

/// Random stream with explicitly implemented distributions.
///
/// std::mt19937_64 produces the same bit sequence on every conforming
/// implementation, but the standard distributions do not. All sampling here
/// is built from the raw engine output so that trajectories replay exactly
/// across compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(uniform01() * static_cast<double>(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Gamma(alpha, 1) via Marsaglia-Tsang squeeze.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      double u = 1.0 - uniform01();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = 1.0 - uniform01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  /// Dirichlet sample on the 3-simplex.
  Eigen::Vector3d dirichlet3(const Eigen::Vector3d& concentration) {
    Eigen::Vector3d g;
    for (int i = 0; i < 3; ++i) g[i] = gamma(concentration[i]);
    double total = g.sum();
    if (total <= 0.0) return Eigen::Vector3d::Constant(1.0 / 3.0);
    return g / total;
  }

  Eigen::Vector2d unit_planar_direction() {
    double theta = uniform(0.0, 2.0 * M_PI);
    return {std::cos(theta), std::sin(theta)};
  }

  /// Derives an independent per-worker seed (splitmix64 over seed ^ stream).
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace falcon

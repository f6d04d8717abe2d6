#include "wmb/rng.hpp"

#include <cmath>
#include <numbers>

#include "wmb/error.hpp"

namespace wmb {

double Rng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::categorical(const Eigen::Ref<const Eigen::VectorXd>& weights) {
  const double total = weights.sum();
  require(total > 0.0 && std::isfinite(total), ErrorKind::kNumerical,
          "categorical draw from weights with non-positive total");
  const double target = uniform() * total;
  double acc = 0.0;
  const int n = static_cast<int>(weights.size());
  for (int i = 0; i < n; ++i) {
    acc += weights[i];
    if (target < acc) return i;
  }
  // Rounding can leave target == total; return the last nonzero entry.
  for (int i = n - 1; i >= 0; --i)
    if (weights[i] > 0.0) return i;
  return n - 1;
}

Eigen::VectorXd Rng::gaussian(const Eigen::VectorXd& mean,
                              const Eigen::MatrixXd& cov) {
  const Eigen::Index d = mean.size();
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < d; ++i) z[i] = normal();
  // Eigen-decomposition tolerates singular (noise-free) covariances.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
  const Eigen::VectorXd sd = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return mean + es.eigenvectors() * sd.asDiagonal() * z;
}

}  // namespace wmb

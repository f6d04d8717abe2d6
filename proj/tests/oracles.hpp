#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Digamma by upward recurrence to x >= 10 then the asymptotic series.
inline double digamma(double x) {
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double x2 = 1.0 / (x * x);
  return acc + std::log(x) - 0.5 / x -
         x2 * (1.0 / 12 - x2 * (1.0 / 120 - x2 * (1.0 / 252 - x2 * (1.0 / 240 - x2 / 132))));
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

/// Visit every sequence in {0..k-1}^t in lexicographic order.
inline void for_each_path(int k, int t, const std::function<void(const std::vector<int>&)>& fn) {
  std::vector<int> path(t, 0);
  while (true) {
    fn(path);
    int i = t - 1;
    while (i >= 0 && ++path[i] == k) path[i--] = 0;
    if (i < 0) return;
  }
}

/// Plain HMM with dense tables: A(next, prev), B(obs, state), d(state).
struct PlainHmm {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  Eigen::VectorXd d;

  double path_prob(const std::vector<int>& s, const std::vector<int>& o) const {
    double p = d[s[0]] * b(o[0], s[0]);
    for (std::size_t t = 1; t < s.size(); ++t) p *= a(s[t], s[t - 1]) * b(o[t], s[t]);
    return p;
  }
};

inline Eigen::MatrixXd random_stochastic(int rows, int cols, std::uint64_t seed) {
  Eigen::MatrixXd m(rows, cols);
  std::uint64_t x = seed * 6364136223846793005ULL + 1442695040888963407ULL;
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) {
      x = x * 6364136223846793005ULL + 1442695040888963407ULL;
      m(i, j) = 0.05 + static_cast<double>(x >> 11) * 0x1.0p-53;
    }
    m.col(j) /= m.col(j).sum();
  }
  return m;
}

}  // namespace oracle

#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "wmb/distributions.hpp"
#include "wmb/error.hpp"

using namespace wmb;

TEST_CASE("categorical entropy") {
  CHECK(categorical_entropy(CategoricalBelief(Eigen::VectorXd::Ones(1))) == 0.0);
  CHECK(categorical_entropy(CategoricalBelief::uniform(2)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Eigen::VectorXd p(2);
  p << 0.9, 0.1;
  CHECK(categorical_entropy(CategoricalBelief(p)) ==
        doctest::Approx(oracle::entropy({0.9, 0.1})).epsilon(1e-14));
  Eigen::VectorXd z(3);
  z << 0.0, 0.3, 0.7;
  const double h = categorical_entropy(CategoricalBelief(z));
  CHECK(h >= 0.0);
  CHECK(h <= std::log(3.0));
}

TEST_CASE("categorical belief validation") {
  Eigen::VectorXd bad(2);
  bad << 0.6, 0.6;
  CHECK_THROWS_AS(CategoricalBelief{bad}, Error);
  bad << -0.1, 1.1;
  CHECK_THROWS_AS(CategoricalBelief{bad}, Error);
}

TEST_CASE("dirichlet expected log") {
  Eigen::MatrixXd c(2, 1);
  c << 1.0, 1.0;
  auto e = dirichlet_expected_log(DirichletCounts(c));
  const double want = oracle::digamma(1.0) - oracle::digamma(2.0);
  CHECK(want == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(e(0, 0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(e(1, 0) == doctest::Approx(want).epsilon(1e-12));

  Eigen::MatrixXd one(1, 1);
  one << 3.7;
  CHECK(std::abs(dirichlet_expected_log(DirichletCounts(one))(0, 0)) < 1e-15);

  c << 1000.0, 1000.0;
  e = dirichlet_expected_log(DirichletCounts(c));
  CHECK(std::abs(e(0, 0) - std::log(0.5)) < 1e-3);
  CHECK(e(0, 0) == doctest::Approx(oracle::digamma(1000) - oracle::digamma(2000)).epsilon(1e-12));

  Eigen::MatrixXd zero(2, 1);
  zero << 0.0, 1.0;
  CHECK_THROWS_AS(DirichletCounts{zero}, Error);
}

TEST_CASE("dirichlet expected log is monotone in its own count") {
  Eigen::MatrixXd c(3, 1);
  c << 0.5, 2.0, 3.0;
  double prev = -1e300;
  for (double v = 0.1; v < 50.0; v *= 1.7) {
    c(0, 0) = v;
    const double e = dirichlet_expected_log(DirichletCounts(c))(0, 0);
    CHECK(e > prev);
    prev = e;
  }
  // exponentiated columns sum to at most 1
  CHECK(dirichlet_expected_log(DirichletCounts(c)).array().exp().sum() <= 1.0);
}

TEST_CASE("dirichlet KL against a direct formula") {
  Eigen::VectorXd a(3), b(3);
  a << 2.0, 3.0, 0.5;
  b << 1.0, 1.0, 1.0;
  const double a0 = a.sum(), b0 = b.sum();
  double want = std::lgamma(a0) - std::lgamma(b0);
  for (int i = 0; i < 3; ++i)
    want += std::lgamma(b[i]) - std::lgamma(a[i]) +
            (a[i] - b[i]) * (oracle::digamma(a[i]) - oracle::digamma(a0));
  CHECK(dirichlet_kl(a, b) == doctest::Approx(want).epsilon(1e-10));
  CHECK(dirichlet_kl(a, a) == doctest::Approx(0.0));
}

namespace {
NiwParams prior1d(double mean, double kappa, double nu, double psi) {
  return NiwParams(Eigen::VectorXd::Constant(1, mean), kappa, nu,
                   Eigen::MatrixXd::Constant(1, 1, psi));
}
}  // namespace

TEST_CASE("student-t predictive") {
  const NiwParams p = prior1d(0.3, 2.0, 5.0, 1.5);
  const double at_mean = gaussian_log_predictive(p.mean, p);
  for (double dx : {-1.0, -0.1, 0.05, 0.5, 2.0})
    CHECK(gaussian_log_predictive(Eigen::VectorXd::Constant(1, 0.3 + dx), p) < at_mean);

  // translation invariance
  const NiwParams q = prior1d(10.3, 2.0, 5.0, 1.5);
  CHECK(gaussian_log_predictive(Eigen::VectorXd::Constant(1, 11.0), q) ==
        doctest::Approx(gaussian_log_predictive(Eigen::VectorXd::Constant(1, 1.0), p)).epsilon(1e-12));

  // large dof approaches a Gaussian with variance psi (kappa+1) / (kappa nu')
  const double nu = 1e4, kappa = 1.0;
  const NiwParams big = prior1d(0.0, kappa, nu, nu);
  const double var = nu * (kappa + 1) / (kappa * nu);
  for (double x : {-2.0, 0.0, 0.7, 3.0}) {
    const double gauss = -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * x * x / var;
    CHECK(std::abs(gaussian_log_predictive(Eigen::VectorXd::Constant(1, x), big) - gauss) < 1e-2);
  }
  CHECK_THROWS_AS(gaussian_log_predictive(Eigen::VectorXd::Zero(2), p), Error);
}

TEST_CASE("densities integrate to one") {
  const NiwParams p = prior1d(0.0, 1.0, 3.0, 1.0);
  double st = 0.0, g = 0.0;
  const double h = 1e-3;
  for (double x = -400.0; x <= 400.0; x += h) {
    const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, x);
    st += std::exp(gaussian_log_predictive(v, p)) * h;
    if (std::abs(x) < 20)
      g += std::exp(gaussian_log_pdf(v, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 0.7))) * h;
  }
  CHECK(std::abs(st - 1.0) < 1e-4);
  CHECK(std::abs(g - 1.0) < 1e-4);
}

TEST_CASE("niw update") {
  Eigen::MatrixXd psi(2, 2);
  psi << 2.0, 0.3, 0.3, 1.0;
  const NiwParams p(Eigen::Vector2d(1.0, -1.0), 1.5, 4.0, psi);

  Eigen::MatrixXd xs(2, 3);
  xs << 0.2, 1.0, 3.0, -0.5, 0.4, 1.1;
  const NiwParams same = niw_update(p, xs, Eigen::VectorXd::Zero(3));
  CHECK(same.mean.isApprox(p.mean, 0.0));
  CHECK(same.scale == p.scale);
  CHECK(same.dof == p.dof);
  CHECK(same.scatter == p.scatter);

  const NiwParams at_mean = niw_update(p, p.mean, 1.0);
  CHECK((at_mean.mean - p.mean).norm() < 1e-15);
  CHECK(at_mean.scale == doctest::Approx(p.scale + 1.0));

  // sequential vs batch
  const NiwParams seq = niw_update(niw_update(p, Eigen::VectorXd(xs.col(0))), Eigen::VectorXd(xs.col(1)));
  const NiwParams batch = niw_update(p, xs.leftCols(2), Eigen::VectorXd::Ones(2));
  CHECK((seq.mean - batch.mean).norm() < 1e-12);
  CHECK(std::abs(seq.scale - batch.scale) < 1e-12);
  CHECK(std::abs(seq.dof - batch.dof) < 1e-12);
  CHECK((seq.scatter - batch.scatter).norm() < 1e-12);

  // permutation invariance
  Eigen::MatrixXd perm(2, 3);
  perm << xs.col(2), xs.col(0), xs.col(1);
  Eigen::VectorXd w(3), wp(3);
  w << 0.5, 1.0, 2.0;
  wp << 2.0, 0.5, 1.0;
  const NiwParams a = niw_update(p, xs, w), b = niw_update(p, perm, wp);
  CHECK((a.mean - b.mean).norm() < 1e-12);
  CHECK((a.scatter - b.scatter).norm() < 1e-12);
  CHECK(a.scale == doctest::Approx(p.scale + 3.5));

  Eigen::VectorXd neg(3);
  neg << 1.0, -0.1, 1.0;
  CHECK_THROWS_AS(niw_update(p, xs, neg), Error);
}

TEST_CASE("log-sum-exp is stable") {
  Eigen::VectorXd v(3);
  v << -1000.0, -1000.0, -1000.0;
  CHECK(log_sum_exp(v) == doctest::Approx(-1000.0 + std::log(3.0)));
  Eigen::VectorXd w = v;
  const double z = normalize_log_weights(w);
  CHECK(z == doctest::Approx(-1000.0 + std::log(3.0)));
  CHECK(w.sum() == doctest::Approx(1.0));
}

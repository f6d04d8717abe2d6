#include "wmb/distributions.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>

#include "wmb/error.hpp"

namespace wmb {

namespace {

double digamma(double x) { return boost::math::digamma(x); }

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() == 0) return -std::numeric_limits<double>::infinity();
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

double normalize_log_weights(Eigen::VectorXd& logw) {
  const double z = log_sum_exp(logw);
  require(std::isfinite(z), ErrorKind::kNumerical,
          "log-weights cannot be normalized (no finite mass)");
  logw = (logw.array() - z).exp().matrix();
  return z;
}

CategoricalBelief::CategoricalBelief(Eigen::VectorXd p) : probs(std::move(p)) {
  require(probs.size() >= 1, ErrorKind::kShape, "categorical belief needs K >= 1");
  require((probs.array() >= 0.0).all(), ErrorKind::kPrecondition,
          "categorical belief has a negative entry");
  require(std::abs(probs.sum() - 1.0) <= 1e-9, ErrorKind::kPrecondition,
          "categorical belief does not sum to 1");
}

CategoricalBelief CategoricalBelief::uniform(int k) {
  return CategoricalBelief(Eigen::VectorXd::Constant(k, 1.0 / k));
}

CategoricalBelief CategoricalBelief::one_hot(int k, int index) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(k);
  p[index] = 1.0;
  return CategoricalBelief(std::move(p));
}

double categorical_entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

double categorical_entropy(const CategoricalBelief& b) {
  return categorical_entropy(b.probs);
}

DirichletCounts::DirichletCounts(Eigen::MatrixXd c) : counts(std::move(c)) {
  require(counts.size() > 0, ErrorKind::kShape, "empty Dirichlet table");
  require((counts.array() > 0.0).all() && counts.allFinite(),
          ErrorKind::kPrecondition, "Dirichlet counts must be finite and > 0");
}

DirichletCounts DirichletCounts::filled(int outcomes, int configs, double value) {
  return DirichletCounts(Eigen::MatrixXd::Constant(outcomes, configs, value));
}

Eigen::MatrixXd DirichletCounts::mean() const {
  Eigen::MatrixXd m = counts;
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) /= m.col(j).sum();
  return m;
}

Eigen::MatrixXd dirichlet_expected_log(const DirichletCounts& c) {
  require((c.counts.array() > 0.0).all(), ErrorKind::kPrecondition,
          "dirichlet_expected_log: counts must be > 0");
  Eigen::MatrixXd out(c.counts.rows(), c.counts.cols());
  for (Eigen::Index j = 0; j < c.counts.cols(); ++j) {
    const double dsum = digamma(c.counts.col(j).sum());
    for (Eigen::Index i = 0; i < c.counts.rows(); ++i)
      out(i, j) = digamma(c.counts(i, j)) - dsum;
  }
  return out;
}

double dirichlet_kl(const Eigen::Ref<const Eigen::VectorXd>& a,
                    const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double a0 = a.sum();
  const double b0 = b.sum();
  const double da0 = digamma(a0);
  double kl = std::lgamma(a0) - std::lgamma(b0);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    kl += std::lgamma(b[i]) - std::lgamma(a[i]);
    kl += (a[i] - b[i]) * (digamma(a[i]) - da0);
  }
  return kl;
}

double dirichlet_kl(const DirichletCounts& post, const DirichletCounts& prior) {
  require(post.counts.rows() == prior.counts.rows() &&
              post.counts.cols() == prior.counts.cols(),
          ErrorKind::kShape, "dirichlet_kl: table shapes differ");
  double kl = 0.0;
  for (Eigen::Index j = 0; j < post.counts.cols(); ++j)
    kl += dirichlet_kl(post.counts.col(j), prior.counts.col(j));
  return kl;
}

GaussianBelief::GaussianBelief(Eigen::VectorXd m, Eigen::MatrixXd c)
    : mean(std::move(m)), cov(std::move(c)) {
  require(cov.rows() == mean.size() && cov.cols() == mean.size(),
          ErrorKind::kShape, "Gaussian belief: covariance shape mismatch");
}

Eigen::MatrixXd stabilize_cov(const Eigen::MatrixXd& cov) {
  Eigen::MatrixXd s = 0.5 * (cov + cov.transpose());
  s.diagonal().array() += kCovJitter;
  return s;
}

double log_det_spd(const Eigen::MatrixXd& a) {
  Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(a));
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "matrix is not positive-definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double gaussian_log_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                        const Eigen::MatrixXd& cov) {
  require(x.size() == mean.size() && cov.rows() == x.size(), ErrorKind::kShape,
          "gaussian_log_pdf: dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(cov));
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "gaussian_log_pdf: covariance is not positive-definite");
  const Eigen::VectorXd z = llt.matrixL().solve(x - mean);
  const double logdet =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * kLog2Pi + logdet + z.squaredNorm());
}

double gaussian_entropy(const Eigen::MatrixXd& cov) {
  const double d = static_cast<double>(cov.rows());
  return 0.5 * (d * (1.0 + kLog2Pi) + log_det_spd(cov));
}

NiwParams::NiwParams(Eigen::VectorXd m, double kappa, double nu,
                     Eigen::MatrixXd psi)
    : mean(std::move(m)), scale(kappa), dof(nu), scatter(std::move(psi)) {
  validate();
}

void NiwParams::validate() const {
  const double d = static_cast<double>(mean.size());
  require(mean.size() >= 1, ErrorKind::kShape, "NIW: empty mean");
  require(scatter.rows() == mean.size() && scatter.cols() == mean.size(),
          ErrorKind::kShape, "NIW: scatter shape mismatch");
  require(scale > 0.0, ErrorKind::kPrecondition, "NIW: scale must be > 0");
  require(dof > d - 1.0, ErrorKind::kPrecondition, "NIW: dof must exceed dim - 1");
  Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(scatter));
  require(llt.info() == Eigen::Success, ErrorKind::kPrecondition,
          "NIW: scatter must be positive-definite");
}

double gaussian_log_predictive(const Eigen::VectorXd& x, const NiwParams& p) {
  require(x.size() == p.mean.size(), ErrorKind::kShape,
          "gaussian_log_predictive: dimension mismatch");
  const double d = static_cast<double>(x.size());
  const double nu = p.dof - d + 1.0;
  const Eigen::MatrixXd shape = p.scatter * ((p.scale + 1.0) / (p.scale * nu));
  Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(shape));
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "gaussian_log_predictive: scale matrix is not positive-definite");
  const Eigen::VectorXd z = llt.matrixL().solve(x - p.mean);
  const double logdet =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return std::lgamma(0.5 * (nu + d)) - std::lgamma(0.5 * nu) -
         0.5 * d * std::log(nu * std::numbers::pi) - 0.5 * logdet -
         0.5 * (nu + d) * std::log1p(z.squaredNorm() / nu);
}

NiwParams niw_update(const NiwParams& p, const Eigen::MatrixXd& xs,
                     const Eigen::VectorXd& weights) {
  require(xs.cols() == weights.size(), ErrorKind::kShape,
          "niw_update: one weight per point required");
  require(xs.cols() == 0 || xs.rows() == p.mean.size(), ErrorKind::kShape,
          "niw_update: point dimension mismatch");
  require((weights.array() >= 0.0).all(), ErrorKind::kPrecondition,
          "niw_update: weights must be >= 0");
  const double w = weights.sum();
  if (w <= 0.0) return p;

  const Eigen::VectorXd xbar = xs * weights / w;
  const Eigen::MatrixXd centered = xs.colwise() - xbar;
  const Eigen::MatrixXd spread =
      centered * weights.asDiagonal() * centered.transpose();
  const Eigen::VectorXd shift = xbar - p.mean;

  NiwParams out = p;
  out.scale = p.scale + w;
  out.dof = p.dof + w;
  out.mean = (p.scale * p.mean + w * xbar) / out.scale;
  out.scatter = p.scatter + spread + (p.scale * w / out.scale) * shift * shift.transpose();
  out.scatter = 0.5 * (out.scatter + out.scatter.transpose());
  return out;
}

NiwParams niw_update(const NiwParams& p, const Eigen::VectorXd& x, double weight) {
  return niw_update(p, Eigen::MatrixXd(x), Eigen::VectorXd::Constant(1, weight));
}

}  // namespace wmb

#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace wmb {

/// Diagonal jitter added to every covariance before factorization.
inline constexpr double kCovJitter = 1e-9;
/// Default Dirichlet pseudo-count for freshly initialized tables.
inline constexpr double kDefaultPriorCount = 0.1;

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v);

/// exp-normalize a vector of log weights; returns the log normalizer.
double normalize_log_weights(Eigen::VectorXd& logw);

// ---------------------------------------------------------------------------
// Categorical / Dirichlet

struct CategoricalBelief {
  Eigen::VectorXd probs;

  CategoricalBelief() = default;
  /// Validates nonnegativity and normalization (1e-9).
  explicit CategoricalBelief(Eigen::VectorXd p);

  static CategoricalBelief uniform(int k);
  static CategoricalBelief one_hot(int k, int index);

  int size() const { return static_cast<int>(probs.size()); }
};

/// -sum p log p in nats, with 0 log 0 = 0.
double categorical_entropy(const CategoricalBelief& b);
double categorical_entropy(const Eigen::Ref<const Eigen::VectorXd>& p);

/// Pseudo-counts for a conditional table. Rows index the outcome, columns
/// index the flattened conditioning configuration. Every entry is > 0.
struct DirichletCounts {
  Eigen::MatrixXd counts;

  DirichletCounts() = default;
  explicit DirichletCounts(Eigen::MatrixXd c);

  static DirichletCounts filled(int outcomes, int configs,
                                double value = kDefaultPriorCount);

  int outcomes() const { return static_cast<int>(counts.rows()); }
  int configs() const { return static_cast<int>(counts.cols()); }

  /// Posterior-mean table; each column sums to 1.
  Eigen::MatrixXd mean() const;
  double total() const { return counts.sum(); }
};

/// digamma(count) - digamma(column sum), column by column.
Eigen::MatrixXd dirichlet_expected_log(const DirichletCounts& c);

/// Sum over columns of KL(Dir(post[:,j]) || Dir(prior[:,j])).
double dirichlet_kl(const DirichletCounts& post, const DirichletCounts& prior);

/// KL(Dir(a) || Dir(b)) for one column.
double dirichlet_kl(const Eigen::Ref<const Eigen::VectorXd>& a,
                    const Eigen::Ref<const Eigen::VectorXd>& b);

// ---------------------------------------------------------------------------
// Gaussian / Normal-Inverse-Wishart

struct GaussianBelief {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  GaussianBelief() = default;
  GaussianBelief(Eigen::VectorXd m, Eigen::MatrixXd c);

  int dim() const { return static_cast<int>(mean.size()); }
};

/// Symmetrize and add the jitter floor.
Eigen::MatrixXd stabilize_cov(const Eigen::MatrixXd& cov);

/// log|A| for a symmetric positive-definite matrix (after jitter).
double log_det_spd(const Eigen::MatrixXd& a);

double gaussian_log_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                        const Eigen::MatrixXd& cov);

/// Entropy of N(., cov) in nats.
double gaussian_entropy(const Eigen::MatrixXd& cov);

struct NiwParams {
  Eigen::VectorXd mean;     // prior location
  double scale = 1.0;       // kappa, pseudo-count on the location
  double dof = 2.0;         // nu > dim - 1
  Eigen::MatrixXd scatter;  // Psi, positive-definite

  NiwParams() = default;
  NiwParams(Eigen::VectorXd m, double kappa, double nu, Eigen::MatrixXd psi);

  int dim() const { return static_cast<int>(mean.size()); }
  void validate() const;
};

/// Log density of the multivariate Student-t posterior predictive.
double gaussian_log_predictive(const Eigen::VectorXd& x, const NiwParams& p);

/// Conjugate update with a weighted batch; points are the columns of xs.
NiwParams niw_update(const NiwParams& p, const Eigen::MatrixXd& xs,
                     const Eigen::VectorXd& weights);
NiwParams niw_update(const NiwParams& p, const Eigen::VectorXd& x,
                     double weight = 1.0);

}  // namespace wmb

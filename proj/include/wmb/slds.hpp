#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "wmb/distributions.hpp"
#include "wmb/rng.hpp"

namespace wmb {

/// Matrix-normal inverse-Wishart prior over one mode's regression
/// x_t = M z_{t-1} + noise with z = [x; u; 1].
struct RegressionPrior {
  Eigen::MatrixXd mean;       // D x P
  Eigen::MatrixXd precision;  // P x P, row precision of the mean
  double dof = 0.0;
  Eigen::MatrixXd scatter;    // D x D

  /// Log density of (A, Sigma) under the prior, up to no constant.
  double log_density(const Eigen::MatrixXd& a, const Eigen::MatrixXd& sigma) const;
};

/// Recurrent switching linear dynamical system.
///
///   s_0 ~ switch_init, x_0 ~ state_init
///   s_t ~ softmax(base_logits(:, s_{t-1}) + recurrence * x_{t-1})
///   x_t = dynamics[s_t] x_{t-1} + bias[s_t] + control[s_t] u_{t-1} + N(0, noise[s_t])
///   y_t = emission x_t + N(0, obs_noise)
struct SldsLayer {
  int num_modes = 1;
  int state_dim = 1;
  int obs_dim = 1;
  int control_dim = 0;

  std::vector<Eigen::MatrixXd> dynamics;  // D x D
  std::vector<Eigen::VectorXd> bias;      // D
  std::vector<Eigen::MatrixXd> control;   // D x U
  std::vector<Eigen::MatrixXd> noise;     // D x D
  Eigen::MatrixXd base_logits;            // K x K (next, prev)
  Eigen::MatrixXd recurrence;             // K x D
  Eigen::MatrixXd emission;               // O x D
  Eigen::MatrixXd obs_noise;              // O x O
  CategoricalBelief switch_init;
  GaussianBelief state_init;

  std::vector<RegressionPrior> dynamics_prior;

  /// Identity dynamics, unit noise, zero recurrence, identity-like emission.
  static SldsLayer make(int modes, int state_dim, int obs_dim, int control_dim = 0);

  /// Regression matrix [dynamics, control, bias] of mode k (D x P).
  Eigen::MatrixXd regression(int k) const;
  void set_regression(int k, const Eigen::MatrixXd& m);
  int regressor_dim() const { return state_dim + control_dim + 1; }

  /// Weak default prior centred on the current regression of every mode.
  void reset_prior(double precision = 1e-2, double scatter = 1e-2);

  int parameter_count() const;
  void validate() const;
};

/// logits(next, prev) = base_logits + recurrence * prev_state (broadcast).
Eigen::MatrixXd recurrence_logits(const SldsLayer& layer, const Eigen::VectorXd& prev_state);

/// Observations are rows (T x O, NaN = missing); controls are rows with
/// u_t driving the step t -> t + 1 (T - 1 or T rows, empty when passive).
struct SldsSequence {
  Eigen::MatrixXd obs;
  Eigen::MatrixXd controls;

  int length() const { return static_cast<int>(obs.rows()); }
};

void check_sequence(const SldsLayer& layer, const SldsSequence& seq);

struct SldsSample {
  std::vector<int> modes;
  Eigen::MatrixXd states;  // T x D
  Eigen::MatrixXd obs;     // T x O
};

/// Draw order per step: mode, state noise, observation noise.
SldsSample simulate(const SldsLayer& layer, int horizon, const Eigen::MatrixXd& controls,
                    Rng& rng);
SldsSample simulate(const SldsLayer& layer, int horizon, const Eigen::MatrixXd& controls,
                    std::uint64_t seed);

/// Pieces shared with hierarchical generation.
int sample_switch(const SldsLayer& layer, int prev_mode, const Eigen::VectorXd& prev_state,
                  Rng& rng);
Eigen::VectorXd sample_state(const SldsLayer& layer, int mode, const Eigen::VectorXd& prev_state,
                             const Eigen::VectorXd& control, Rng& rng);
Eigen::VectorXd sample_emission(const SldsLayer& layer, const Eigen::VectorXd& state, Rng& rng);

struct KalmanResult {
  std::vector<GaussianBelief> filtered;
  std::vector<GaussianBelief> smoothed;
  std::vector<Eigen::MatrixXd> cross;  // Cov(x_t, x_{t-1}); entry 0 unused
  double log_likelihood = 0.0;
};

/// Exact smoothing for the linear-Gaussian model selected by a fixed mode
/// sequence (covariance-form filter with Rauch-Tung-Striebel backward pass).
KalmanResult kalman_smooth(const SldsLayer& layer, const SldsSequence& seq,
                           const std::vector<int>& modes);

/// Extra Gaussian evidence on x_t: E log N(y; C x_t, R) + offset.
struct GaussianEvidence {
  int t = 0;
  Eigen::MatrixXd c;
  Eigen::VectorXd y;
  Eigen::MatrixXd r;
  double offset = 0.0;
};

/// Breaks the chain at t: x_t and s_t are drawn afresh from a weighted
/// family of priors (mean-field expectation over a parent's state).
struct Restart {
  int t = 0;
  std::vector<double> weights;
  std::vector<GaussianBelief> priors;
  Eigen::VectorXd switch_log_prior;  // expected log prior over s_t
  double offset = 0.0;
};

/// E_q log N(x; prior.mean, prior.cov) with the same jitter as the
/// restart terms of StructuredVi.
double expected_log_normal(const GaussianBelief& q, const GaussianBelief& prior);

struct SldsContext {
  std::vector<Restart> restarts;
  std::vector<GaussianEvidence> evidence;
};

struct HybridTrajectory {
  Eigen::MatrixXd switch_marginals;             // K x T
  std::vector<Eigen::MatrixXd> switch_pairwise; // [t] (next x prev), entry 0 unused
  Eigen::MatrixXd means;                        // D x T
  std::vector<Eigen::MatrixXd> covs;            // [t]
  std::vector<Eigen::MatrixXd> cross;           // [t] Cov(x_t, x_{t-1}), entry 0 unused
  std::vector<Eigen::MatrixXd> psi;             // [t] K x K expansion points, entry 0 unused
  std::vector<double> elbo;                     // after every iteration
  double final_elbo() const { return elbo.empty() ? 0.0 : elbo.back(); }
  int length() const { return static_cast<int>(means.cols()); }

  GaussianBelief state(int t) const { return GaussianBelief(means.col(t), covs[t]); }
  std::vector<int> map_modes() const;
};

/// Structured mean-field q(s) q(x) with a quadratic (Bohning) bound on the
/// recurrence log-normalizer. Each iteration updates q(s), q(x), then the
/// bound's expansion points and records the ELBO.
class StructuredVi {
 public:
  StructuredVi(const SldsLayer& layer, const SldsSequence& seq, SldsContext ctx = {});
  /// Continue from a previous posterior of the same length.
  StructuredVi(const SldsLayer& layer, const SldsSequence& seq, SldsContext ctx,
               const HybridTrajectory& warm);

  void iterate();
  void update_switches();
  void update_states();
  void update_expansion();
  double elbo() const;

  const HybridTrajectory& trajectory() const { return traj_; }
  HybridTrajectory& trajectory() { return traj_; }
  void set_context(SldsContext ctx);

 private:
  void init_uniform();
  bool is_restart(int t) const { return restart_of_[t] >= 0; }
  Eigen::VectorXd control_at(int t) const;

  const SldsLayer* layer_;
  const SldsSequence* seq_;
  SldsContext ctx_;
  std::vector<int> restart_of_;
  HybridTrajectory traj_;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> noise_llt_;
  std::vector<double> noise_logdet_;
};

HybridTrajectory structured_vi(const SldsLayer& layer, const SldsSequence& seq, int iters,
                               const SldsContext& ctx = {});

struct SldsLearnOptions {
  int vi_iters = 5;  // E-step iterations per sweep
  int recurrence_steps = 50;
  double recurrence_step = 1e-2;
  bool learn_recurrence = true;
};

struct SldsLearnResult {
  SldsLayer layer;
  std::vector<double> elbo;  // ELBO + log prior, one value per sweep
  std::vector<HybridTrajectory> posteriors;
};

/// Variational EM: structured VI E-step (warm-started), MAP regression
/// update per mode, gradient ascent on the recurrence bound.
SldsLearnResult vb_learn(const SldsLayer& layer, const std::vector<SldsSequence>& data,
                         int sweeps, const SldsLearnOptions& opts = {},
                         const std::vector<double>& weights = {});

/// Sufficient statistics for the per-mode regression M-step.
struct RegressionStats {
  Eigen::MatrixXd zz;  // P x P
  Eigen::MatrixXd xz;  // D x P
  Eigen::MatrixXd xx;  // D x D
  double count = 0.0;
};

std::vector<RegressionStats> regression_stats(const SldsLayer& layer, const SldsSequence& seq,
                                              const HybridTrajectory& q,
                                              const std::vector<int>& restarts = {},
                                              double weight = 1.0);

/// MAP regression and noise from a prior plus statistics.
void regression_map(const RegressionPrior& prior, const RegressionStats& s,
                    Eigen::MatrixXd& m_out, Eigen::MatrixXd& sigma_out);

}  // namespace wmb

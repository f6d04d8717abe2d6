#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmb/distributions.hpp"
#include "wmb/rng.hpp"

namespace wmb {

/// Mixed-radix index over a list of digit sizes; digit 0 varies fastest.
class JointSpace {
 public:
  JointSpace() = default;
  explicit JointSpace(std::vector<int> radices);

  int size() const { return size_; }
  int digits() const { return static_cast<int>(radices_.size()); }
  int radix(int d) const { return radices_[d]; }
  int stride(int d) const { return strides_[d]; }

  int encode(const std::vector<int>& digits) const;
  std::vector<int> decode(int index) const;
  int digit(int index, int d) const { return (index / strides_[d]) % radices_[d]; }

 private:
  std::vector<int> radices_;
  std::vector<int> strides_;
  int size_ = 1;
};

/// Shape of a discrete layer. order_states[f][g] is the number of values of
/// generalized order g (0 = state, 1 = path, ...) in factorial chain f.
struct HmmShape {
  std::vector<std::vector<int>> order_states;
  std::vector<int> num_obs;
  std::vector<std::string> modality_names;
  /// controllable[f][g]: transitions of that order depend on the action.
  std::vector<std::vector<bool>> controllable;
  int num_actions = 0;
};

/// Discrete building block: generalized, factorial, optionally controlled HMM.
///
/// Transitions of order g in factor f are conditioned on the previous value
/// of that order, on the *next* value of order g + 1 (the path variable that
/// selects which table order g uses this step), and on the action when the
/// order is controllable. Observations depend on the order-0 states of all
/// factors jointly through one table per modality.
struct HmmLayer {
  HmmShape shape;

  std::vector<std::vector<DirichletCounts>> trans;  // [f][g]
  std::vector<std::vector<DirichletCounts>> init;   // [f][g], one column
  std::vector<DirichletCounts> obs;                 // [m]

  std::vector<std::vector<DirichletCounts>> trans_prior;
  std::vector<std::vector<DirichletCounts>> init_prior;
  std::vector<DirichletCounts> obs_prior;

  /// All tables at the same prior pseudo-count.
  static HmmLayer make(HmmShape shape, double prior_count = kDefaultPriorCount);

  int num_factors() const { return static_cast<int>(shape.order_states.size()); }
  int num_orders(int f) const { return static_cast<int>(shape.order_states[f].size()); }
  int order_size(int f, int g) const { return shape.order_states[f][g]; }
  int num_modalities() const { return static_cast<int>(shape.num_obs.size()); }
  bool is_controllable() const;
  bool order_controllable(int f, int g) const { return shape.controllable[f][g]; }

  /// Joint latent space over every (factor, order) digit.
  JointSpace latent_space() const;
  /// Latent space of one factor (its orders).
  JointSpace factor_space(int f) const;
  /// Space indexed by the order-0 states of all factors (observation columns).
  JointSpace obs_column_space() const;

  /// Column of trans[f][g] for the given conditioning values.
  int trans_config(int f, int g, int prev, int upper_next, int action) const;

  /// Replace a table by probs * concentration (+ floor so counts stay > 0).
  /// The prior is left unchanged.
  void set_transition(int f, int g, const Eigen::MatrixXd& probs,
                      double concentration = 1e6, double floor = 1e-12);
  void set_initial(int f, int g, const Eigen::VectorXd& probs,
                   double concentration = 1e6, double floor = 1e-12);
  void set_observation(int m, const Eigen::MatrixXd& probs,
                       double concentration = 1e6, double floor = 1e-12);

  /// Total pseudo-count over every table.
  double total_counts() const;
  /// Number of free parameters (for reporting).
  int parameter_count() const;

  void validate() const;
};

enum class ParamMode {
  kMean,         // normalized posterior-mean tables
  kExpectedLog,  // exp(E[log theta]) (variational Bayes)
};

struct InferenceOptions {
  ParamMode mode = ParamMode::kMean;
  /// Joint spaces up to this size are enumerated exactly; larger ones use
  /// structured mean-field over factors.
  int exact_cap = 1024;
  int mean_field_sweeps = 10;
};

/// One observed sequence: obs(t, m) is the symbol of modality m at time t
/// (-1 = missing). actions[t] drives the transition t -> t + 1.
struct DiscreteSequence {
  Eigen::MatrixXi obs;
  std::vector<int> actions;

  int length() const { return static_cast<int>(obs.rows()); }
};

/// Layer tables compiled into per-factor transition matrices for one
/// parameter mode.
class HmmKernel {
 public:
  HmmKernel(const HmmLayer& layer, ParamMode mode);

  const HmmLayer& layer() const { return *layer_; }
  int num_factors() const { return static_cast<int>(factor_sizes_.size()); }
  int factor_size(int f) const { return factor_sizes_[f]; }
  int joint_size() const { return joint_size_; }
  const std::vector<int>& factor_sizes() const { return factor_sizes_; }

  /// Factor transition matrix (next x prev) for an action (ignored when the
  /// factor is uncontrolled).
  const Eigen::MatrixXd& factor_transition(int f, int action) const;
  const Eigen::VectorXd& factor_initial(int f) const { return init_[f]; }
  const Eigen::MatrixXd& observation(int m) const { return obs_[m]; }

  /// Order-0 state of factor f for a factor-joint index.
  int factor_state0(int f, int zf) const { return zf % order0_sizes_[f]; }
  int obs_column_of_joint(int z) const;

  Eigen::VectorXd initial_joint() const;
  /// T v : propagate a joint (unnormalized) belief one step.
  Eigen::VectorXd propagate(const Eigen::VectorXd& v, int action) const;
  /// T^T v.
  Eigen::VectorXd propagate_transpose(const Eigen::VectorXd& v, int action) const;
  /// Apply per-factor matrices (one per factor; empty = identity).
  Eigen::VectorXd apply_factors(const Eigen::VectorXd& v,
                                const std::vector<const Eigen::MatrixXd*>& mats,
                                bool transpose) const;
  /// Dense joint transition (next x prev); only for small joint spaces.
  Eigen::MatrixXd dense_transition(int action) const;

  /// log p(o | obs column) summed over observed modalities, per column.
  Eigen::VectorXd obs_column_loglik(const Eigen::Ref<const Eigen::VectorXi>& o) const;
  /// Same, expanded over the joint latent space.
  Eigen::VectorXd joint_loglik(const Eigen::Ref<const Eigen::VectorXi>& o) const;

 private:
  const HmmLayer* layer_;
  std::vector<int> factor_sizes_;
  std::vector<int> order0_sizes_;
  int joint_size_ = 1;
  int obs_cols_ = 1;
  std::vector<std::vector<Eigen::MatrixXd>> trans_;  // [f][a]
  std::vector<Eigen::VectorXd> init_;
  std::vector<Eigen::MatrixXd> obs_;
  std::vector<Eigen::MatrixXd> log_obs_;
};

/// Smoothed posterior of one discrete layer over a sequence.
struct DiscreteTrajectory {
  std::vector<Eigen::MatrixXd> factor_marginals;             // [f] Jf x T
  std::vector<std::vector<Eigen::MatrixXd>> factor_pairwise; // [f][t] (next x prev)
  Eigen::MatrixXd obs_marginals;                             // cols x T
  Eigen::MatrixXd joint_marginals;                           // J x T, exact only
  double log_evidence = 0.0;  // exact log-likelihood, or ELBO under mean-field
  bool exact = true;

  int length() const {
    return factor_marginals.empty() ? 0 : static_cast<int>(factor_marginals[0].cols());
  }
  /// Marginal of order g of factor f at time t.
  CategoricalBelief marginal(const HmmLayer& layer, int f, int g, int t) const;
};

void check_sequence(const HmmLayer& layer, const DiscreteSequence& seq);

DiscreteTrajectory forward_backward(const HmmLayer& layer,
                                    const DiscreteSequence& seq,
                                    const InferenceOptions& opts = {});

/// Forward-backward with extra per-time log-potentials over the joint
/// latent space (used by hierarchical message passing) and an optional
/// initial joint prior replacing the layer's own initial tables.
DiscreteTrajectory forward_backward(const HmmKernel& kernel,
                                    const DiscreteSequence& seq,
                                    const Eigen::MatrixXd* extra_log_potentials,
                                    const Eigen::VectorXd* initial_joint);

/// log p(observations, extra | z_0 = j) for every joint state j.
Eigen::VectorXd initial_state_loglik(const HmmKernel& kernel, const DiscreteSequence& seq,
                                     const Eigen::MatrixXd* extra_log_potentials);

struct ViterbiPath {
  std::vector<int> joint;  // joint latent index per step
  double log_prob = 0.0;   // joint log-probability of path and observations
};

ViterbiPath viterbi(const HmmLayer& layer, const DiscreteSequence& seq,
                    const InferenceOptions& opts = {});

/// Add expected sufficient statistics to the layer's current counts.
HmmLayer vb_update(const HmmLayer& layer,
                   const std::vector<DiscreteTrajectory>& trajectories,
                   const std::vector<DiscreteSequence>& data);

/// Add expected statistics of one trajectory in place. Transitions into
/// steps flagged in skip_transition are ignored.
void accumulate_counts(HmmLayer& layer, const DiscreteTrajectory& traj,
                       const DiscreteSequence& seq, bool include_initial,
                       const std::vector<bool>& skip_transition = {});

/// Total Dirichlet KL of every table from its prior.
double layer_kl(const HmmLayer& layer);

/// Counts reset to the prior tables.
HmmLayer reset_to_prior(const HmmLayer& layer);

/// Add magnitude * U(0, 1) to every transition and observation count
/// (symmetry breaking before learning).
HmmLayer perturb_counts(const HmmLayer& layer, Rng& rng, double magnitude);

struct HmmLearnResult {
  HmmLayer layer;
  std::vector<double> elbo;  // one value per sweep
};

/// Batch variational Bayes: every sweep runs expected-log forward-backward
/// on all sequences and resets the counts to prior + expected statistics.
/// The reported ELBO is sum of log normalizers minus the Dirichlet KL.
HmmLearnResult vb_learn(const HmmLayer& layer,
                        const std::vector<DiscreteSequence>& data, int sweeps,
                        const InferenceOptions& opts = {});

/// ELBO of the current counts: expected-log evidence minus Dirichlet KL.
double vb_elbo(const HmmLayer& layer, const std::vector<DiscreteSequence>& data,
               const InferenceOptions& opts = {});

/// Either a fixed action sequence or a sampler called once per step.
struct ActionPolicy {
  std::vector<int> fixed;
  std::function<int(int t, Rng& rng)> sampler;

  bool empty() const { return fixed.empty() && !sampler; }
  int action(int t, Rng& rng) const;
};

struct RolloutSample {
  std::vector<int> joint;    // joint latent index per step
  Eigen::MatrixXi obs;       // T x M
  std::vector<int> actions;  // T - 1 actions actually applied
};

/// Ancestral sampling with mean parameters. Higher orders are sampled first
/// at each step so that the next path value selects the lower table.
RolloutSample generalized_rollout(const HmmLayer& layer, int horizon,
                                  const ActionPolicy& policy, Rng& rng);
RolloutSample generalized_rollout(const HmmLayer& layer, int horizon,
                                  const ActionPolicy& policy, std::uint64_t seed);

/// Building pieces shared with hierarchical generation.
int sample_initial_joint(const HmmLayer& layer, Rng& rng);
int sample_next_joint(const HmmLayer& layer, int joint, int action, Rng& rng);
Eigen::VectorXi sample_observation(const HmmLayer& layer, int joint, Rng& rng);

struct Quantization {
  std::vector<int> codes;
  std::vector<double> centers;
  double bin_width = 0.0;

  double decode(int code) const { return centers[code]; }
};

/// Uniform bins over the observed range, codes are nearest centers.
Quantization quantize(const std::vector<double>& values, int levels);

}  // namespace wmb

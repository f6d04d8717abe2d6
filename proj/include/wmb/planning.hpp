#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmb/composition.hpp"
#include "wmb/envs.hpp"
#include "wmb/hmm.hpp"
#include "wmb/slds.hpp"

namespace wmb {

/// Log-preferences over discrete observations (one vector per modality,
/// empty = indifferent) or a quadratic preference over continuous ones.
struct Preferences {
  std::vector<Eigen::VectorXd> log_pref;
  Eigen::VectorXd target;
  Eigen::MatrixXd precision;

  void validate() const;
};

struct PlannerConfig {
  int horizon = 1;
  double info_gain_weight = 1.0;
  bool parameter_info_gain = true;  // Dirichlet count-update information
  int policy_cap = 1024;
  int num_rollouts = 0;  // 0 = exact evaluation
  int jobs = 1;
  bool learn = false;    // vb-update the model after every step
  std::uint64_t seed = 0;
  Eigen::MatrixXd controls;  // continuous layers: U x A control vector per action

  void validate() const;
};

struct PolicyScore {
  std::vector<int> actions;
  double preference = 0.0;       // -E[log preference], summed over the horizon
  double state_info_gain = 0.0;  // expected KL between state posterior and prior
  double param_info_gain = 0.0;  // expected Dirichlet KL of a one-count update
  double efe = 0.0;              // preference - w * (state + param info gain)
  double std_error = 0.0;        // rollout estimator; 0 when exact

  double info_gain() const { return state_info_gain + param_info_gain; }
};

struct PolicyEvaluation {
  std::vector<PolicyScore> scores;
  int chosen = 0;  // minimum EFE, ties to the first policy
  int horizon = 0;
};

/// Every action sequence of the given length, lexicographic (last action
/// fastest). More than cap sequences is a configuration error.
std::vector<std::vector<int>> enumerate_policies(int num_actions, int horizon, int cap = 1024);

/// Exact propagation of a joint belief over a controllable discrete layer.
PolicyEvaluation evaluate_policies_discrete(const HmmLayer& layer, const Eigen::VectorXd& belief,
                                            const std::vector<std::vector<int>>& policies,
                                            const Preferences& prefs, const PlannerConfig& cfg);
/// Same for a one-layer graph.
PolicyEvaluation evaluate_policies_discrete(const ModelGraph& graph, const Eigen::VectorXd& belief,
                                            const std::vector<std::vector<int>>& policies,
                                            const Preferences& prefs, const PlannerConfig& cfg);

/// Current belief of a one-layer graph: a joint vector for a discrete layer,
/// switch probabilities plus a Gaussian for a continuous one.
struct PlanBelief {
  Eigen::VectorXd discrete;
  Eigen::VectorXd modes;
  GaussianBelief state;
};

/// Monte-Carlo evaluation; rollout r uses the same random stream for every
/// policy (common random numbers).
PolicyEvaluation evaluate_policies_rollout(const ModelGraph& graph, const PlanBelief& belief,
                                           const std::vector<std::vector<int>>& policies,
                                           const Preferences& prefs, int num_rollouts,
                                           std::uint64_t seed, const PlannerConfig& cfg);

struct StepLog {
  int t = 0;
  Eigen::VectorXi obs;
  int action = -1;
  double reward = 0.0;
  double log_evidence = 0.0;  // log p(o_t | o_<t, actions) under the current model
  double efe = 0.0;           // EFE of the chosen policy (0 on the reset step)
  bool fallback = false;      // uniform-random action (zero horizon)
  Eigen::VectorXd belief;
  // timing, excluded from the replayable log
  double plan_us = 0.0;
  double update_us = 0.0;
  double total_us = 0.0;
};

struct EpisodeLog {
  std::vector<StepLog> steps;
  double total_reward = 0.0;
  bool reached_terminal = false;
};

struct ActResult {
  std::vector<EpisodeLog> episodes;
  HmmLayer model;  // after online updates
};

/// Closed loop: infer, plan, act, observe, update. The model persists
/// across episodes.
ActResult act_loop(Env& env, const HmmLayer& model, const Preferences& prefs,
                   const PlannerConfig& cfg, int episodes);
ActResult act_loop(Env& env, const ModelGraph& graph, const Preferences& prefs,
                   const PlannerConfig& cfg, int episodes);

/// One replayable line: t, obs, action, reward, log evidence, EFE.
std::string serialize_step_log(const StepLog& s);
/// One timing line: t, plan, update and total microseconds.
std::string serialize_step_timing(const StepLog& s);

}  // namespace wmb

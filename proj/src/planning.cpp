#include "wmb/planning.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <future>

#include <boost/math/special_functions/digamma.hpp>

#include "json.hpp"

#include "wmb/error.hpp"

namespace wmb {

void Preferences::validate() const {
  for (const auto& v : log_pref)
    require(v.allFinite(), ErrorKind::kConfig, "preferences must be finite");
  if (target.size() > 0 || precision.size() > 0) {
    require(precision.rows() == target.size() && precision.cols() == target.size(), ErrorKind::kConfig,
            "quadratic preference precision must be square and match the target");
    require(target.allFinite() && precision.allFinite(), ErrorKind::kConfig,
            "quadratic preference must be finite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (precision + precision.transpose()));
    require(es.eigenvalues().minCoeff() >= -1e-12, ErrorKind::kConfig,
            "preference precision must be positive-semidefinite");
  }
}

void PlannerConfig::validate() const {
  require(horizon >= 0, ErrorKind::kConfig, "planning horizon must be >= 0");
  require(std::isfinite(info_gain_weight) && info_gain_weight >= 0.0, ErrorKind::kConfig,
          "information-gain weight must be finite and >= 0");
  require(policy_cap >= 1, ErrorKind::kConfig, "policy cap must be >= 1");
  require(num_rollouts >= 0, ErrorKind::kConfig, "rollout count must be >= 0");
  require(jobs >= 1, ErrorKind::kConfig, "jobs must be >= 1");
}

std::vector<std::vector<int>> enumerate_policies(int num_actions, int horizon, int cap) {
  require(num_actions >= 1, ErrorKind::kConfig, "policies need >= 1 action");
  require(horizon >= 1, ErrorKind::kConfig, "policy horizon must be >= 1");
  double count = 1.0;
  for (int h = 0; h < horizon; ++h) count *= num_actions;
  require(count <= cap, ErrorKind::kConfig,
          "policy space of " + std::to_string(static_cast<long long>(count)) + " exceeds the cap " +
              std::to_string(cap));
  std::vector<std::vector<int>> out;
  std::vector<int> p(horizon, 0);
  while (true) {
    out.push_back(p);
    int i = horizon - 1;
    while (i >= 0 && ++p[i] == num_actions) p[i--] = 0;
    if (i < 0) break;
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double micros_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
}

/// KL(Dir(a + e_k) || Dir(a)) for every outcome k and column.
Eigen::MatrixXd one_count_kl(const DirichletCounts& c) {
  Eigen::MatrixXd out(c.outcomes(), c.configs());
  for (int j = 0; j < c.configs(); ++j) {
    const double a0 = c.counts.col(j).sum();
    const double psi0 = boost::math::digamma(a0 + 1.0);
    for (int k = 0; k < c.outcomes(); ++k) {
      const double ak = c.counts(k, j);
      out(k, j) = std::log(a0 / ak) + boost::math::digamma(ak + 1.0) - psi0;
    }
  }
  return out;
}

void check_policies(const std::vector<std::vector<int>>& policies, int num_actions) {
  require(!policies.empty(), ErrorKind::kConfig, "no policies to evaluate");
  for (const auto& p : policies) {
    require(p.size() == policies[0].size(), ErrorKind::kConfig, "all policies must share one horizon");
    for (int a : p)
      require(a >= 0 && a < num_actions, ErrorKind::kConfig, "policy action out of range");
  }
}

int argmin_efe(const std::vector<PolicyScore>& s) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(s.size()); ++i)
    if (s[i].efe < s[best].efe) best = i;
  return best;
}

/// Per-step quantities of a discrete layer, compiled once per evaluation.
class DiscretePlanner {
 public:
  DiscretePlanner(const HmmLayer& layer, const Preferences& prefs, const PlannerConfig& cfg)
      : layer_(layer), kernel_(layer, ParamMode::kMean), cfg_(cfg) {
    require(layer.is_controllable(), ErrorKind::kConfig, "planning needs a controllable model");
    prefs.validate();
    require(prefs.log_pref.empty() || static_cast<int>(prefs.log_pref.size()) == layer.num_modalities(),
            ErrorKind::kConfig, "one preference vector per modality (empty = none)");
    const int nm = layer.num_modalities();
    cols_ = layer.obs_column_space().size();
    joint_to_col_.resize(kernel_.joint_size());
    for (int z = 0; z < kernel_.joint_size(); ++z) joint_to_col_[z] = kernel_.obs_column_of_joint(z);

    double outcomes = 1.0;
    for (int m = 0; m < nm; ++m) {
      a_.push_back(kernel_.observation(m));
      outcomes *= layer.shape.num_obs[m];
    }
    require(outcomes <= 65536.0, ErrorKind::kConfig,
            "joint observation space too large for exact information gain");

    col_pref_ = Eigen::VectorXd::Zero(cols_);
    col_cond_entropy_ = Eigen::VectorXd::Zero(cols_);
    col_param_ig_ = Eigen::VectorXd::Zero(cols_);
    for (int m = 0; m < nm; ++m) {
      const bool has_pref = !prefs.log_pref.empty() && prefs.log_pref[m].size() > 0;
      if (has_pref)
        require(prefs.log_pref[m].size() == layer.shape.num_obs[m], ErrorKind::kConfig,
                "preference vector length must match its modality");
      pref_.push_back(has_pref ? prefs.log_pref[m] : Eigen::VectorXd::Zero(layer.shape.num_obs[m]));
      obs_kl_.push_back(cfg.parameter_info_gain ? one_count_kl(layer.obs[m])
                                                : Eigen::MatrixXd::Zero(a_[m].rows(), a_[m].cols()));
      for (int c = 0; c < cols_; ++c) {
        col_pref_[c] += a_[m].col(c).dot(pref_[m]);
        col_cond_entropy_[c] += categorical_entropy(Eigen::VectorXd(a_[m].col(c)));
        col_param_ig_[c] += a_[m].col(c).dot(obs_kl_[m].col(c));
      }
    }

    // expected transition KL per factor, action and previous factor state
    const int nf = layer.num_factors();
    const int na = std::max(1, layer.shape.num_actions);
    factor_spaces_.resize(nf);
    trans_kl_.resize(nf);
    trans_ig_.resize(nf);
    for (int f = 0; f < nf; ++f) {
      factor_spaces_[f] = layer.factor_space(f);
      for (int g = 0; g < layer.num_orders(f); ++g)
        trans_kl_[f].push_back(cfg.parameter_info_gain ? one_count_kl(layer.trans[f][g])
                                                       : Eigen::MatrixXd::Zero(layer.trans[f][g].outcomes(),
                                                                               layer.trans[f][g].configs()));
      for (int a = 0; a < na; ++a) {
        const Eigen::MatrixXd& t = kernel_.factor_transition(f, a);
        const JointSpace& fs = factor_spaces_[f];
        Eigen::VectorXd r = Eigen::VectorXd::Zero(fs.size());
        for (int zp = 0; zp < fs.size(); ++zp)
          for (int zn = 0; zn < fs.size(); ++zn) {
            const double p = t(zn, zp);
            if (p == 0.0) continue;
            r[zp] += p * pair_kl(f, zp, zn, a);
          }
        trans_ig_[f].push_back(r);
      }
    }
    factors_ = JointSpace(kernel_.factor_sizes());
  }

  int joint_size() const { return kernel_.joint_size(); }
  const HmmKernel& kernel() const { return kernel_; }

  /// Sum over orders of the one-count KL of the transition zp -> zn.
  double pair_kl(int f, int zp, int zn, int a) const {
    const JointSpace& fs = factor_spaces_[f];
    const int ng = layer_.num_orders(f);
    double s = 0.0;
    for (int g = 0; g < ng; ++g) {
      const int up = g + 1 < ng ? fs.digit(zn, g + 1) : 0;
      s += trans_kl_[f][g](fs.digit(zn, g), layer_.trans_config(f, g, fs.digit(zp, g), up, a));
    }
    return s;
  }

  std::vector<Eigen::VectorXd> factor_marginals(const Eigen::VectorXd& q) const {
    std::vector<Eigen::VectorXd> out;
    for (int f = 0; f < factors_.digits(); ++f) out.push_back(Eigen::VectorXd::Zero(factors_.radix(f)));
    for (int z = 0; z < q.size(); ++z)
      for (int f = 0; f < factors_.digits(); ++f) out[f][factors_.digit(z, f)] += q[z];
    return out;
  }

  Eigen::VectorXd column_marginal(const Eigen::VectorXd& q) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(cols_);
    for (int z = 0; z < q.size(); ++z) p[joint_to_col_[z]] += q[z];
    return p;
  }

  /// Entropy of the joint outcome distribution of all modalities.
  double outcome_entropy(const Eigen::VectorXd& pcol) const {
    double h = 0.0;
    std::function<void(int, const Eigen::VectorXd&)> rec = [&](int m, const Eigen::VectorXd& w) {
      if (m == static_cast<int>(a_.size())) {
        const double p = w.sum();
        if (p > 0.0) h -= p * std::log(p);
        return;
      }
      for (Eigen::Index o = 0; o < a_[m].rows(); ++o) {
        const Eigen::VectorXd next = w.cwiseProduct(a_[m].row(o).transpose());
        if (next.sum() > 0.0) rec(m + 1, next);
      }
    };
    rec(0, pcol);
    return h;
  }

  PolicyScore evaluate(const Eigen::VectorXd& belief, const std::vector<int>& policy) const {
    PolicyScore s;
    s.actions = policy;
    Eigen::VectorXd q = belief;
    for (int a : policy) {
      if (cfg_.parameter_info_gain) {
        const auto fm = factor_marginals(q);
        for (std::size_t f = 0; f < fm.size(); ++f)
          s.param_info_gain += fm[f].dot(trans_ig_[f][a]);
      }
      q = kernel_.propagate(q, a);
      const Eigen::VectorXd pcol = column_marginal(q);
      s.preference -= pcol.dot(col_pref_);
      s.state_info_gain += std::max(0.0, outcome_entropy(pcol) - pcol.dot(col_cond_entropy_));
      s.param_info_gain += pcol.dot(col_param_ig_);
    }
    s.efe = s.preference - cfg_.info_gain_weight * s.info_gain();
    return s;
  }

  int column_of(int z) const { return joint_to_col_[z]; }
  const std::vector<Eigen::MatrixXd>& obs_tables() const { return a_; }
  const std::vector<Eigen::VectorXd>& prefs() const { return pref_; }
  const std::vector<Eigen::MatrixXd>& obs_kl() const { return obs_kl_; }
  const JointSpace& factors() const { return factors_; }

 private:
  const HmmLayer& layer_;
  HmmKernel kernel_;
  PlannerConfig cfg_;
  int cols_ = 0;
  std::vector<int> joint_to_col_;
  std::vector<Eigen::MatrixXd> a_;
  std::vector<Eigen::VectorXd> pref_;
  std::vector<Eigen::MatrixXd> obs_kl_;
  Eigen::VectorXd col_pref_, col_cond_entropy_, col_param_ig_;
  std::vector<JointSpace> factor_spaces_;
  std::vector<std::vector<Eigen::MatrixXd>> trans_kl_;
  std::vector<std::vector<Eigen::VectorXd>> trans_ig_;  // [f][a]
  JointSpace factors_;
};

template <typename Fn>
std::vector<PolicyScore> map_policies(int n, int jobs, Fn fn) {
  std::vector<PolicyScore> out(n);
  if (jobs <= 1 || n < 2) {
    for (int i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  const int chunks = std::min(jobs, n);
  std::vector<std::future<void>> futs;
  for (int c = 0; c < chunks; ++c)
    futs.push_back(std::async(std::launch::async, [&, c] {
      for (int i = c; i < n; i += chunks) out[i] = fn(i);
    }));
  for (auto& f : futs) f.get();
  return out;
}

void check_belief(const Eigen::VectorXd& b, int size) {
  require(b.size() == size, ErrorKind::kShape, "belief size does not match the joint latent space");
  require(b.allFinite() && (b.array() >= 0.0).all() && std::abs(b.sum() - 1.0) < 1e-9,
          ErrorKind::kPrecondition, "belief must be a probability vector");
}

const HmmLayer& single_discrete(const ModelGraph& g) {
  require(g.layers.size() == 1 && std::holds_alternative<HmmLayer>(g.layers[0]), ErrorKind::kConfig,
          "exact discrete planning needs a one-layer discrete graph");
  return std::get<HmmLayer>(g.layers[0]);
}

}  // namespace

PolicyEvaluation evaluate_policies_discrete(const HmmLayer& layer, const Eigen::VectorXd& belief,
                                            const std::vector<std::vector<int>>& policies,
                                            const Preferences& prefs, const PlannerConfig& cfg) {
  cfg.validate();
  const DiscretePlanner planner(layer, prefs, cfg);
  check_belief(belief, planner.joint_size());
  check_policies(policies, layer.shape.num_actions);
  PolicyEvaluation ev;
  ev.horizon = static_cast<int>(policies[0].size());
  ev.scores = map_policies(static_cast<int>(policies.size()), cfg.jobs,
                           [&](int i) { return planner.evaluate(belief, policies[i]); });
  ev.chosen = argmin_efe(ev.scores);
  return ev;
}

PolicyEvaluation evaluate_policies_discrete(const ModelGraph& graph, const Eigen::VectorXd& belief,
                                            const std::vector<std::vector<int>>& policies,
                                            const Preferences& prefs, const PlannerConfig& cfg) {
  return evaluate_policies_discrete(single_discrete(graph), belief, policies, prefs, cfg);
}

namespace {

struct RolloutTotals {
  double pref = 0.0, sig = 0.0, pig = 0.0, efe = 0.0;
};

PolicyScore summarize(const std::vector<RolloutTotals>& r, const std::vector<int>& policy) {
  const double n = static_cast<double>(r.size());
  PolicyScore s;
  s.actions = policy;
  for (const auto& x : r) {
    require(std::isfinite(x.efe), ErrorKind::kNumerical, "rollout produced a non-finite value");
    s.preference += x.pref / n;
    s.state_info_gain += x.sig / n;
    s.param_info_gain += x.pig / n;
    s.efe += x.efe / n;
  }
  if (r.size() < 2) {
    s.std_error = std::numeric_limits<double>::infinity();
  } else {
    double ss = 0.0;
    for (const auto& x : r) ss += (x.efe - s.efe) * (x.efe - s.efe);
    s.std_error = std::sqrt(ss / (n - 1.0) / n);
  }
  return s;
}

PolicyScore rollout_discrete(const HmmLayer& layer, const DiscretePlanner& planner,
                             const Eigen::VectorXd& belief, const std::vector<int>& policy,
                             int num_rollouts, std::uint64_t seed, double w) {
  // exact predictive column marginals give log p(o) for the sampled outcomes
  std::vector<Eigen::VectorXd> pcol;
  Eigen::VectorXd q = belief;
  for (int a : policy) {
    q = planner.kernel().propagate(q, a);
    pcol.push_back(planner.column_marginal(q));
  }
  const auto& tables = planner.obs_tables();
  const auto& prefs = planner.prefs();
  const auto& okl = planner.obs_kl();
  const JointSpace& factors = planner.factors();
  std::vector<RolloutTotals> totals(num_rollouts);
  for (int r = 0; r < num_rollouts; ++r) {
    Rng rng = Rng::stream(seed + static_cast<std::uint64_t>(r), "planning:rollout");
    int z = rng.categorical(belief);
    RolloutTotals& tot = totals[r];
    for (std::size_t tau = 0; tau < policy.size(); ++tau) {
      const int a = policy[tau];
      const int zn = sample_next_joint(layer, z, a, rng);
      for (int f = 0; f < factors.digits(); ++f)
        tot.pig += planner.pair_kl(f, factors.digit(z, f), factors.digit(zn, f), a);
      z = zn;
      const Eigen::VectorXi o = sample_observation(layer, z, rng);
      const int col = planner.column_of(z);
      double log_lik = 0.0;
      Eigen::VectorXd w_col = pcol[tau];
      for (std::size_t m = 0; m < tables.size(); ++m) {
        log_lik += std::log(tables[m](o[m], col));
        w_col = w_col.cwiseProduct(tables[m].row(o[m]).transpose());
        tot.pref -= prefs[m][o[m]];
        tot.pig += okl[m](o[m], col);
      }
      tot.sig += log_lik - std::log(w_col.sum());
    }
    tot.efe = tot.pref - w * (tot.sig + tot.pig);
  }
  return summarize(totals, policy);
}

PolicyScore rollout_continuous(const SldsLayer& layer, const PlanBelief& belief,
                               const std::vector<int>& policy, const Preferences& prefs,
                               const Eigen::MatrixXd& controls, int num_rollouts, std::uint64_t seed,
                               double w) {
  const double log_det_r = log_det_spd(layer.obs_noise);
  std::vector<RolloutTotals> totals(num_rollouts);
  for (int r = 0; r < num_rollouts; ++r) {
    Rng rng = Rng::stream(seed + static_cast<std::uint64_t>(r), "planning:rollout");
    int s = rng.categorical(belief.modes);
    Eigen::VectorXd x = rng.gaussian(belief.state.mean, belief.state.cov);
    Eigen::MatrixXd p = belief.state.cov;
    RolloutTotals& tot = totals[r];
    for (int a : policy) {
      s = sample_switch(layer, s, x, rng);
      x = sample_state(layer, s, x, controls.col(a), rng);
      const Eigen::VectorXd y = sample_emission(layer, x, rng);
      p = layer.dynamics[s] * p * layer.dynamics[s].transpose() + layer.noise[s];
      const Eigen::MatrixXd sy = layer.emission * p * layer.emission.transpose() + layer.obs_noise;
      tot.sig += 0.5 * (log_det_spd(sy) - log_det_r);
      if (prefs.target.size() > 0) {
        const Eigen::VectorXd d = y - prefs.target;
        tot.pref += 0.5 * d.dot(prefs.precision * d);
      }
    }
    tot.efe = tot.pref - w * tot.sig;
  }
  return summarize(totals, policy);
}

}  // namespace

PolicyEvaluation evaluate_policies_rollout(const ModelGraph& graph, const PlanBelief& belief,
                                           const std::vector<std::vector<int>>& policies,
                                           const Preferences& prefs, int num_rollouts,
                                           std::uint64_t seed, const PlannerConfig& cfg) {
  cfg.validate();
  prefs.validate();
  require(num_rollouts >= 1, ErrorKind::kConfig, "num_rollouts must be >= 1");
  require(graph.layers.size() == 1, ErrorKind::kConfig, "rollout planning needs a one-layer graph");
  PolicyEvaluation ev;
  if (const auto* hl = std::get_if<HmmLayer>(&graph.layers[0])) {
    const DiscretePlanner planner(*hl, prefs, cfg);
    check_belief(belief.discrete, planner.joint_size());
    check_policies(policies, hl->shape.num_actions);
    ev.scores = map_policies(static_cast<int>(policies.size()), cfg.jobs, [&](int i) {
      return rollout_discrete(*hl, planner, belief.discrete, policies[i], num_rollouts, seed,
                              cfg.info_gain_weight);
    });
  } else {
    const SldsLayer& sl = std::get<SldsLayer>(graph.layers[0]);
    require(sl.control_dim >= 1, ErrorKind::kConfig, "planning needs a controllable model");
    require(cfg.controls.rows() == sl.control_dim && cfg.controls.cols() >= 1, ErrorKind::kConfig,
            "planner controls must have one column of control_dim values per action");
    require(prefs.target.size() == 0 || prefs.target.size() == sl.obs_dim, ErrorKind::kConfig,
            "quadratic preference dimension must match the observations");
    check_belief(belief.modes, sl.num_modes);
    require(belief.state.dim() == sl.state_dim, ErrorKind::kShape, "state belief dimension mismatch");
    check_policies(policies, static_cast<int>(cfg.controls.cols()));
    ev.scores = map_policies(static_cast<int>(policies.size()), cfg.jobs, [&](int i) {
      return rollout_continuous(sl, belief, policies[i], prefs, cfg.controls, num_rollouts, seed,
                                cfg.info_gain_weight);
    });
  }
  ev.horizon = static_cast<int>(policies[0].size());
  ev.chosen = argmin_efe(ev.scores);
  return ev;
}

// ---------------------------------------------------------------------------
// Closed loop

namespace {

/// Filtered posterior after observing o; returns log p(o | prior).
double condition(const HmmKernel& k, Eigen::VectorXd& q, const Eigen::VectorXi& o) {
  const Eigen::VectorXd ll = k.joint_loglik(o);
  const double m = ll.maxCoeff();
  require(std::isfinite(m), ErrorKind::kNumerical, "observation has zero probability under the model");
  q = q.cwiseProduct((ll.array() - m).exp().matrix());
  const double s = q.sum();
  require(s > 0.0 && std::isfinite(s), ErrorKind::kNumerical, "observation has zero probability under the model");
  q /= s;
  return std::log(s) + m;
}

/// Add the counts of one filtered transition prev -> o under action a.
void learn_step(HmmLayer& layer, const HmmKernel& k, const Eigen::VectorXd& prev, int a,
                const Eigen::VectorXi& o) {
  const Eigen::VectorXd lik = (k.joint_loglik(o).array()).exp().matrix();
  Eigen::MatrixXd pair = k.dense_transition(a);
  pair = lik.asDiagonal() * pair * prev.asDiagonal();
  const double s = pair.sum();
  require(s > 0.0 && std::isfinite(s), ErrorKind::kNumerical, "degenerate transition posterior");
  pair /= s;

  const JointSpace factors(k.factor_sizes());
  DiscreteTrajectory traj;
  const int nf = factors.digits();
  traj.factor_marginals.resize(nf);
  traj.factor_pairwise.resize(nf);
  for (int f = 0; f < nf; ++f) {
    traj.factor_marginals[f] = Eigen::MatrixXd::Zero(factors.radix(f), 2);
    traj.factor_pairwise[f] = {Eigen::MatrixXd(), Eigen::MatrixXd::Zero(factors.radix(f), factors.radix(f))};
  }
  const int cols = layer.obs_column_space().size();
  traj.obs_marginals = Eigen::MatrixXd::Zero(cols, 2);
  for (int zn = 0; zn < pair.rows(); ++zn)
    for (int zp = 0; zp < pair.cols(); ++zp) {
      const double w = pair(zn, zp);
      if (w == 0.0) continue;
      for (int f = 0; f < nf; ++f) {
        traj.factor_pairwise[f][1](factors.digit(zn, f), factors.digit(zp, f)) += w;
        traj.factor_marginals[f](factors.digit(zp, f), 0) += w;
        traj.factor_marginals[f](factors.digit(zn, f), 1) += w;
      }
      traj.obs_marginals(k.obs_column_of_joint(zn), 1) += w;
    }
  // the factor pairwise entry 0 is never read for a two-step sequence
  for (int f = 0; f < nf; ++f) traj.factor_pairwise[f][0] = traj.factor_pairwise[f][1];
  DiscreteSequence seq;
  seq.obs = Eigen::MatrixXi::Constant(2, layer.num_modalities(), -1);
  seq.obs.row(1) = o.transpose();
  seq.actions = {a};
  accumulate_counts(layer, traj, seq, false);
}

}  // namespace

ActResult act_loop(Env& env, const HmmLayer& model, const Preferences& prefs,
                   const PlannerConfig& cfg, int episodes) {
  cfg.validate();
  require(episodes >= 1, ErrorKind::kConfig, "act_loop needs >= 1 episode");
  require(model.is_controllable(), ErrorKind::kConfig, "act_loop needs a controllable model");
  require(env.spec().num_actions == model.shape.num_actions, ErrorKind::kConfig,
          "environment and model action spaces differ");
  require(env.spec().num_obs == model.shape.num_obs, ErrorKind::kConfig,
          "environment and model observation spaces differ");
  ActResult out;
  out.model = model;
  std::vector<std::vector<int>> policies;
  if (cfg.horizon > 0) policies = enumerate_policies(model.shape.num_actions, cfg.horizon, cfg.policy_cap);
  Rng fallback = Rng::stream(cfg.seed, "planning:fallback");
  std::uint64_t step_counter = 0;

  for (int e = 0; e < episodes; ++e) {
    EpisodeLog log;
    const auto t_reset = Clock::now();
    HmmKernel kernel(out.model, ParamMode::kMean);
    const StepRecord first = env.reset();
    Eigen::VectorXd q = kernel.initial_joint();
    StepLog s0;
    s0.obs = first.obs;
    s0.log_evidence = condition(kernel, q, first.obs);
    s0.belief = q;
    s0.total_us = micros_since(t_reset);
    log.steps.push_back(s0);

    while (!env.done()) {
      const auto t0 = Clock::now();
      StepLog s;
      int action = 0;
      if (cfg.horizon == 0) {
        action = fallback.uniform_int(model.shape.num_actions);
        s.fallback = true;
      } else {
        PolicyEvaluation ev;
        if (cfg.num_rollouts > 0) {
          ModelGraph g = ModelGraph::single(out.model);
          PlanBelief b;
          b.discrete = q;
          ev = evaluate_policies_rollout(g, b, policies, prefs, cfg.num_rollouts,
                                         cfg.seed ^ (0x9e3779b97f4a7c15ULL * ++step_counter), cfg);
        } else {
          ev = evaluate_policies_discrete(out.model, q, policies, prefs, cfg);
        }
        action = ev.scores[ev.chosen].actions[0];
        s.efe = ev.scores[ev.chosen].efe;
      }
      s.plan_us = micros_since(t0);

      const StepRecord rec = env.step(action);
      const auto t1 = Clock::now();
      const Eigen::VectorXd prev = q;
      q = kernel.propagate(q, action);
      q /= q.sum();
      s.log_evidence = condition(kernel, q, rec.obs);
      if (cfg.learn) {
        learn_step(out.model, kernel, prev, action, rec.obs);
        kernel = HmmKernel(out.model, ParamMode::kMean);
      }
      s.update_us = micros_since(t1);
      s.t = rec.t;
      s.obs = rec.obs;
      s.action = action;
      s.reward = rec.reward;
      s.belief = q;
      s.total_us = micros_since(t0);
      log.total_reward += rec.reward;
      log.reached_terminal = rec.terminal;
      log.steps.push_back(std::move(s));
    }
    out.episodes.push_back(std::move(log));
  }
  return out;
}

ActResult act_loop(Env& env, const ModelGraph& graph, const Preferences& prefs,
                   const PlannerConfig& cfg, int episodes) {
  return act_loop(env, single_discrete(graph), prefs, cfg, episodes);
}

std::string serialize_step_log(const StepLog& s) {
  nlohmann::ordered_json j;
  j["t"] = s.t;
  j["obs"] = std::vector<int>(s.obs.data(), s.obs.data() + s.obs.size());
  j["action"] = s.action;
  j["reward"] = s.reward;
  j["log_evidence"] = s.log_evidence;
  j["efe"] = s.efe;
  j["fallback"] = s.fallback;
  return j.dump();
}

std::string serialize_step_timing(const StepLog& s) {
  nlohmann::ordered_json j;
  j["t"] = s.t;
  j["plan_us"] = s.plan_us;
  j["update_us"] = s.update_us;
  j["total_us"] = s.total_us;
  return j.dump();
}

}  // namespace wmb

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "planning_oracles.hpp"
#include "random_cases.hpp"
#include "wmb/envs.hpp"
#include "wmb/error.hpp"
#include "wmb/planning.hpp"

using namespace wmb;

using cases::random_belief;
using cases::random_pomdp;
using cases::random_prefs;
using cases::randomize_counts;

TEST_CASE("policy enumeration") {
  const auto p = enumerate_policies(3, 2);
  REQUIRE(p.size() == 9);
  CHECK(p[0] == std::vector<int>{0, 0});
  CHECK(p[1] == std::vector<int>{0, 1});
  CHECK(p[8] == std::vector<int>{2, 2});
  CHECK_THROWS_AS(enumerate_policies(5, 5), Error);
  CHECK(enumerate_policies(5, 4).size() == 625);
}

TEST_CASE("exact evaluation equals branch enumeration") {
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const HmmLayer l = random_pomdp(rng);
    const int n = l.latent_space().size();
    const Eigen::VectorXd b = random_belief(n, rng);
    const Preferences prefs = random_prefs(l, rng);
    PlannerConfig cfg;
    cfg.horizon = 1 + rng.uniform_int(3);
    cfg.info_gain_weight = rng.uniform() * 2.0;
    const auto policies = enumerate_policies(l.shape.num_actions, cfg.horizon);
    const PolicyEvaluation ev = evaluate_policies_discrete(l, b, policies, prefs, cfg);
    for (std::size_t i = 0; i < policies.size(); ++i) {
      const oracle::BranchTerms o = oracle::branch_enumeration(l, b, policies[i], prefs, true);
      const PolicyScore& s = ev.scores[i];
      worst = std::max({worst, std::abs(s.preference - o.preference), std::abs(s.state_info_gain - o.state_ig),
                        std::abs(s.param_info_gain - o.param_ig)});
      CHECK(s.state_info_gain >= 0.0);
      CHECK(s.param_info_gain >= 0.0);
      CHECK(s.efe == doctest::Approx(s.preference - cfg.info_gain_weight * s.info_gain()));
    }
    for (const auto& s : ev.scores) CHECK(ev.scores[ev.chosen].efe <= s.efe);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("trivial and small decision problems") {
  SUBCASE("single policy") {
    Rng rng(1);
    const HmmLayer l = random_pomdp(rng);
    PlannerConfig cfg;
    const PolicyEvaluation ev =
        evaluate_policies_discrete(l, random_belief(l.latent_space().size(), rng), {{0}}, {}, cfg);
    CHECK(ev.chosen == 0);
    CHECK(ev.horizon == 1);
  }
  SUBCASE("fully observed two-state MDP") {
    // action 0 keeps the state, action 1 flips it with probability 0.9
    HmmShape s;
    s.order_states = {{2}};
    s.controllable = {{true}};
    s.num_actions = 2;
    s.num_obs = {2};
    HmmLayer l = HmmLayer::make(s);
    Eigen::MatrixXd t(2, 4);
    t << 1, 0, 0.1, 0.9, 0, 1, 0.9, 0.1;
    l.set_transition(0, 0, t);
    l.set_observation(0, Eigen::Matrix2d::Identity());
    Preferences prefs;
    prefs.log_pref = {Eigen::Vector2d(0.0, 1.0)};  // reward 1 in state 1
    PlannerConfig cfg;
    cfg.info_gain_weight = 0.0;
    for (double p0 : {0.9, 0.2, 0.6, 0.4}) {
      const Eigen::Vector2d b(p0, 1 - p0);
      // hand enumeration of the two branches
      const double stay = b[1];
      const double flip = b[0] * 0.9 + b[1] * 0.1;
      const PolicyEvaluation ev = evaluate_policies_discrete(l, b, {{0}, {1}}, prefs, cfg);
      CHECK(ev.chosen == (flip > stay ? 1 : 0));
      CHECK(-ev.scores[0].preference == doctest::Approx(stay));
      CHECK(-ev.scores[1].preference == doctest::Approx(flip));
    }
  }
  SUBCASE("uncontrollable model") {
    HmmShape s;
    s.order_states = {{2}};
    s.num_obs = {2};
    const HmmLayer l = HmmLayer::make(s);
    CHECK_THROWS_AS(evaluate_policies_discrete(l, Eigen::Vector2d(0.5, 0.5), {{0}}, {}, PlannerConfig{}), Error);
  }
}

TEST_CASE("tmaze information seeking") {
  const TmazeParams p;
  const HmmLayer m = tmaze_model(p);
  Preferences prefs;
  prefs.log_pref = {Eigen::VectorXd(), Eigen::Vector3d(0.0, 1.0, -0.6), Eigen::VectorXd()};
  PlannerConfig cfg;
  cfg.horizon = 2;
  cfg.parameter_info_gain = false;
  const auto policies = enumerate_policies(4, 2);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(8);
  b[0] = b[4] = 0.5;  // center, context unknown
  cfg.info_gain_weight = 0.0;
  const PolicyEvaluation greedy = evaluate_policies_discrete(m, b, policies, prefs, cfg);
  cfg.info_gain_weight = 1.0;
  const PolicyEvaluation curious = evaluate_policies_discrete(m, b, policies, prefs, cfg);
  const int g0 = greedy.scores[greedy.chosen].actions[0];
  CHECK((g0 == 1 || g0 == 2));
  CHECK(curious.scores[curious.chosen].actions[0] == 3);
}

TEST_CASE("planning properties") {
  Rng rng(77);
  for (int c = 0; c < 30; ++c) {
    const HmmLayer l = random_pomdp(rng);
    const Eigen::VectorXd b = random_belief(l.latent_space().size(), rng);
    Preferences prefs = random_prefs(l, rng);
    PlannerConfig cfg;
    cfg.horizon = 2;
    cfg.info_gain_weight = 0.7;
    const auto policies = enumerate_policies(l.shape.num_actions, 2);
    const PolicyEvaluation base = evaluate_policies_discrete(l, b, policies, prefs, cfg);
    // joint positive scaling of preferences and weight
    const double k = 3.5;
    Preferences scaled = prefs;
    for (auto& v : scaled.log_pref) v *= k;
    PlannerConfig cs = cfg;
    cs.info_gain_weight *= k;
    const PolicyEvaluation sc = evaluate_policies_discrete(l, b, policies, scaled, cs);
    CHECK(sc.chosen == base.chosen);
    for (std::size_t i = 0; i < policies.size(); ++i)
      CHECK(sc.scores[i].preference == doctest::Approx(k * base.scores[i].preference));
  }
  SUBCASE("deterministic observations and zero weight pick the preference argmax") {
    HmmShape s;
    s.order_states = {{3}};
    s.controllable = {{true}};
    s.num_actions = 3;
    s.num_obs = {3};
    HmmLayer l = HmmLayer::make(s);
    Rng r(5);
    for (auto& t : l.trans[0]) randomize_counts(t, r);
    l.set_observation(0, Eigen::Matrix3d::Identity());
    Preferences prefs;
    prefs.log_pref = {Eigen::Vector3d(0.3, -1.0, 0.9)};
    PlannerConfig cfg;
    cfg.horizon = 2;
    cfg.info_gain_weight = 0.0;
    const auto policies = enumerate_policies(3, 2);
    const PolicyEvaluation ev = evaluate_policies_discrete(l, Eigen::Vector3d(1, 0, 0), policies, prefs, cfg);
    int best = 0;
    for (std::size_t i = 1; i < policies.size(); ++i)
      if (ev.scores[i].preference < ev.scores[best].preference) best = static_cast<int>(i);
    CHECK(ev.chosen == best);
  }
  SUBCASE("parallel evaluation is identical") {
    const HmmLayer l = random_pomdp(rng);
    const Eigen::VectorXd b = random_belief(l.latent_space().size(), rng);
    PlannerConfig cfg;
    cfg.horizon = 3;
    const auto policies = enumerate_policies(l.shape.num_actions, 3);
    const PolicyEvaluation a = evaluate_policies_discrete(l, b, policies, random_prefs(l, rng), cfg);
    cfg.jobs = 4;
    const PolicyEvaluation c = evaluate_policies_discrete(l, b, policies, Preferences{}, cfg);
    cfg.jobs = 1;
    const PolicyEvaluation d = evaluate_policies_discrete(l, b, policies, Preferences{}, cfg);
    for (std::size_t i = 0; i < policies.size(); ++i) CHECK(c.scores[i].efe == d.scores[i].efe);
    CHECK(a.scores.size() == policies.size());
  }
}

TEST_CASE("rollout evaluation") {
  SUBCASE("deterministic model equals exact") {
    const GridParams gp;
    const HmmLayer l = gridworld_model(gp);
    Preferences prefs;
    Eigen::VectorXd cell(25);
    for (int c = 0; c < 25; ++c) cell[c] = -grid_shortest_path(gp, c, gp.goal);
    prefs.log_pref = {cell, Eigen::Vector2d(0.0, 2.0)};
    PlannerConfig cfg;
    cfg.parameter_info_gain = false;
    const auto policies = enumerate_policies(5, 2);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(25);
    b[7] = 1.0;
    const PolicyEvaluation exact = evaluate_policies_discrete(l, b, policies, prefs, cfg);
    PlanBelief pb;
    pb.discrete = b;
    for (int n : {1, 7}) {
      const PolicyEvaluation ro = evaluate_policies_rollout(ModelGraph::single(l), pb, policies, prefs, n, 3, cfg);
      CHECK(ro.chosen == exact.chosen);
      for (std::size_t i = 0; i < policies.size(); ++i) {
        CHECK(ro.scores[i].efe == doctest::Approx(exact.scores[i].efe).epsilon(1e-9));
        CHECK(std::abs(ro.scores[i].state_info_gain) < 1e-6);
      }
    }
  }
  SUBCASE("stochastic model converges to exact") {
    Rng rng(99);
    const HmmLayer l = random_pomdp(rng);
    const Eigen::VectorXd b = random_belief(l.latent_space().size(), rng);
    const Preferences prefs = random_prefs(l, rng);
    PlannerConfig cfg;
    cfg.horizon = 2;
    const auto policies = enumerate_policies(l.shape.num_actions, 2);
    const PolicyEvaluation exact = evaluate_policies_discrete(l, b, policies, prefs, cfg);
    PlanBelief pb;
    pb.discrete = b;
    const ModelGraph g = ModelGraph::single(l);
    const PolicyEvaluation big = evaluate_policies_rollout(g, pb, policies, prefs, 10000, 1, cfg);
    for (std::size_t i = 0; i < policies.size(); ++i)
      CHECK(std::abs(big.scores[i].efe - exact.scores[i].efe) <= 3.0 * big.scores[i].std_error);
    // single-rollout estimates average out to the same value
    double sum = 0.0, sq = 0.0;
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
      const double v = evaluate_policies_rollout(g, pb, {policies[0]}, prefs, 1, 1000 + r, cfg).scores[0].efe;
      sum += v;
      sq += v * v;
    }
    const double mean = sum / reps, se = std::sqrt((sq / reps - mean * mean) / reps);
    CHECK(std::abs(mean - exact.scores[0].efe) <= 3.0 * se);
    CHECK(std::isinf(evaluate_policies_rollout(g, pb, {policies[0]}, prefs, 1, 0, cfg).scores[0].std_error));
  }
  SUBCASE("dominated policy never chosen") {
    // action 1 always leads to the rewarded state, action 0 to a random one
    HmmShape s;
    s.order_states = {{3}};
    s.controllable = {{true}};
    s.num_actions = 2;
    s.num_obs = {3};
    HmmLayer l = HmmLayer::make(s);
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(3, 6);
    for (int p = 0; p < 3; ++p) {
      t.col(p) << 0.5, 0.5, 0.0;
      t.col(3 + p) << 0.0, 0.0, 1.0;
    }
    l.set_transition(0, 0, t);
    Eigen::MatrixXd a(3, 3);
    a << 0.7, 0.6, 0.0, 0.3, 0.4, 0.0, 0.0, 0.0, 1.0;
    l.set_observation(0, a);
    Preferences prefs;
    prefs.log_pref = {Eigen::Vector3d(0.0, 1.0, 2.0)};
    PlannerConfig cfg;
    cfg.info_gain_weight = 0.0;
    PlanBelief pb;
    pb.discrete = Eigen::Vector3d(1, 0, 0);
    int wrong = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
      for (int n : {1, 3, 20}) {
        const auto ev = evaluate_policies_rollout(ModelGraph::single(l), pb, {{0}, {1}}, prefs, n, seed, cfg);
        wrong += ev.chosen == 0;
      }
    CHECK(wrong == 0);
  }
  SUBCASE("continuous layer moves toward the target") {
    SldsLayer l = SldsLayer::make(1, 1, 1, 1);
    l.control[0] = Eigen::MatrixXd::Ones(1, 1);
    l.noise[0] = 0.01 * Eigen::MatrixXd::Identity(1, 1);
    l.obs_noise = 0.01 * Eigen::MatrixXd::Identity(1, 1);
    PlannerConfig cfg;
    cfg.controls = (Eigen::MatrixXd(1, 3) << -1.0, 0.0, 1.0).finished();
    Preferences prefs;
    prefs.target = Eigen::VectorXd::Constant(1, 2.0);
    prefs.precision = Eigen::MatrixXd::Identity(1, 1);
    PlanBelief pb;
    pb.modes = Eigen::VectorXd::Ones(1);
    pb.state = GaussianBelief(Eigen::VectorXd::Zero(1), 0.01 * Eigen::MatrixXd::Identity(1, 1));
    const auto ev =
        evaluate_policies_rollout(ModelGraph::single(l), pb, enumerate_policies(3, 2), prefs, 50, 4, cfg);
    CHECK(ev.scores[ev.chosen].actions == std::vector<int>{2, 2});
    for (const auto& s : ev.scores) CHECK(s.state_info_gain > 0.0);
    Preferences bad = prefs;
    bad.precision = -Eigen::MatrixXd::Identity(1, 1);
    CHECK_THROWS_AS(evaluate_policies_rollout(ModelGraph::single(l), pb, {{0}}, bad, 5, 0, cfg), Error);
  }
}

TEST_CASE("closed loop on the gridworld") {
  const GridParams gp;
  const HmmLayer model = gridworld_model(gp);
  Preferences prefs;
  Eigen::VectorXd cell(25);
  for (int c = 0; c < 25; ++c) cell[c] = -grid_shortest_path(gp, c, gp.goal);
  prefs.log_pref = {cell, Eigen::Vector2d(0.0, 2.0)};
  PlannerConfig cfg;
  cfg.horizon = 2;
  cfg.parameter_info_gain = false;
  int success = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto env = make_gridworld(seed, gp);
    const ActResult r = act_loop(*env, model, prefs, cfg, 1);
    const auto& steps = r.episodes[0].steps;
    const int start = steps[0].obs[0];
    const int used = static_cast<int>(steps.size()) - 1;
    success += r.episodes[0].reached_terminal && steps.back().obs[0] == gp.goal &&
               used <= 2 * grid_shortest_path(gp, start, gp.goal);
  }
  CHECK(success >= 95);

  SUBCASE("zero horizon falls back to random actions") {
    PlannerConfig z = cfg;
    z.horizon = 0;
    auto env = make_gridworld(1, gp);
    const ActResult r = act_loop(*env, model, prefs, z, 2);
    for (const auto& e : r.episodes)
      for (std::size_t i = 1; i < e.steps.size(); ++i) CHECK(e.steps[i].fallback);
  }
  SUBCASE("replayable logs") {
    auto e1 = make_gridworld(3, gp);
    auto e2 = make_gridworld(3, gp);
    PlannerConfig l = cfg;
    l.learn = true;
    l.parameter_info_gain = true;
    const ActResult a = act_loop(*e1, model, prefs, l, 3);
    const ActResult b = act_loop(*e2, model, prefs, l, 3);
    std::string la, lb;
    for (const auto& e : a.episodes)
      for (const auto& s : e.steps) la += serialize_step_log(s) + "\n";
    for (const auto& e : b.episodes)
      for (const auto& s : e.steps) lb += serialize_step_log(s) + "\n";
    CHECK(la == lb);
    CHECK(a.model.total_counts() > model.total_counts());
  }
  SUBCASE("space mismatch") {
    auto env = make_tmaze(0);
    CHECK_THROWS_AS(act_loop(*env, model, prefs, cfg, 1), Error);
  }
}

TEST_CASE("online learning on the mini arcade improves on random play") {
  const ArcadeParams ap;
  const HmmLayer model = mini_arcade_model(ap, true, true);
  Preferences prefs;
  prefs.log_pref = {Eigen::VectorXd(), Eigen::VectorXd(), Eigen::VectorXd(), Eigen::Vector3d(0.0, 2.0, -2.0)};
  PlannerConfig cfg;
  cfg.horizon = 3;
  cfg.learn = true;
  double learned = 0.0, random = 0.0;
  const int seeds = 5, episodes = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    auto env = make_mini_arcade(static_cast<std::uint64_t>(seed), ap);
    const ActResult r = act_loop(*env, model, prefs, cfg, episodes);
    for (int e = episodes - 10; e < episodes; ++e) learned += r.episodes[e].total_reward;
    PlannerConfig rnd = cfg;
    rnd.horizon = 0;
    auto env2 = make_mini_arcade(static_cast<std::uint64_t>(seed), ap);
    const ActResult q = act_loop(*env2, model, prefs, rnd, episodes);
    for (int e = episodes - 10; e < episodes; ++e) random += q.episodes[e].total_reward;
  }
  CHECK(learned > random);
  CHECK(learned / (seeds * 10) > 0.5 * ap.balls);
}

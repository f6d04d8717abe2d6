#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "random_cases.hpp"
#include "wmb/envs.hpp"
#include "wmb/error.hpp"

using namespace wmb;

namespace {

void check_golden(const std::string& name, const std::string& log) {
  const std::string path = std::string(WMB_FIXTURE_DIR) + "/golden_" + name + ".jsonl";
  if (std::getenv("WMB_REGEN_FIXTURES")) {
    std::ofstream(path) << log;
    return;
  }
  std::ifstream in(path);
  REQUIRE_MESSAGE(in.good(), "missing fixture " << path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == log);
}

/// Independent rules of the catch game for the do-nothing policy.
double arcade_reference_return(const ArcadeParams& p, std::uint64_t seed, int episode) {
  Rng rng = Rng::stream(seed, "envs:mini_arcade:" + std::to_string(episode));
  const int paddle = p.width / 2;
  double ret = 0.0;
  for (int b = 0; b < p.balls; ++b) {
    // one column draw per ball; the paddle never moves
    const int column = rng.uniform_int(p.width);
    ret += column == paddle ? p.catch_reward : p.miss_reward;
  }
  return ret;
}

}  // namespace

TEST_CASE("env contract") {
  auto env = make_gridworld(3);
  CHECK_THROWS_AS(env->step(0), Error);  // before reset
  env->reset();
  CHECK_THROWS_AS(env->step(5), Error);
  CHECK_THROWS_AS(env->step(-1), Error);
  int last = 0;
  while (!env->done()) {
    const StepRecord r = env->step(0);
    CHECK(r.t == last + 1);
    last = r.t;
  }
  CHECK(last == env->spec().horizon);
}

TEST_CASE("gridworld") {
  GridParams p;
  auto env = make_gridworld(0, p);
  SUBCASE("walls") {
    // find an episode starting on the top row, then walk into the boundary
    for (int e = 0; e < 200; ++e) {
      const StepRecord s = env->reset();
      if (s.obs[0] / p.width != 0) continue;
      const StepRecord r = env->step(1);
      CHECK(r.obs[0] == s.obs[0]);
      CHECK(r.reward == 0.0);
      break;
    }
    GridParams w = p;
    w.walls = {1};
    auto walled = make_gridworld(0, w);
    HmmLayer model = gridworld_model(w);
    const Eigen::MatrixXd t = model.trans[0][0].mean();
    CHECK(t(0, model.trans_config(0, 0, 0, 0, 4)) == doctest::Approx(1.0));
  }
  SUBCASE("shortest paths") {
    CHECK(grid_shortest_path(p, 0, 24) == 8);
    GridParams w = p;
    w.walls = {1, 6, 11, 16};
    CHECK(grid_shortest_path(w, 0, 2) == 10);
    w.walls.push_back(21);
    CHECK(grid_shortest_path(w, 0, 2) == -1);
  }
  SUBCASE("model agrees with the env") {
    HmmLayer model = gridworld_model(p);
    Rng pick(1);
    for (int e = 0; e < 20; ++e) {
      StepRecord r = env->reset();
      int cell = r.obs[0];
      while (!env->done()) {
        const int a = pick.uniform_int(5);
        r = env->step(a);
        const Eigen::MatrixXd t = model.trans[0][0].mean();
        int predicted = 0;
        t.col(model.trans_config(0, 0, cell, 0, a)).maxCoeff(&predicted);
        CHECK(predicted == r.obs[0]);
        CHECK(r.obs[1] == (r.obs[0] == p.goal ? 1 : 0));
        cell = r.obs[0];
      }
    }
  }
  CHECK_THROWS_AS(make_gridworld(0, GridParams{5, 5, 25, {}, 10}), Error);
}

TEST_CASE("tmaze") {
  TmazeParams p;
  p.reward_prob = 1.0;
  auto env = make_tmaze(7, p);
  for (int e = 0; e < 50; ++e) {
    env->reset();
    const StepRecord cue = env->step(3);
    REQUIRE(cue.obs[2] > 0);
    const StepRecord arm = env->step(cue.obs[2] == 1 ? 1 : 2);
    CHECK(arm.obs[1] == 1);
    CHECK(arm.reward == 1.0);
    CHECK(arm.terminal);
  }
  SUBCASE("arms are absorbing") {
    env->reset();
    CHECK(env->step(1).obs[0] == 1);
    TmazeParams longer = p;
    longer.horizon = 3;
    auto e2 = make_tmaze(7, longer);
    e2->reset();
    e2->step(2);
    CHECK(e2->step(3).obs[0] == 2);
  }
  SUBCASE("model emission matches the cue rule") {
    const HmmLayer m = tmaze_model(p);
    const JointSpace cols = m.obs_column_space();
    const Eigen::MatrixXd cue = m.obs[2].mean();
    for (int c = 0; c < cols.size(); ++c)
      if (cols.digit(c, 0) == 3) CHECK(cue(1 + cols.digit(c, 1), c) == doctest::Approx(1.0));
  }
}

TEST_CASE("mini arcade golden replay against independent rules") {
  ArcadeParams p;
  auto env = make_mini_arcade(11, p);
  double total = 0.0, reference = 0.0;
  for (int e = 0; e < 100; ++e) {
    env->reset();
    double ret = 0.0;
    int outcomes = 0;
    while (!env->done()) {
      const StepRecord r = env->step(1);
      ret += r.reward;
      if (r.obs[3] != 0) ++outcomes;
    }
    CHECK(outcomes == p.balls);
    total += ret;
    reference += arcade_reference_return(p, 11, e);
  }
  CHECK(total / 100 == doctest::Approx(reference / 100).epsilon(1e-15));
  SUBCASE("known model reproduces paddle motion") {
    const HmmLayer m = mini_arcade_model(p, false, false);
    const Eigen::MatrixXd pad = m.trans[1][0].mean();
    CHECK(pad(0, m.trans_config(1, 0, 0, 0, 0)) == doctest::Approx(1.0));
    CHECK(pad(2, m.trans_config(1, 0, 1, 0, 2)) == doctest::Approx(1.0));
  }
}

TEST_CASE("golden replay logs") {
  const cases::GoldenLogs logs = cases::golden_logs();
  auto g2 = make_gridworld(5);
  CHECK(cases::replay(*g2, 3, 1) == logs.gridworld);
  check_golden("gridworld", logs.gridworld);
  check_golden("tmaze", logs.tmaze);
  check_golden("mini_arcade", logs.mini_arcade);
  check_golden("bouncing_ball", logs.bouncing_ball);
}

TEST_CASE("bouncing ball") {
  SUBCASE("at rest on the floor") {
    BallParams p;
    p.height = 0.0;
    const BallTrajectory b = bouncing_ball(p, 50, 0);
    CHECK(b.states.col(0).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("first contact time") {
    for (double h : {1.0, 4.9, 19.62, 100.0, 0.3}) {
      BallParams p;
      p.dt = 1.0;
      p.height = h;
      const BallTrajectory b = bouncing_ball(p, 20, 0);
      const int expect = static_cast<int>(std::ceil(std::sqrt(2 * h / p.gravity)));
      int first = -1;
      for (int t = 0; t < 20 && first < 0; ++t)
        if (b.modes[t]) first = t;
      CHECK(first == expect);
    }
  }
  SUBCASE("energy never increases") {
    BallParams p;
    p.restitution = 0.8;
    p.height = 2.0;
    const BallTrajectory b = bouncing_ball(p, 300, 0);
    for (int t = 1; t < 300; ++t)
      CHECK(ball_energy(p, b.states.row(t).transpose()) <=
            ball_energy(p, b.states.row(t - 1).transpose()) + 1e-9);
    CHECK(ball_energy(p, b.states.row(299).transpose()) < ball_energy(p, b.states.row(0).transpose()));
  }
  SUBCASE("elastic bounces keep the apex") {
    BallParams p;
    const BallTrajectory b = bouncing_ball(p, 400, 0);
    for (int t = 0; t < 400; ++t)
      CHECK(ball_energy(p, b.states.row(t).transpose()) == doctest::Approx(p.gravity * p.height).epsilon(1e-9));
  }
  SUBCASE("invalid params") {
    BallParams p;
    p.restitution = 0.0;
    CHECK_THROWS_AS(bouncing_ball(p, 10, 0), Error);
    p.restitution = 1.0;
    p.gravity = -1.0;
    CHECK_THROWS_AS(bouncing_ball(p, 10, 0), Error);
  }
}

TEST_CASE("motif stream") {
  const Eigen::MatrixXi m0 = (Eigen::MatrixXi(4, 1) << 0, 1, 2, 3).finished();
  const Eigen::MatrixXi m1 = (Eigen::MatrixXi(4, 1) << 3, 2, 1, 0).finished();
  const Eigen::MatrixXi m2 = (Eigen::MatrixXi(4, 1) << 1, 1, 0, 0).finished();
  SUBCASE("single motif is periodic") {
    const MotifStream s = motif_stream({m0}, Eigen::MatrixXd::Ones(1, 1), 40, 0);
    for (int t = 0; t < 40; ++t) CHECK(s.channels[0][t] == t % 4);
  }
  SUBCASE("alternation") {
    Eigen::MatrixXd g(2, 2);
    g << 0, 1, 1, 0;
    const MotifStream s = motif_stream({m0, m1}, g, 40, 3);
    for (std::size_t w = 1; w < s.labels.size(); ++w) CHECK(s.labels[w] != s.labels[w - 1]);
  }
  SUBCASE("bigram frequencies") {
    Eigen::MatrixXd g(3, 3);
    g << 0.1, 0.6, 0.3, 0.5, 0.25, 0.25, 0.7, 0.2, 0.1;
    const MotifStream s = motif_stream({m0, m1, m2}, g, 10000 * 4, 9);
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(3, 3);
    for (std::size_t w = 1; w < s.labels.size(); ++w) counts(s.labels[w - 1], s.labels[w]) += 1;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(std::abs(counts(i, j) / counts.row(i).sum() - g(i, j)) < 0.02);
  }
  SUBCASE("unequal motif lengths") {
    const Eigen::MatrixXi shorter = (Eigen::MatrixXi(3, 1) << 0, 1, 2).finished();
    CHECK_THROWS_AS(motif_stream({m0, shorter}, Eigen::MatrixXd::Ones(2, 2), 10, 0), Error);
  }
}

TEST_CASE("sprite world") {
  SpriteWorldParams p;
  p.width = 6;
  p.height = 5;
  Sprite s;
  s.color = Eigen::Vector3d(1.0, 0.0, 0.0);
  p.sprites = {s};
  SUBCASE("static sprite") {
    const SpriteWorld w = sprite_world(p, 10, 1);
    for (int t = 1; t < 10; ++t) CHECK(w.frames.row(t) == w.frames.row(0));
  }
  SUBCASE("wrap-around") {
    p.sprites[0].velocity = Eigen::Vector2i(1, 0);
    const SpriteWorld w = sprite_world(p, 20, 2);
    const int x0 = w.positions(0, 0);
    for (int t = 0; t < 20; ++t) CHECK(w.positions(t, 0) == (x0 + t) % p.width);
  }
  SUBCASE("controlled sprite") {
    p.controlled = 0;
    const SpriteWorld w = sprite_world(p, 3, 2, {4, 2});
    CHECK(w.positions(1, 0) == (w.positions(0, 0) + 1) % p.width);
    CHECK(w.positions(2, 1) == (w.positions(1, 1) + 1) % p.height);
  }
  SUBCASE("no room") {
    SpriteWorldParams q;
    q.width = q.height = 3;
    Sprite big;
    big.color = Eigen::Vector3d(1, 1, 1);
    big.size = 2;
    q.sprites = {big, big};
    CHECK_THROWS_AS(sprite_world(q, 2, 0), Error);
  }
  SUBCASE("slot mixture finds two sprites") {
    SpriteWorldParams q;
    q.width = q.height = 8;
    Sprite a, b;
    a.color = Eigen::Vector3d(1.0, 0.0, 0.0);
    b.color = Eigen::Vector3d(0.0, 0.0, 1.0);
    a.size = b.size = 2;
    q.sprites = {a, b};
    const int d = 5;
    const NiwParams prior(Eigen::VectorXd::Zero(d), 1e-3, d + 2.0, 0.5 * Eigen::MatrixXd::Identity(d, d));
    int hits = 0;
    for (int seed = 0; seed < 100; ++seed) {
      const SpriteWorld w = sprite_world(q, 1, static_cast<std::uint64_t>(seed));
      const Mixture m = slot_mixture(q, w.frames.row(0).transpose(), prior, GrowthConfig{}, 5.0);
      hits += m.size() == 2;
    }
    CHECK(hits >= 95);
  }
}

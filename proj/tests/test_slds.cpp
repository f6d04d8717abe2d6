#include <cmath>

#include "doctest.h"
#include "slds_oracles.hpp"
#include "wmb/error.hpp"
#include "wmb/slds.hpp"

using namespace wmb;

namespace {

SldsLayer random_layer(int k, int d, int o, std::uint64_t seed) {
  Rng rng(seed);
  SldsLayer l = SldsLayer::make(k, d, o);
  for (int j = 0; j < k; ++j) {
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) l.dynamics[j](r, c) = (r == c ? 0.9 : 0.0) + 0.2 * (rng.uniform() - 0.5);
    for (int r = 0; r < d; ++r) l.bias[j][r] = rng.uniform() - 0.5;
    Eigen::MatrixXd g = Eigen::MatrixXd::Random(d, d) * 0.3;
    l.noise[j] = g * g.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
  }
  for (int r = 0; r < o; ++r)
    for (int c = 0; c < d; ++c) l.emission(r, c) = rng.uniform() - 0.3;
  l.obs_noise = 0.2 * Eigen::MatrixXd::Identity(o, o);
  l.state_init = GaussianBelief(Eigen::VectorXd::Constant(d, 0.5), 0.7 * Eigen::MatrixXd::Identity(d, d));
  l.reset_prior();
  return l;
}

SldsSequence seq_from(const SldsSample& s) {
  SldsSequence q;
  q.obs = s.obs;
  return q;
}

}  // namespace

TEST_CASE("simulate reductions") {
  SUBCASE("identity dynamics with vanishing noise keeps the state") {
    SldsLayer l = SldsLayer::make(1, 2, 2);
    l.noise[0] *= 1e-30;
    l.state_init.cov *= 1e-30;
    l.state_init.mean << 1.5, -2.0;
    const auto s = simulate(l, 20, Eigen::MatrixXd(), 4);
    for (int t = 0; t < 20; ++t) CHECK((s.states.row(t).transpose() - l.state_init.mean).norm() < 1e-12);
  }
  SUBCASE("pure control") {
    SldsLayer l = SldsLayer::make(1, 2, 2, 2);
    l.dynamics[0].setZero();
    l.control[0].setIdentity();
    l.noise[0] *= 1e-30;
    l.reset_prior();
    Eigen::MatrixXd u = Eigen::MatrixXd::Random(9, 2);
    const auto s = simulate(l, 10, u, 4);
    for (int t = 1; t < 10; ++t) CHECK((s.states.row(t) - u.row(t - 1)).norm() < 1e-12);
    CHECK_THROWS_AS(simulate(l, 10, Eigen::MatrixXd(), 4), Error);
  }
}

TEST_CASE("bouncing-ball layer matches a hand-coded simulation") {
  const double g = 0.5;
  SldsLayer l = SldsLayer::make(2, 2, 1);
  l.dynamics[0] << 1, 1, 0, 1;  // fall: x += v, v -= g
  l.bias[0] << 0, -g;
  l.dynamics[1] << 1, 0, 0, -0.9;  // bounce: v = -0.9 v
  l.bias[1] << 0, 0;
  l.noise[0] = l.noise[1] = 1e-4 * Eigen::Matrix2d::Identity();
  l.base_logits << 3, 3, -3, -3;
  l.recurrence << 0, 0, -40, 0;  // bounce favoured when x < 0
  l.emission << 1, 0;
  l.obs_noise << 1e-4;
  l.switch_init = CategoricalBelief::one_hot(2, 0);
  l.state_init = GaussianBelief(Eigen::Vector2d(5, 0), 1e-4 * Eigen::Matrix2d::Identity());
  l.reset_prior();
  const auto sim = simulate(l, 60, Eigen::MatrixXd(), 12);

  Rng rng = Rng::stream(12, "slds:simulate");
  int s = rng.categorical(Eigen::Vector2d(1, 0));
  Eigen::Vector2d x = rng.gaussian(Eigen::Vector2d(5, 0), 1e-4 * Eigen::Matrix2d::Identity());
  bool bounced = false;
  for (int t = 0; t < 60; ++t) {
    if (t > 0) {
      Eigen::Vector2d logit(3 + 0.0, -3 - 40 * x[0]);
      logit = (logit.array() - logit.maxCoeff()).exp();
      s = rng.categorical(logit);
      Eigen::Vector2d mean = s == 0 ? Eigen::Vector2d(x[0] + x[1], x[1] - g) : Eigen::Vector2d(x[0], -0.9 * x[1]);
      x = rng.gaussian(mean, 1e-4 * Eigen::Matrix2d::Identity());
    }
    const double y = rng.gaussian(Eigen::VectorXd::Constant(1, x[0]), Eigen::MatrixXd::Constant(1, 1, 1e-4))[0];
    CHECK(sim.modes[t] == s);
    CHECK(sim.states(t, 0) == x[0]);
    CHECK(sim.states(t, 1) == x[1]);
    CHECK(sim.obs(t, 0) == y);
    bounced |= s == 1;
  }
  CHECK(bounced);
}

TEST_CASE("recurrence logits") {
  SldsLayer l = SldsLayer::make(2, 2, 1);
  l.base_logits << 1, 2, 3, 4;
  CHECK(recurrence_logits(l, Eigen::Vector2d(5, -7)) == l.base_logits);
  l.recurrence << 0, 0, -10, 0;
  const Eigen::MatrixXd z = recurrence_logits(l, Eigen::Vector2d(-1, 0));
  // bounce row: 3 + 10 = 13 and 4 + 10 = 14; fall row unchanged
  CHECK(z(1, 0) == doctest::Approx(13.0));
  CHECK(z(1, 0) - z(0, 0) == doctest::Approx(12.0));
  CHECK_THROWS_AS(recurrence_logits(l, Eigen::Vector3d::Zero()), Error);
  // softmax invariance to per-column shifts
  Eigen::Vector2d a = z.col(0), b = z.col(0).array() + 7.5;
  a = (a.array() - a.maxCoeff()).exp();
  b = (b.array() - b.maxCoeff()).exp();
  CHECK((a / a.sum() - b / b.sum()).norm() < 1e-15);
}

TEST_CASE("kalman smoother matches a dense joint-Gaussian solve") {
  int cases = 0;
  for (int d = 1; d <= 2; ++d)
    for (int t_len = 1; t_len <= 8; ++t_len) {
      const SldsLayer l = random_layer(2, d, d, 10 * d + t_len);
      const auto sim = simulate(l, t_len, Eigen::MatrixXd(), t_len);
      std::vector<int> modes = sim.modes;
      const auto kf = kalman_smooth(l, seq_from(sim), modes);
      // model covariances carry the jitter floor
      const auto jit = [](const Eigen::MatrixXd& m) {
        return Eigen::MatrixXd(m + kCovJitter * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
      };
      oracle::DenseLgssm dense{l.state_init.mean, jit(l.state_init.cov), {}, {}, {}, l.emission, jit(l.obs_noise), sim.obs};
      dense.a.resize(t_len);
      dense.q.resize(t_len);
      dense.c.resize(t_len);
      for (int t = 1; t < t_len; ++t) {
        dense.a[t] = l.dynamics[modes[t]];
        dense.q[t] = jit(l.noise[modes[t]]);
        dense.c[t] = l.bias[modes[t]];
      }
      const auto ref = dense.solve();
      for (int t = 0; t < t_len; ++t) {
        CHECK((kf.smoothed[t].mean - ref.mean.segment(t * d, d)).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((kf.smoothed[t].cov - ref.cov.block(t * d, t * d, d, d)).cwiseAbs().maxCoeff() < 1e-8);
        if (t > 0)
          CHECK((kf.cross[t] - ref.cov.block(t * d, (t - 1) * d, d, d)).cwiseAbs().maxCoeff() < 1e-8);
        // smoothing never increases variance
        const Eigen::MatrixXd diff = kf.filtered[t].cov - kf.smoothed[t].cov;
        CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(diff).eigenvalues().minCoeff() >= -1e-9);
      }
      CHECK(kf.log_likelihood == doctest::Approx(ref.log_lik).epsilon(1e-9));
      ++cases;
    }
  CHECK(cases == 16);
}

TEST_CASE("kalman smoother reductions") {
  SUBCASE("near-noiseless emission reproduces observations") {
    SldsLayer l = random_layer(1, 2, 2, 3);
    l.emission.setIdentity();
    l.obs_noise = 1e-9 * Eigen::Matrix2d::Identity();
    const auto sim = simulate(l, 6, Eigen::MatrixXd(), 1);
    const auto kf = kalman_smooth(l, seq_from(sim), sim.modes);
    for (int t = 0; t < 6; ++t) CHECK((kf.smoothed[t].mean - sim.obs.row(t).transpose()).norm() < 1e-6);
  }
  SUBCASE("masked observations give prior propagation") {
    const SldsLayer l = random_layer(1, 2, 1, 8);
    SldsSequence s;
    s.obs = Eigen::MatrixXd::Constant(5, 1, NAN);
    const auto kf = kalman_smooth(l, s, std::vector<int>(5, 0));
    Eigen::VectorXd m = l.state_init.mean;
    // model covariances carry the jitter floor
    const Eigen::MatrixXd jitter = kCovJitter * Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd p = l.state_init.cov + jitter;
    for (int t = 0; t < 5; ++t) {
      if (t > 0) {
        m = l.dynamics[0] * m + l.bias[0];
        p = l.dynamics[0] * p * l.dynamics[0].transpose() + l.noise[0] + jitter;
      }
      CHECK((kf.smoothed[t].mean - m).norm() < 1e-10);
      CHECK((kf.smoothed[t].cov - p).norm() < 1e-10);
    }
    CHECK(kf.log_likelihood == 0.0);
  }
}

TEST_CASE("structured VI with one mode is the Kalman smoother") {
  const SldsLayer l = random_layer(1, 2, 1, 5);
  const auto sim = simulate(l, 30, Eigen::MatrixXd(), 2);
  const auto seq = seq_from(sim);
  const auto q = structured_vi(l, seq, 3);
  const auto kf = kalman_smooth(l, seq, std::vector<int>(30, 0));
  for (int t = 0; t < 30; ++t) {
    CHECK((q.means.col(t) - kf.smoothed[t].mean).norm() < 1e-9);
    CHECK((q.covs[t] - kf.smoothed[t].cov).norm() < 1e-9);
    CHECK(q.switch_marginals(0, t) == 1.0);
  }
  // the bound is tight: ELBO equals the exact log-likelihood
  CHECK(q.final_elbo() == doctest::Approx(kf.log_likelihood).epsilon(1e-9));
}

TEST_CASE("structured VI ELBO is non-decreasing") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SldsLayer l = random_layer(3, 2, 2, seed);
    l.recurrence = Eigen::MatrixXd::Random(3, 2) * 2.0;
    l.base_logits = Eigen::MatrixXd::Random(3, 3);
    const auto sim = simulate(l, 50, Eigen::MatrixXd(), seed);
    const auto q = structured_vi(l, seq_from(sim), 10);
    for (std::size_t i = 1; i < q.elbo.size(); ++i) CHECK(q.elbo[i] >= q.elbo[i - 1] - 1e-9);
  }
}

TEST_CASE("well-separated modes are identified") {
  SldsLayer l = SldsLayer::make(2, 1, 1);
  l.bias[0] << 1.0;
  l.bias[1] << -1.0;
  l.noise[0] << 1e-3;
  l.noise[1] << 1e-3;
  l.obs_noise << 1e-3;
  l.base_logits << 2, -2, -2, 2;
  l.reset_prior();
  SldsLayer gen = l;
  gen.switch_init = CategoricalBelief::one_hot(2, 0);
  gen.base_logits << 50, 50, -50, -50;  // always mode 0
  const auto sim = simulate(gen, 40, Eigen::MatrixXd(), 3);
  const auto q = structured_vi(l, seq_from(sim), 10);
  for (int t = 1; t < 40; ++t) CHECK(q.switch_marginals(0, t) > 0.99);
}

TEST_CASE("identical modes without recurrence leave the switch prior unchanged") {
  SldsLayer l = random_layer(2, 1, 1, 6);
  l.dynamics[1] = l.dynamics[0];
  l.bias[1] = l.bias[0];
  l.noise[1] = l.noise[0];
  l.base_logits << 1.0, -0.5, 0.2, 0.7;
  Eigen::Vector2d init(0.3, 0.7);
  l.switch_init = CategoricalBelief(init);
  l.reset_prior();
  const auto sim = simulate(l, 12, Eigen::MatrixXd(), 7);
  const auto q = structured_vi(l, seq_from(sim), 4);
  Eigen::VectorXd p = init;
  Eigen::MatrixXd tr = l.base_logits;
  for (int i = 0; i < 2; ++i) {
    tr.col(i) = (tr.col(i).array() - tr.col(i).maxCoeff()).exp();
    tr.col(i) /= tr.col(i).sum();
  }
  for (int t = 0; t < 12; ++t) {
    if (t > 0) p = tr * p;
    CHECK((q.switch_marginals.col(t) - p).norm() < 1e-9);
  }
}

TEST_CASE("vb_learn") {
  SUBCASE("recovers a scalar AR coefficient") {
    SldsLayer gen = SldsLayer::make(1, 1, 1);
    gen.dynamics[0] << 0.8;
    gen.noise[0] << 1.0;
    gen.obs_noise << 0.01;
    gen.reset_prior();
    const auto sim = simulate(gen, 10000, Eigen::MatrixXd(), 21);
    SldsLayer init = gen;
    init.dynamics[0] << 0.3;
    init.noise[0] << 0.5;
    init.reset_prior();
    SldsLearnOptions opts;
    opts.vi_iters = 1;
    const auto res = vb_learn(init, {seq_from(sim)}, 5, opts);
    // least-squares oracle on the true states
    double num = 0, den = 0;
    for (int t = 1; t < 10000; ++t) {
      num += sim.states(t, 0) * sim.states(t - 1, 0);
      den += sim.states(t - 1, 0) * sim.states(t - 1, 0);
    }
    CHECK(std::abs(num / den - 0.8) < 0.05);
    CHECK(std::abs(res.layer.dynamics[0](0, 0) - 0.8) < 0.05);
    CHECK(std::abs(res.layer.dynamics[0](0, 0) - num / den) < 0.02);
    for (std::size_t i = 1; i < res.elbo.size(); ++i) CHECK(res.elbo[i] >= res.elbo[i - 1] - 1e-6);
  }
  SUBCASE("zero sweeps") {
    const SldsLayer l = SldsLayer::make(1, 1, 1);
    SldsSequence s;
    s.obs = Eigen::MatrixXd::Zero(3, 1);
    CHECK_THROWS_AS(vb_learn(l, {s}, 0), Error);
  }
  SUBCASE("duplicated data equals doubled weights") {
    SldsLayer l = random_layer(2, 2, 2, 31);
    l.recurrence << 1.0, -0.5, -1.0, 0.5;
    const auto a = seq_from(simulate(l, 40, Eigen::MatrixXd(), 1));
    const auto b = seq_from(simulate(l, 40, Eigen::MatrixXd(), 2));
    const auto dup = vb_learn(l, {a, a, b, b}, 4);
    const auto wgt = vb_learn(l, {a, b}, 4, {}, {2.0, 2.0});
    for (int k = 0; k < 2; ++k) {
      CHECK((dup.layer.regression(k) - wgt.layer.regression(k)).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((dup.layer.noise[k] - wgt.layer.noise[k]).cwiseAbs().maxCoeff() < 1e-6);
    }
    CHECK((dup.layer.recurrence - wgt.layer.recurrence).cwiseAbs().maxCoeff() < 1e-6);
    for (std::size_t i = 1; i < dup.elbo.size(); ++i) CHECK(dup.elbo[i] >= dup.elbo[i - 1] - 1e-6);
  }
}

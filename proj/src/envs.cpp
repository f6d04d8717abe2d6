#include "wmb/envs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

#include "json.hpp"

#include "wmb/error.hpp"

namespace wmb {

// ---------------------------------------------------------------------------
// Env contract

void EnvSpec::validate() const {
  require(!name.empty(), ErrorKind::kConfig, "environment needs a name");
  require(!num_obs.empty(), ErrorKind::kConfig, "environment needs >= 1 observation modality");
  for (int n : num_obs) require(n >= 1, ErrorKind::kConfig, "observation alphabet must be >= 1");
  require(num_actions >= 1, ErrorKind::kConfig, "environment needs >= 1 action");
  require(horizon >= 1, ErrorKind::kConfig, "environment horizon must be >= 1");
}

Env::Env(EnvSpec spec) : spec_(std::move(spec)), rng_(0) { spec_.validate(); }

StepRecord Env::reset() {
  ++episode_;
  rng_ = Rng::stream(spec_.seed, "envs:" + spec_.name + ":" + std::to_string(episode_));
  t_ = 0;
  done_ = false;
  StepRecord r;
  r.obs = on_reset(rng_);
  return r;
}

StepRecord Env::step(int action) {
  require(!done_, ErrorKind::kPrecondition, spec_.name + ": step after the episode ended");
  require(action >= 0 && action < spec_.num_actions, ErrorKind::kConfig,
          spec_.name + ": invalid action index " + std::to_string(action));
  StepRecord r;
  r.t = ++t_;
  r.action = action;
  r.obs = on_step(action, rng_, r.reward, r.terminal);
  if (t_ >= spec_.horizon) r.terminal = true;
  done_ = r.terminal;
  return r;
}

std::string serialize_step(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["t"] = r.t;
  j["obs"] = std::vector<int>(r.obs.data(), r.obs.data() + r.obs.size());
  j["action"] = r.action;
  j["reward"] = r.reward;
  j["terminal"] = r.terminal;
  return j.dump();
}

namespace {

Eigen::VectorXi vec(std::initializer_list<int> v) {
  Eigen::VectorXi out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (int x : v) out[i++] = x;
  return out;
}

// ---------------------------------------------------------------------------
// T-maze

enum TmazeLoc { kCenter = 0, kLeft = 1, kRight = 2, kCue = 3 };

class Tmaze final : public Env {
 public:
  Tmaze(std::uint64_t seed, const TmazeParams& p)
      : Env(EnvSpec{"tmaze", {4, 3, 3}, 4, true, seed, p.horizon}), p_(p) {}

 protected:
  Eigen::VectorXi on_reset(Rng& rng) override {
    context_ = rng.uniform_int(2);
    loc_ = kCenter;
    return vec({loc_, 0, 0});
  }

  Eigen::VectorXi on_step(int action, Rng& rng, double& reward, bool&) override {
    if (loc_ != kLeft && loc_ != kRight) loc_ = action;
    int outcome = 0, cue = 0;
    if (loc_ == kLeft || loc_ == kRight) {
      const bool correct = (loc_ == kLeft) == (context_ == 0);
      const bool win = rng.uniform() < (correct ? p_.reward_prob : 1.0 - p_.reward_prob);
      outcome = win ? 1 : 2;
      reward = win ? 1.0 : -1.0;
    } else if (loc_ == kCue) {
      cue = 1 + context_;
    }
    return vec({loc_, outcome, cue});
  }

 private:
  TmazeParams p_;
  int context_ = 0;
  int loc_ = kCenter;
};

// ---------------------------------------------------------------------------
// Gridworld

int grid_move(const GridParams& p, int cell, int action) {
  int x = cell % p.width, y = cell / p.width;
  switch (action) {
    case 1: --y; break;
    case 2: ++y; break;
    case 3: --x; break;
    case 4: ++x; break;
    default: break;
  }
  if (x < 0 || y < 0 || x >= p.width || y >= p.height) return cell;
  const int next = y * p.width + x;
  if (std::find(p.walls.begin(), p.walls.end(), next) != p.walls.end()) return cell;
  return next;
}

void validate_grid(const GridParams& p) {
  require(p.width >= 1 && p.height >= 1, ErrorKind::kConfig, "gridworld needs positive dimensions");
  require(p.goal >= 0 && p.goal < p.width * p.height, ErrorKind::kConfig, "gridworld goal outside grid");
  for (int w : p.walls)
    require(w >= 0 && w < p.width * p.height && w != p.goal, ErrorKind::kConfig,
            "gridworld wall outside grid or on the goal");
  require(p.width * p.height - static_cast<int>(p.walls.size()) >= 2, ErrorKind::kConfig,
          "gridworld needs a free start cell");
}

class Gridworld final : public Env {
 public:
  Gridworld(std::uint64_t seed, const GridParams& p)
      : Env(EnvSpec{"gridworld", {p.width * p.height, 2}, 5, true, seed, p.horizon}), p_(p) {}

 protected:
  Eigen::VectorXi on_reset(Rng& rng) override {
    std::vector<int> free;
    for (int c = 0; c < p_.width * p_.height; ++c)
      if (c != p_.goal && std::find(p_.walls.begin(), p_.walls.end(), c) == p_.walls.end())
        free.push_back(c);
    pos_ = free[rng.uniform_int(static_cast<int>(free.size()))];
    return vec({pos_, 0});
  }

  Eigen::VectorXi on_step(int action, Rng&, double& reward, bool& terminal) override {
    pos_ = grid_move(p_, pos_, action);
    const bool at_goal = pos_ == p_.goal;
    reward = at_goal ? 1.0 : 0.0;
    terminal = at_goal;
    return vec({pos_, at_goal ? 1 : 0});
  }

 private:
  GridParams p_;
  int pos_ = 0;
};

// ---------------------------------------------------------------------------
// Mini arcade

void validate_arcade(const ArcadeParams& p) {
  require(p.width >= 2 && p.height >= 2, ErrorKind::kConfig, "mini_arcade needs width, height >= 2");
  require(p.balls >= 1, ErrorKind::kConfig, "mini_arcade needs >= 1 ball per episode");
}

class MiniArcade final : public Env {
 public:
  MiniArcade(std::uint64_t seed, const ArcadeParams& p)
      : Env(EnvSpec{"mini_arcade", {p.width, p.height, p.width, 3}, 3, true, seed,
                    p.balls * p.height - 1}),
        p_(p) {}

 protected:
  Eigen::VectorXi on_reset(Rng& rng) override {
    paddle_ = p_.width / 2;
    bx_ = rng.uniform_int(p_.width);
    by_ = 0;
    outcomes_ = 0;
    return vec({bx_, by_, paddle_, 0});
  }

  Eigen::VectorXi on_step(int action, Rng& rng, double& reward, bool& terminal) override {
    paddle_ = std::clamp(paddle_ + action - 1, 0, p_.width - 1);
    if (by_ == p_.height - 1) {
      bx_ = rng.uniform_int(p_.width);
      by_ = 0;
    } else {
      ++by_;
    }
    int outcome = 0;
    if (by_ == p_.height - 1) {
      outcome = paddle_ == bx_ ? 1 : 2;
      reward = outcome == 1 ? p_.catch_reward : p_.miss_reward;
      terminal = ++outcomes_ == p_.balls;
    }
    return vec({bx_, by_, paddle_, outcome});
  }

 private:
  ArcadeParams p_;
  int paddle_ = 0, bx_ = 0, by_ = 0, outcomes_ = 0;
};

Eigen::MatrixXd identity_obs(const HmmLayer& layer, int factor) {
  const JointSpace cols = layer.obs_column_space();
  const int n = layer.order_size(factor, 0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, cols.size());
  for (int c = 0; c < cols.size(); ++c) a(cols.digit(c, factor), c) = 1.0;
  return a;
}

}  // namespace

std::unique_ptr<Env> make_tmaze(std::uint64_t seed, const TmazeParams& params) {
  require(params.reward_prob >= 0.0 && params.reward_prob <= 1.0, ErrorKind::kConfig,
          "tmaze reward_prob must lie in [0, 1]");
  require(params.horizon >= 1, ErrorKind::kConfig, "tmaze horizon must be >= 1");
  return std::make_unique<Tmaze>(seed, params);
}

HmmLayer tmaze_model(const TmazeParams& params) {
  HmmShape s;
  s.order_states = {{4}, {2}};
  s.controllable = {{true}, {false}};
  s.num_actions = 4;
  s.num_obs = {4, 3, 3};
  s.modality_names = {"location", "outcome", "cue"};
  HmmLayer l = HmmLayer::make(s);

  Eigen::MatrixXd loc = Eigen::MatrixXd::Zero(4, 16);
  for (int a = 0; a < 4; ++a)
    for (int prev = 0; prev < 4; ++prev) {
      const int next = (prev == kLeft || prev == kRight) ? prev : a;
      loc(next, l.trans_config(0, 0, prev, 0, a)) = 1.0;
    }
  l.set_transition(0, 0, loc);
  l.set_transition(1, 0, Eigen::MatrixXd::Identity(2, 2));
  l.set_initial(0, 0, Eigen::Vector4d(1, 0, 0, 0));
  l.set_initial(1, 0, Eigen::Vector2d(0.5, 0.5));

  const JointSpace cols = l.obs_column_space();
  Eigen::MatrixXd outcome = Eigen::MatrixXd::Zero(3, cols.size());
  Eigen::MatrixXd cue = Eigen::MatrixXd::Zero(3, cols.size());
  for (int c = 0; c < cols.size(); ++c) {
    const int where = cols.digit(c, 0), ctx = cols.digit(c, 1);
    if (where == kLeft || where == kRight) {
      const double p = ((where == kLeft) == (ctx == 0)) ? params.reward_prob : 1.0 - params.reward_prob;
      outcome(1, c) = p;
      outcome(2, c) = 1.0 - p;
    } else {
      outcome(0, c) = 1.0;
    }
    cue(where == kCue ? 1 + ctx : 0, c) = 1.0;
  }
  l.set_observation(0, identity_obs(l, 0));
  l.set_observation(1, outcome);
  l.set_observation(2, cue);
  return l;
}

std::unique_ptr<Env> make_gridworld(std::uint64_t seed, const GridParams& params) {
  validate_grid(params);
  return std::make_unique<Gridworld>(seed, params);
}

HmmLayer gridworld_model(const GridParams& params) {
  validate_grid(params);
  const int n = params.width * params.height;
  HmmShape s;
  s.order_states = {{n}};
  s.controllable = {{true}};
  s.num_actions = 5;
  s.num_obs = {n, 2};
  s.modality_names = {"cell", "goal"};
  HmmLayer l = HmmLayer::make(s);
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(n, n * 5);
  for (int a = 0; a < 5; ++a)
    for (int c = 0; c < n; ++c) t(grid_move(params, c, a), l.trans_config(0, 0, c, 0, a)) = 1.0;
  l.set_transition(0, 0, t);
  Eigen::VectorXd init = Eigen::VectorXd::Zero(n);
  for (int c = 0; c < n; ++c)
    if (c != params.goal && std::find(params.walls.begin(), params.walls.end(), c) == params.walls.end())
      init[c] = 1.0;
  l.set_initial(0, 0, init / init.sum());
  l.set_observation(0, Eigen::MatrixXd::Identity(n, n));
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(2, n);
  for (int c = 0; c < n; ++c) g(c == params.goal ? 1 : 0, c) = 1.0;
  l.set_observation(1, g);
  return l;
}

int grid_shortest_path(const GridParams& params, int from, int to) {
  const int n = params.width * params.height;
  std::vector<int> dist(n, -1);
  std::deque<int> queue{from};
  dist[from] = 0;
  while (!queue.empty()) {
    const int c = queue.front();
    queue.pop_front();
    if (c == to) return dist[c];
    for (int a = 1; a < 5; ++a) {
      const int nx = grid_move(params, c, a);
      if (dist[nx] < 0) {
        dist[nx] = dist[c] + 1;
        queue.push_back(nx);
      }
    }
  }
  return -1;
}

std::unique_ptr<Env> make_mini_arcade(std::uint64_t seed, const ArcadeParams& params) {
  validate_arcade(params);
  return std::make_unique<MiniArcade>(seed, params);
}

HmmLayer mini_arcade_model(const ArcadeParams& params, bool learn_paddle, bool learn_outcome,
                           double prior_count) {
  validate_arcade(params);
  require(prior_count > 0.0, ErrorKind::kConfig, "prior count must be > 0");
  const int w = params.width, h = params.height, nb = w * h;
  HmmShape s;
  s.order_states = {{nb}, {w}};  // ball cell y * w + x, paddle column
  s.controllable = {{false}, {true}};
  s.num_actions = 3;
  s.num_obs = {w, h, w, 3};
  s.modality_names = {"ball_x", "ball_y", "paddle", "outcome"};
  HmmLayer l = HmmLayer::make(s, prior_count);

  Eigen::MatrixXd ball = Eigen::MatrixXd::Zero(nb, nb);
  for (int c = 0; c < nb; ++c) {
    if (c / w == h - 1)
      for (int nx = 0; nx < w; ++nx) ball(nx, c) = 1.0 / w;
    else
      ball(c + w, c) = 1.0;
  }
  l.set_transition(0, 0, ball);
  Eigen::VectorXd b0 = Eigen::VectorXd::Zero(nb);
  b0.head(w).setConstant(1.0 / w);
  l.set_initial(0, 0, b0);
  Eigen::VectorXd p0 = Eigen::VectorXd::Zero(w);
  p0[w / 2] = 1.0;
  l.set_initial(1, 0, p0);
  if (!learn_paddle) {
    Eigen::MatrixXd pad = Eigen::MatrixXd::Zero(w, w * 3);
    for (int a = 0; a < 3; ++a)
      for (int p = 0; p < w; ++p) pad(std::clamp(p + a - 1, 0, w - 1), l.trans_config(1, 0, p, 0, a)) = 1.0;
    l.set_transition(1, 0, pad);
  }

  const JointSpace cols = l.obs_column_space();
  Eigen::MatrixXd ox = Eigen::MatrixXd::Zero(w, cols.size());
  Eigen::MatrixXd oy = Eigen::MatrixXd::Zero(h, cols.size());
  Eigen::MatrixXd op = Eigen::MatrixXd::Zero(w, cols.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(3, cols.size());
  for (int c = 0; c < cols.size(); ++c) {
    const int cell = cols.digit(c, 0), pad = cols.digit(c, 1);
    const int x = cell % w, y = cell / w;
    ox(x, c) = 1.0;
    oy(y, c) = 1.0;
    op(pad, c) = 1.0;
    out(y == h - 1 ? (pad == x ? 1 : 2) : 0, c) = 1.0;
  }
  l.set_observation(0, ox);
  l.set_observation(1, oy);
  l.set_observation(2, op);
  if (!learn_outcome) l.set_observation(3, out);
  return l;
}

// ---------------------------------------------------------------------------
// Bouncing ball

void BallParams::validate() const {
  require(gravity > 0.0, ErrorKind::kConfig, "bouncing_ball gravity must be > 0");
  require(restitution > 0.0 && restitution <= 1.0, ErrorKind::kConfig,
          "bouncing_ball restitution must lie in (0, 1]");
  require(dt > 0.0, ErrorKind::kConfig, "bouncing_ball dt must be > 0");
  require(height >= 0.0, ErrorKind::kConfig, "bouncing_ball height must be >= 0");
  require(process_noise >= 0.0 && obs_noise >= 0.0, ErrorKind::kConfig,
          "bouncing_ball noise levels must be >= 0");
}

double ball_energy(const BallParams& p, const Eigen::Vector2d& s) {
  return 0.5 * s[1] * s[1] + p.gravity * s[0];
}

namespace {

/// Advance (x, v) by dt; returns whether the floor was hit.
bool ball_step(const BallParams& p, double& x, double& v) {
  const double g = p.gravity;
  const double rest_speed = 1e-9 * g * p.dt;
  double left = p.dt;
  bool contact = false;
  for (int bounce = 0; bounce < 1000 && left > 0.0; ++bounce) {
    if (x <= 0.0 && std::abs(v) <= rest_speed) {
      x = 0.0;
      v = 0.0;
      return true;
    }
    const double tau = (v + std::sqrt(std::max(0.0, v * v + 2.0 * g * x))) / g;
    if (tau > left + 1e-12 * p.dt) {
      x += v * left - 0.5 * g * left * left;
      v -= g * left;
      x = std::max(x, 0.0);
      return contact;
    }
    contact = true;
    v = -p.restitution * (v - g * tau);
    x = 0.0;
    left -= tau;
  }
  x = 0.0;
  v = 0.0;
  return true;
}

}  // namespace

BallTrajectory bouncing_ball(const BallParams& params, int horizon, std::uint64_t seed) {
  params.validate();
  require(horizon >= 1, ErrorKind::kConfig, "bouncing_ball horizon must be >= 1");
  Rng rng = Rng::stream(seed, "envs:bouncing_ball");
  BallTrajectory out;
  out.states.resize(horizon, 2);
  out.obs.resize(horizon, params.observe_velocity ? 2 : 1);
  out.modes.assign(horizon, 0);
  double x = params.height, v = params.velocity;
  for (int t = 0; t < horizon; ++t) {
    if (t > 0) {
      out.modes[t] = ball_step(params, x, v) ? 1 : 0;
      if (params.process_noise > 0.0) v += params.process_noise * rng.normal();
    }
    out.states(t, 0) = x;
    out.states(t, 1) = v;
    out.obs(t, 0) = x + (params.obs_noise > 0.0 ? params.obs_noise * rng.normal() : 0.0);
    if (params.observe_velocity)
      out.obs(t, 1) = v + (params.obs_noise > 0.0 ? params.obs_noise * rng.normal() : 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Motif stream

MotifStream motif_stream(const std::vector<Eigen::MatrixXi>& motifs, const Eigen::MatrixXd& grammar,
                         int length, std::uint64_t seed) {
  require(!motifs.empty(), ErrorKind::kConfig, "motif_stream needs >= 1 motif");
  const int k = static_cast<int>(motifs.size());
  const Eigen::Index stride = motifs[0].rows(), nch = motifs[0].cols();
  require(stride >= 1 && nch >= 1, ErrorKind::kConfig, "motifs must be non-empty");
  for (const auto& m : motifs)
    require(m.rows() == stride && m.cols() == nch, ErrorKind::kConfig,
            "motifs must share one length and channel count");
  require(grammar.rows() == k && grammar.cols() == k, ErrorKind::kConfig,
          "grammar must be motifs x motifs");
  require((grammar.array() >= 0.0).all() && (grammar.rowwise().sum().array() > 0.0).all(),
          ErrorKind::kConfig, "grammar rows must be nonnegative with positive mass");
  require(length >= 1, ErrorKind::kConfig, "motif_stream length must be >= 1");
  Rng rng = Rng::stream(seed, "envs:motif_stream");
  MotifStream out;
  out.channels.assign(static_cast<std::size_t>(nch), {});
  int current = rng.uniform_int(k);
  while (static_cast<int>(out.channels[0].size()) < length) {
    out.labels.push_back(current);
    for (Eigen::Index i = 0; i < stride && static_cast<int>(out.channels[0].size()) < length; ++i)
      for (Eigen::Index c = 0; c < nch; ++c) out.channels[c].push_back(motifs[current](i, c));
    current = rng.categorical(grammar.row(current).transpose());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sprite world

void SpriteWorldParams::validate() const {
  require(width >= 1 && height >= 1 && width <= 16 && height <= 16, ErrorKind::kConfig,
          "sprite grid must be between 1x1 and 16x16");
  require(channels >= 1 && channels <= 3, ErrorKind::kConfig, "sprite grid needs 1..3 channels");
  require(!sprites.empty(), ErrorKind::kConfig, "sprite_world needs >= 1 sprite");
  int area = 0;
  for (const auto& s : sprites) {
    require(s.size >= 1 && s.size <= std::min(width, height), ErrorKind::kConfig,
            "sprite size must fit the grid");
    require(s.color.size() == channels, ErrorKind::kConfig, "sprite color needs one value per channel");
    area += s.size * s.size;
  }
  require(area <= width * height, ErrorKind::kConfig, "sprites do not fit the grid");
  require(controlled >= -1 && controlled < static_cast<int>(sprites.size()), ErrorKind::kConfig,
          "controlled sprite index out of range");
}

SpriteWorld sprite_world(const SpriteWorldParams& p, int horizon, std::uint64_t seed,
                         const std::vector<int>& actions) {
  p.validate();
  require(horizon >= 1, ErrorKind::kConfig, "sprite_world horizon must be >= 1");
  const int ns = static_cast<int>(p.sprites.size());
  if (p.controlled >= 0)
    for (int a : actions) require(a >= 0 && a < 5, ErrorKind::kConfig, "sprite action must be in 0..4");
  Rng rng = Rng::stream(seed, "envs:sprite_world");

  auto overlaps = [&](const std::vector<Eigen::Vector2i>& pos, int n) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        const auto& a = pos[i];
        const auto& b = pos[j];
        const int sa = p.sprites[i].size, sb = p.sprites[j].size;
        if (a.x() < b.x() + sb && b.x() < a.x() + sa && a.y() < b.y() + sb && b.y() < a.y() + sa)
          return true;
      }
    return false;
  };
  std::vector<Eigen::Vector2i> pos(ns);
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    for (int i = 0; i < ns; ++i) {
      const int s = p.sprites[i].size;
      pos[i] = Eigen::Vector2i(rng.uniform_int(p.width - s + 1), rng.uniform_int(p.height - s + 1));
    }
    placed = !overlaps(pos, ns);
  }
  require(placed, ErrorKind::kData, "sprite_world: no overlap-free placement in 100 tries");

  SpriteWorld out;
  const int hw = p.width * p.height;
  out.frames = Eigen::MatrixXd::Zero(horizon, p.channels * hw);
  out.positions.resize(horizon, 2 * ns);
  for (int i = 0; i < ns; ++i) out.identity.push_back(i);
  const Eigen::Vector2i moves[5] = {{0, 0}, {0, -1}, {0, 1}, {-1, 0}, {1, 0}};
  for (int t = 0; t < horizon; ++t) {
    if (t > 0)
      for (int i = 0; i < ns; ++i) {
        Eigen::Vector2i d = p.sprites[i].velocity;
        if (i == p.controlled && t - 1 < static_cast<int>(actions.size())) d += moves[actions[t - 1]];
        pos[i].x() = ((pos[i].x() + d.x()) % p.width + p.width) % p.width;
        pos[i].y() = ((pos[i].y() + d.y()) % p.height + p.height) % p.height;
      }
    for (int i = 0; i < ns; ++i) {
      out.positions(t, 2 * i) = pos[i].x();
      out.positions(t, 2 * i + 1) = pos[i].y();
      const Sprite& s = p.sprites[i];
      for (int dy = 0; dy < s.size; ++dy)
        for (int dx = 0; dx < s.size; ++dx) {
          const int x = (pos[i].x() + dx) % p.width, y = (pos[i].y() + dy) % p.height;
          for (int c = 0; c < p.channels; ++c) {
            double& px = out.frames(t, c * hw + y * p.width + x);
            px = std::max(px, s.color[c]);
          }
        }
    }
  }
  return out;
}

Eigen::MatrixXd lit_cell_features(const SpriteWorldParams& p, const Eigen::VectorXd& frame,
                                  double color_scale) {
  const int hw = p.width * p.height;
  require(frame.size() == p.channels * hw, ErrorKind::kShape, "frame size does not match the grid");
  std::vector<Eigen::VectorXd> cols;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      Eigen::VectorXd f(2 + p.channels);
      f[0] = x;
      f[1] = y;
      bool lit = false;
      for (int c = 0; c < p.channels; ++c) {
        const double v = frame[c * hw + y * p.width + x];
        f[2 + c] = color_scale * v;
        lit = lit || v > 0.0;
      }
      if (lit) cols.push_back(f);
    }
  Eigen::MatrixXd out(2 + p.channels, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = cols[i];
  return out;
}

Mixture slot_mixture(const SpriteWorldParams& params, const Eigen::VectorXd& frame,
                     const NiwParams& prior, const GrowthConfig& cfg, double color_scale) {
  const Eigen::MatrixXd f = lit_cell_features(params, frame, color_scale);
  Mixture m{prior, {}, {}};
  for (Eigen::Index i = 0; i < f.cols(); ++i) grow_or_assign(m, f.col(i), cfg);
  return prune(m, cfg);
}

}  // namespace wmb

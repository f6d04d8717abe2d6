#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmb/hmm.hpp"
#include "wmb/rng.hpp"
#include "wmb/structure.hpp"

namespace wmb {

// ---------------------------------------------------------------------------
// Episodic environments

struct EnvSpec {
  std::string name;
  std::vector<int> num_obs;  // discrete modalities; the last one is the reward outcome
  int num_actions = 0;
  bool reward = true;
  std::uint64_t seed = 0;
  int horizon = 1;

  void validate() const;
};

struct StepRecord {
  int t = 0;
  Eigen::VectorXi obs;
  int action = -1;  // -1 on the reset record
  double reward = 0.0;
  bool terminal = false;
};

/// Episodic contract: reset() starts episode e = 0, 1, ... with randomness
/// drawn from a stream keyed by (seed, name, e), so every episode is a pure
/// function of the spec, the seed and the actions.
class Env {
 public:
  explicit Env(EnvSpec spec);
  virtual ~Env() = default;

  const EnvSpec& spec() const { return spec_; }
  int episode() const { return episode_; }
  bool done() const { return done_; }

  StepRecord reset();
  StepRecord step(int action);

 protected:
  virtual Eigen::VectorXi on_reset(Rng& rng) = 0;
  /// Returns (observation, reward, terminal).
  virtual Eigen::VectorXi on_step(int action, Rng& rng, double& reward, bool& terminal) = 0;

 private:
  EnvSpec spec_;
  Rng rng_;
  int episode_ = -1;
  int t_ = 0;
  bool done_ = true;
};

/// One line of a replay log; doubles are printed shortest round-trip.
std::string serialize_step(const StepRecord& r);

// T-maze: locations center, left arm, right arm, cue. The rewarded arm is
// drawn per episode. Modalities: location (4), outcome (none, reward, loss),
// cue (none, left, right). Action a moves to location a; arms are absorbing.
struct TmazeParams {
  double reward_prob = 0.8;  // outcome reliability at the arms
  int horizon = 2;
};

std::unique_ptr<Env> make_tmaze(std::uint64_t seed, const TmazeParams& params = {});
/// Known generative model of the T-maze: factors location (controllable)
/// and context.
HmmLayer tmaze_model(const TmazeParams& params = {});

// Gridworld: actions stay, up, down, left, right. Modalities: cell index,
// at-goal flag. Reward 1 and terminal on reaching the goal.
struct GridParams {
  int width = 5;
  int height = 5;
  int goal = 24;                 // cell index y * width + x
  std::vector<int> walls;        // blocked cells
  int horizon = 50;
};

std::unique_ptr<Env> make_gridworld(std::uint64_t seed, const GridParams& params = {});
HmmLayer gridworld_model(const GridParams& params = {});
/// Breadth-first shortest path length between two free cells (-1 if unreachable).
int grid_shortest_path(const GridParams& params, int from, int to);

// Mini arcade (catch): a ball falls one row per step from a random column;
// the paddle on the bottom row moves left, stays or moves right. When the
// ball reaches the bottom row the outcome is a catch or a miss and the next
// ball spawns at the top. Modalities: ball x, ball y, paddle x, outcome
// (none, catch, miss).
struct ArcadeParams {
  int width = 3;
  int height = 4;
  int balls = 4;  // outcomes per episode
  double catch_reward = 1.0;
  double miss_reward = -1.0;
};

std::unique_ptr<Env> make_mini_arcade(std::uint64_t seed, const ArcadeParams& params = {});
/// Model with known ball dynamics and sensors; paddle dynamics and the
/// outcome table are learned when the flags are set (flat prior counts).
HmmLayer mini_arcade_model(const ArcadeParams& params, bool learn_paddle, bool learn_outcome,
                           double prior_count = 0.5);

// ---------------------------------------------------------------------------
// Generators

struct BallParams {
  double gravity = 9.81;
  double restitution = 1.0;
  double dt = 0.1;
  double height = 1.0;
  double velocity = 0.0;
  double process_noise = 0.0;  // std of velocity noise per step
  double obs_noise = 0.0;      // std of position noise
  bool observe_velocity = false;

  void validate() const;
};

struct BallTrajectory {
  Eigen::MatrixXd states;  // T x 2 (height, velocity)
  Eigen::MatrixXd obs;     // T x 1 or T x 2
  std::vector<int> modes;  // 1 when a floor contact happens during the step into t
};

/// Exact event-driven integration of a ball under gravity with floor bounces.
BallTrajectory bouncing_ball(const BallParams& params, int horizon, std::uint64_t seed);

/// Energy 0.5 v^2 + g h of one state.
double ball_energy(const BallParams& params, const Eigen::Vector2d& state);

struct MotifStream {
  std::vector<std::vector<int>> channels;  // [channel][t]
  std::vector<int> labels;                 // motif per window
};

/// Motifs are stride x channels matrices; grammar(i, j) = P(next j | current i).
MotifStream motif_stream(const std::vector<Eigen::MatrixXi>& motifs, const Eigen::MatrixXd& grammar,
                         int length, std::uint64_t seed);

struct Sprite {
  Eigen::VectorXd color;      // one intensity per channel
  int size = 1;               // square side in cells
  Eigen::Vector2i velocity = Eigen::Vector2i::Zero();  // (dx, dy) per step
};

struct SpriteWorldParams {
  int width = 8;
  int height = 8;
  int channels = 3;
  std::vector<Sprite> sprites;
  int controlled = -1;  // sprite moved by actions (stay, up, down, left, right)

  void validate() const;
};

struct SpriteWorld {
  Eigen::MatrixXd frames;     // T x (channels * height * width), index c*H*W + y*W + x
  Eigen::MatrixXi positions;  // T x 2S, (x, y) of each sprite's top-left cell
  std::vector<int> identity;  // sprite index per sprite slot
};

/// Sprites start at distinct non-overlapping positions and move with wrap-around.
SpriteWorld sprite_world(const SpriteWorldParams& params, int horizon, std::uint64_t seed,
                         const std::vector<int>& actions = {});

/// Lit cells of one frame as (x, y, color...) feature columns; the color
/// block is multiplied by color_scale.
Eigen::MatrixXd lit_cell_features(const SpriteWorldParams& params, const Eigen::VectorXd& frame,
                                  double color_scale);

/// Simplified slot mixture: grow a Gaussian mixture over lit-cell features.
Mixture slot_mixture(const SpriteWorldParams& params, const Eigen::VectorXd& frame,
                     const NiwParams& prior, const GrowthConfig& cfg, double color_scale);

}  // namespace wmb

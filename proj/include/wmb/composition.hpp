#pragma once

#include <cstdint>
#include <map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "wmb/hmm.hpp"
#include "wmb/slds.hpp"

namespace wmb {

using Layer = std::variant<HmmLayer, SldsLayer>;

inline bool is_discrete(const Layer& l) { return std::holds_alternative<HmmLayer>(l); }

enum class LinkKind {
  kDiscreteDiscrete,
  kDiscreteContinuous,
  kContinuousContinuous,
};

/// How a parent's state at one step sets the child's state at the start of
/// the matching window.
///
/// discrete -> discrete: child_init (child joint latent x parent joint latent),
///   covering the child's initial state and path together.
/// discrete -> continuous: per parent joint state, a Gaussian over x and a
///   categorical over the switch.
/// continuous -> continuous: x_child = map * x_parent + offset + N(0, noise).
struct LinkTable {
  LinkKind kind = LinkKind::kDiscreteDiscrete;

  DirichletCounts child_init;
  DirichletCounts child_init_prior;

  std::vector<GaussianBelief> state_init;
  std::vector<CategoricalBelief> switch_init;

  Eigen::MatrixXd map;
  Eigen::VectorXd offset;
  Eigen::MatrixXd noise;

  static LinkTable discrete(int child_joint, int parent_joint,
                            double prior_count = kDefaultPriorCount);
  static LinkTable to_continuous(std::vector<GaussianBelief> state_init,
                                 std::vector<CategoricalBelief> switch_init);
  static LinkTable affine(Eigen::MatrixXd map, Eigen::VectorXd offset, Eigen::MatrixXd noise);
};

struct Link {
  int upper = 0;
  int lower = 0;
  LinkTable table;
  int stride = 1;
};

/// The four searched integers. temporal[i] is the stride of layer i under its
/// parent (1 for the root); the rest are per layer.
struct DepthConfig {
  int hierarchical = 1;
  std::vector<int> temporal;
  std::vector<int> factorial;
  std::vector<int> generalized;

  int total_depth() const;
  void validate() const;
};

/// Layers in topological order (parents before children); layer 0 is the root.
struct ModelGraph {
  std::vector<Layer> layers;
  std::vector<Link> links;

  static ModelGraph single(Layer layer);

  int size() const { return static_cast<int>(layers.size()); }
  /// Index into links of the link whose lower end is `layer`, or -1.
  int parent_link(int layer) const;
  std::vector<int> child_links(int layer) const;
  std::vector<int> leaves() const;
  /// Steps of `layer` per root step.
  int steps_per_root(int layer) const;
  DepthConfig depth() const;

  void validate() const;
};

/// Append `lower` under layer `upper`; returns the new layer's index.
int compose(ModelGraph& graph, int upper, Layer lower, LinkTable link, int stride);
/// Two-layer graph.
ModelGraph compose(Layer upper, Layer lower, LinkTable link, int stride);

/// Joint latent size a discrete link must condition on.
int link_parent_size(const Layer& upper);

struct LayerSample {
  std::vector<int> joint;     // discrete: joint latent index per step
  Eigen::MatrixXi symbols;    // discrete: T x M observations
  std::vector<int> actions;   // discrete: actions applied
  SldsSample continuous;      // continuous layers
};

struct GraphSample {
  std::vector<LayerSample> layers;
};

/// Per-layer driving inputs for generation: actions (discrete) or controls
/// (continuous). Only controllable layers read their entry.
struct GraphInputs {
  std::map<int, ActionPolicy> actions;
  std::map<int, Eigen::MatrixXd> controls;
};

/// Ancestral sampling. The root uses its own rollout stream, so an L = 1
/// graph reproduces the layer's rollout; layer i > 0 draws from stream
/// "composition:layer<i>".
GraphSample generate(const ModelGraph& graph, int top_horizon, std::uint64_t seed,
                     const GraphInputs& inputs = {});

/// Observed data per layer: empty (latent only), a DiscreteSequence or an
/// SldsSequence. Actions and controls ride inside the sequences.
using LayerData = std::variant<std::monostate, DiscreteSequence, SldsSequence>;

struct GraphPosterior {
  std::vector<DiscreteTrajectory> discrete;    // by layer, empty for continuous
  std::vector<HybridTrajectory> continuous;    // by layer, empty for discrete
  /// Discrete links: expected (child start, parent) counts summed over windows.
  std::vector<Eigen::MatrixXd> link_stats;
  std::vector<double> elbo;                    // one value per sweep
  double final_elbo() const { return elbo.empty() ? 0.0 : elbo.back(); }
};

struct HierarchicalOptions {
  ParamMode mode = ParamMode::kMean;
  int vi_iters = 1;  // structured VI iterations per continuous layer per sweep
};

/// Discrete subtrees are solved exactly by upward window likelihoods and
/// downward cavity priors; continuous layers exchange mean-field messages
/// through restarts and Gaussian evidence. The ELBO is recorded per sweep.
GraphPosterior hierarchical_infer(const ModelGraph& graph, const std::vector<LayerData>& data,
                                  int sweeps, const HierarchicalOptions& opts = {});

/// Number of steps of the root given per-layer data lengths.
int infer_root_length(const ModelGraph& graph, const std::vector<LayerData>& data);

struct GraphLearnResult {
  ModelGraph graph;
  std::vector<double> elbo;  // expected-log evidence minus Dirichlet KL, per sweep
};

/// Variational Bayes over an all-discrete graph: layer tables and link
/// tables are reset to prior + expected counts every sweep.
GraphLearnResult vb_learn_graph(const ModelGraph& graph,
                                const std::vector<std::vector<LayerData>>& data, int sweeps);

}  // namespace wmb

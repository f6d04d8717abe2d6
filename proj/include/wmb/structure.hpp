#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wmb/composition.hpp"
#include "wmb/distributions.hpp"
#include "wmb/hmm.hpp"

namespace wmb {

// ---------------------------------------------------------------------------
// Online growth

struct GrowthConfig {
  double evidence_threshold = 0.0;
  int max_components = 32;
  double prune_count = 0.0;

  void validate() const;
};

/// Gaussian mixture whose components carry NIW posteriors.
struct Mixture {
  NiwParams prior;
  std::vector<NiwParams> components;
  std::vector<double> mass;  // accumulated responsibility per component

  int size() const { return static_cast<int>(components.size()); }
  Eigen::VectorXd weights() const;
};

struct GrowthDecision {
  int assignment = -1;
  bool grew = false;
  bool saturated = false;         // growth demanded at max_components
  double fresh_log_pred = 0.0;    // fresh-prior predictive of the datum
  double best_log_pred = 0.0;     // best existing predictive (-inf when empty)
};

/// Assign x to the best existing component, or open a new one when the
/// fresh prior explains x better by more than the threshold.
GrowthDecision grow_or_assign(Mixture& model, const Eigen::VectorXd& x, const GrowthConfig& cfg);

/// Drop components whose mass is below prune_count.
Mixture prune(const Mixture& model, const GrowthConfig& cfg);

// ---------------------------------------------------------------------------
// SVD codebook

struct SvdCodebook {
  Eigen::MatrixXd basis;            // rows x rank left singular vectors
  Eigen::VectorXd singular_values;  // all of them, descending
  Eigen::MatrixXd projections;      // rank x cols
  std::vector<int> codes;           // per column
  Eigen::MatrixXd codebook;         // rank x distinct codes
  double quantum = 0.0;             // projection rounding step
  double reconstruction_error = 0.0;  // ||M - U U^T M||_F^2
  double tail_energy = 0.0;           // sum of squared discarded singular values
};

/// Columns of `patches` are time steps.
SvdCodebook svd_codebook(const Eigen::MatrixXd& patches, int rank);

// ---------------------------------------------------------------------------
// Mutual-information grouping

struct GroupingReport {
  Eigen::MatrixXd mi;                                  // channels x channels, nats
  std::vector<std::vector<int>> groups;                // sorted members, ordered by first member
  std::vector<std::vector<std::vector<int>>> codebooks;  // per group: distinct joint tuples
  std::vector<std::vector<int>> codes;                 // per group: joint code per step
};

double mutual_information(const std::vector<int>& a, const std::vector<int>& b);

GroupingReport mi_grouping(const std::vector<std::vector<int>>& channels, double threshold = 0.05);

// ---------------------------------------------------------------------------
// Fast structure learning (FSL-lite)

struct FslOptions {
  std::vector<int> strides;
  double mi_threshold = 0.05;
  int alphabet_cap = 256;
  double floor = 1e-12;
};

struct FslLevel {
  int stride = 1;
  std::vector<std::vector<int>> groups;
  std::vector<int> states;    // per group
  std::vector<int> paths;     // per group
  std::vector<int> patterns;  // per group: parent alphabet
};

struct FslResult {
  ModelGraph graph;
  int top_horizon = 0;
  std::vector<FslLevel> levels;
};

/// Group, block and recurse until one channel remains or strides run out.
FslResult fsl_build(const std::vector<std::vector<int>>& channels, const FslOptions& opts);

/// Bottom channels of a generated sample, using leaf modality names "ch<i>".
std::vector<std::vector<int>> graph_channels(const ModelGraph& graph, const GraphSample& sample);

// ---------------------------------------------------------------------------
// Depth search

struct SkeletonOptions {
  int states = 4;       // order-0 joint states per layer, split over factors
  int path_states = 2;  // values of every order above 0
  double prior_count = kDefaultPriorCount;
};

/// Generic graph for a depth configuration: a chain of L discrete layers,
/// the last one emitting the data modalities.
ModelGraph build_skeleton(const DepthConfig& depth, const std::vector<int>& num_obs,
                          const SkeletonOptions& opts = {});

std::string depth_key(const DepthConfig& d);

struct DepthSearchOptions {
  int sweeps = 20;
  int restarts = 3;
  std::uint64_t seed = 0;
  double perturbation = 1.0;
  int jobs = 1;
  SkeletonOptions skeleton;
};

struct CandidateScore {
  DepthConfig depth;
  std::string key;
  double elbo = 0.0;
  double score = 0.0;  // ELBO per observed symbol
  int parameters = 0;
  bool failed = false;
  std::string error;
  double seconds = 0.0;
};

struct DepthSearchResult {
  std::vector<CandidateScore> candidates;  // best first
  int selected = 0;
  double margin = 0.0;  // score gap to the runner-up (0 with one candidate)
};

DepthSearchResult depth_search(const std::vector<DiscreteSequence>& data,
                               const std::vector<int>& num_obs,
                               const std::vector<DepthConfig>& candidates,
                               const DepthSearchOptions& opts);

}  // namespace wmb

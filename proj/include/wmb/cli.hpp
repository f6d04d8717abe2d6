#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wmb/composition.hpp"
#include "wmb/envs.hpp"
#include "wmb/planning.hpp"
#include "wmb/structure.hpp"

namespace wmb {

inline constexpr int kArchiveFormatVersion = 1;
inline constexpr const char* kBuildVersion = "wmb 0.1.0";

// ---------------------------------------------------------------------------
// Model archive

struct Provenance {
  std::uint64_t seed = 0;
  std::string dataset_digest;
  std::string build_version = kBuildVersion;
};

struct ModelArchive {
  int format_version = kArchiveFormatVersion;
  std::string mode;  // how the model was built: vb, fsl, slds, builtin
  ModelGraph graph;
  std::optional<DepthConfig> depth;
  int top_horizon = 0;  // default generation length of the root
  std::vector<std::string> columns;  // dataset column names
  std::vector<int> alphabets;        // discrete columns
  Provenance provenance;
};

/// JSON text; doubles are printed shortest round-trip.
std::string save_archive(const ModelArchive& a);
/// Rejects any format_version other than the current one.
ModelArchive load_archive(const std::string& text);
void write_archive(const std::string& path, const ModelArchive& a);
ModelArchive read_archive(const std::string& path);

// ---------------------------------------------------------------------------
// Datasets
//
// Header line: "#discrete" or "#continuous", then one tab-separated field per
// column ("name:alphabet" for discrete columns, "name" for continuous ones).
// A discrete column named "action" carries actions (its alphabet is the
// action count). One timestep per line; an empty line separates sequences.
// Missing values are -1 (discrete) or nan (continuous).

struct Dataset {
  bool continuous = false;
  std::vector<std::string> names;  // observation columns
  std::vector<int> alphabets;      // discrete only
  int num_actions = 0;             // > 0 when an action column is present
  std::vector<DiscreteSequence> discrete;
  std::vector<SldsSequence> sequences;

  int size() const;
  int total_steps() const;
};

Dataset parse_dataset(const std::string& text);
std::string format_dataset(const Dataset& d);
Dataset read_dataset(const std::string& path);
void write_dataset(const std::string& path, const Dataset& d);

/// FNV-1a digest of a byte string as 16 hex digits.
std::string digest_hex(const std::string& bytes);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& text);

// ---------------------------------------------------------------------------
// Run configuration

struct EnvConfig {
  std::string name;  // tmaze, gridworld, mini_arcade
  TmazeParams tmaze;
  GridParams grid;
  ArcadeParams arcade;
  bool learn_paddle = true;
  bool learn_outcome = true;
  double prior_count = 0.5;
};

struct SldsTrainConfig {
  int modes = 2;
  int state_dim = 1;
  int vi_iters = 5;
  bool learn_recurrence = true;
};

struct RunConfig {
  std::string command;  // optional; must match the invoked command when set
  std::string base_dir = ".";
  std::string model;    // archive path (read by generate/infer/plan/inspect, written by train)
  std::string dataset;  // dataset path
  std::string mode = "vb";
  std::optional<DepthConfig> depth;
  std::vector<DepthConfig> candidates;
  SkeletonOptions skeleton;
  FslOptions fsl;
  SldsTrainConfig slds;
  int sweeps = 20;
  int restarts = 3;
  std::uint64_t seed = 0;
  int jobs = 1;
  int horizon = 0;  // generation length (0 = archive default)
  int samples = 1;
  std::optional<EnvConfig> env;
  PlannerConfig planner;
  std::optional<Preferences> preferences;
  int episodes = 1;
  std::string out = "out";

  /// Paths are resolved against base_dir; input paths must exist.
  void resolve(const std::string& command);
  void validate(const std::string& command) const;
};

/// Parse JSON config text. Unknown keys are configuration errors.
RunConfig parse_config(const std::string& text, const std::string& base_dir = ".");

/// Command-line overrides applied after the config file.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
  std::optional<std::string> model;
};

void apply_overrides(RunConfig& cfg, const CliOverrides& o);

// ---------------------------------------------------------------------------
// Commands. Each writes its primary outputs under cfg.out and timing records
// to separate files; `log` receives a short human-readable report.

void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_generate(const RunConfig& cfg, std::ostream& log);
void cmd_infer(const RunConfig& cfg, std::ostream& log);
void cmd_plan(const RunConfig& cfg, std::ostream& log);
void cmd_search(const RunConfig& cfg, std::ostream& log);
void cmd_inspect(const RunConfig& cfg, std::ostream& log);

/// Structure summary of an archive (the inspect report).
std::string describe_archive(const ModelArchive& a);

/// Dispatch by name; unknown command is a configuration error.
void run_command(const std::string& command, const RunConfig& cfg, std::ostream& log);

}  // namespace wmb

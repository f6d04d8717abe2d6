#include "wmb/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "wmb/error.hpp"

namespace wmb {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// JSON helpers

json mat_json(const Eigen::MatrixXd& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  j["data"] = std::move(data);
  return j;
}

Eigen::MatrixXd json_mat(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const json& data = j.at("data");
  require(rows >= 0 && cols >= 0 && static_cast<Eigen::Index>(data.size()) == rows * cols,
          ErrorKind::kData, "matrix entry count does not match its shape");
  Eigen::MatrixXd m(rows, cols);
  Eigen::Index i = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[i++].get<double>();
  return m;
}

json vec_json(const Eigen::VectorXd& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json counts_json(const DirichletCounts& c) { return mat_json(c.counts); }
DirichletCounts json_counts(const json& j) { return DirichletCounts(json_mat(j)); }

json counts_grid(const std::vector<std::vector<DirichletCounts>>& g) {
  json out = json::array();
  for (const auto& row : g) {
    json r = json::array();
    for (const auto& c : row) r.push_back(counts_json(c));
    out.push_back(std::move(r));
  }
  return out;
}

void read_counts_grid(const json& j, std::vector<std::vector<DirichletCounts>>& g) {
  require(j.size() == g.size(), ErrorKind::kData, "table grid does not match the layer shape");
  for (std::size_t f = 0; f < g.size(); ++f) {
    require(j[f].size() == g[f].size(), ErrorKind::kData, "table grid does not match the layer shape");
    for (std::size_t k = 0; k < g[f].size(); ++k) g[f][k] = json_counts(j[f][k]);
  }
}

json gaussian_json(const GaussianBelief& g) {
  json j;
  j["mean"] = vec_json(g.mean);
  j["cov"] = mat_json(g.cov);
  return j;
}

GaussianBelief json_gaussian(const json& j) {
  return GaussianBelief(json_vec(j.at("mean")), json_mat(j.at("cov")));
}

json depth_json(const DepthConfig& d) {
  json j;
  j["hierarchical"] = d.hierarchical;
  j["temporal"] = d.temporal;
  j["factorial"] = d.factorial;
  j["generalized"] = d.generalized;
  return j;
}

// ---------------------------------------------------------------------------
// Layers and links

json hmm_json(const HmmLayer& l) {
  json j;
  j["type"] = "hmm";
  j["order_states"] = l.shape.order_states;
  j["num_obs"] = l.shape.num_obs;
  j["modality_names"] = l.shape.modality_names;
  j["controllable"] = l.shape.controllable;
  j["num_actions"] = l.shape.num_actions;
  j["trans"] = counts_grid(l.trans);
  j["init"] = counts_grid(l.init);
  json obs = json::array();
  for (const auto& c : l.obs) obs.push_back(counts_json(c));
  j["obs"] = std::move(obs);
  j["trans_prior"] = counts_grid(l.trans_prior);
  j["init_prior"] = counts_grid(l.init_prior);
  json obs_prior = json::array();
  for (const auto& c : l.obs_prior) obs_prior.push_back(counts_json(c));
  j["obs_prior"] = std::move(obs_prior);
  return j;
}

HmmLayer json_hmm(const json& j) {
  HmmShape s;
  s.order_states = j.at("order_states").get<std::vector<std::vector<int>>>();
  s.num_obs = j.at("num_obs").get<std::vector<int>>();
  s.modality_names = j.at("modality_names").get<std::vector<std::string>>();
  s.controllable = j.at("controllable").get<std::vector<std::vector<bool>>>();
  s.num_actions = j.at("num_actions").get<int>();
  HmmLayer l = HmmLayer::make(s);
  read_counts_grid(j.at("trans"), l.trans);
  read_counts_grid(j.at("init"), l.init);
  read_counts_grid(j.at("trans_prior"), l.trans_prior);
  read_counts_grid(j.at("init_prior"), l.init_prior);
  const json& obs = j.at("obs");
  const json& obs_prior = j.at("obs_prior");
  require(obs.size() == l.obs.size() && obs_prior.size() == l.obs.size(), ErrorKind::kData,
          "observation tables do not match the layer shape");
  for (std::size_t m = 0; m < l.obs.size(); ++m) {
    l.obs[m] = json_counts(obs[m]);
    l.obs_prior[m] = json_counts(obs_prior[m]);
  }
  l.validate();
  return l;
}

json slds_json(const SldsLayer& l) {
  json j;
  j["type"] = "slds";
  j["num_modes"] = l.num_modes;
  j["state_dim"] = l.state_dim;
  j["obs_dim"] = l.obs_dim;
  j["control_dim"] = l.control_dim;
  json dyn = json::array(), bias = json::array(), ctl = json::array(), noise = json::array();
  for (int k = 0; k < l.num_modes; ++k) {
    dyn.push_back(mat_json(l.dynamics[k]));
    bias.push_back(vec_json(l.bias[k]));
    ctl.push_back(mat_json(l.control[k]));
    noise.push_back(mat_json(l.noise[k]));
  }
  j["dynamics"] = std::move(dyn);
  j["bias"] = std::move(bias);
  j["control"] = std::move(ctl);
  j["noise"] = std::move(noise);
  j["base_logits"] = mat_json(l.base_logits);
  j["recurrence"] = mat_json(l.recurrence);
  j["emission"] = mat_json(l.emission);
  j["obs_noise"] = mat_json(l.obs_noise);
  j["switch_init"] = vec_json(l.switch_init.probs);
  j["state_init"] = gaussian_json(l.state_init);
  json prior = json::array();
  for (const auto& p : l.dynamics_prior) {
    json pj;
    pj["mean"] = mat_json(p.mean);
    pj["precision"] = mat_json(p.precision);
    pj["dof"] = p.dof;
    pj["scatter"] = mat_json(p.scatter);
    prior.push_back(std::move(pj));
  }
  j["dynamics_prior"] = std::move(prior);
  return j;
}

SldsLayer json_slds(const json& j) {
  SldsLayer l = SldsLayer::make(j.at("num_modes").get<int>(), j.at("state_dim").get<int>(),
                                j.at("obs_dim").get<int>(), j.at("control_dim").get<int>());
  const auto k = static_cast<std::size_t>(l.num_modes);
  for (const char* key : {"dynamics", "bias", "control", "noise"})
    require(j.at(key).size() == k, ErrorKind::kData, std::string("slds ") + key + " count mismatch");
  for (std::size_t i = 0; i < k; ++i) {
    l.dynamics[i] = json_mat(j["dynamics"][i]);
    l.bias[i] = json_vec(j["bias"][i]);
    l.control[i] = json_mat(j["control"][i]);
    l.noise[i] = json_mat(j["noise"][i]);
  }
  l.base_logits = json_mat(j.at("base_logits"));
  l.recurrence = json_mat(j.at("recurrence"));
  l.emission = json_mat(j.at("emission"));
  l.obs_noise = json_mat(j.at("obs_noise"));
  l.switch_init = CategoricalBelief(json_vec(j.at("switch_init")));
  l.state_init = json_gaussian(j.at("state_init"));
  l.dynamics_prior.clear();
  for (const json& pj : j.at("dynamics_prior")) {
    RegressionPrior p;
    p.mean = json_mat(pj.at("mean"));
    p.precision = json_mat(pj.at("precision"));
    p.dof = pj.at("dof").get<double>();
    p.scatter = json_mat(pj.at("scatter"));
    l.dynamics_prior.push_back(std::move(p));
  }
  l.validate();
  return l;
}

const char* kind_name(LinkKind k) {
  switch (k) {
    case LinkKind::kDiscreteDiscrete:
      return "discrete";
    case LinkKind::kDiscreteContinuous:
      return "to_continuous";
    case LinkKind::kContinuousContinuous:
      return "affine";
  }
  return "discrete";
}

LinkKind kind_of(const std::string& s) {
  if (s == "discrete") return LinkKind::kDiscreteDiscrete;
  if (s == "to_continuous") return LinkKind::kDiscreteContinuous;
  if (s == "affine") return LinkKind::kContinuousContinuous;
  fail(ErrorKind::kData, "unknown link kind '" + s + "'");
}

json link_json(const Link& link) {
  const LinkTable& t = link.table;
  json j;
  j["upper"] = link.upper;
  j["lower"] = link.lower;
  j["stride"] = link.stride;
  j["kind"] = kind_name(t.kind);
  j["child_init"] = mat_json(t.child_init.counts);
  j["child_init_prior"] = mat_json(t.child_init_prior.counts);
  json si = json::array(), sw = json::array();
  for (const auto& g : t.state_init) si.push_back(gaussian_json(g));
  for (const auto& c : t.switch_init) sw.push_back(vec_json(c.probs));
  j["state_init"] = std::move(si);
  j["switch_init"] = std::move(sw);
  j["map"] = mat_json(t.map);
  j["offset"] = vec_json(t.offset);
  j["noise"] = mat_json(t.noise);
  return j;
}

Link json_link(const json& j) {
  Link link;
  link.upper = j.at("upper").get<int>();
  link.lower = j.at("lower").get<int>();
  link.stride = j.at("stride").get<int>();
  LinkTable& t = link.table;
  t.kind = kind_of(j.at("kind").get<std::string>());
  const Eigen::MatrixXd ci = json_mat(j.at("child_init"));
  const Eigen::MatrixXd cp = json_mat(j.at("child_init_prior"));
  if (ci.size() > 0) t.child_init = DirichletCounts(ci);
  if (cp.size() > 0) t.child_init_prior = DirichletCounts(cp);
  for (const json& g : j.at("state_init")) t.state_init.push_back(json_gaussian(g));
  for (const json& c : j.at("switch_init")) t.switch_init.emplace_back(json_vec(c));
  t.map = json_mat(j.at("map"));
  t.offset = json_vec(j.at("offset"));
  t.noise = json_mat(j.at("noise"));
  return link;
}

// ---------------------------------------------------------------------------
// Files

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::kData, "cannot create output directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) {
    s += r.dump();
    s += '\n';
  }
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Config helpers

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  require(j.is_object(), ErrorKind::kConfig, where + " must be an object");
  for (const auto& [k, v] : j.items())
    require(allowed.count(k) > 0, ErrorKind::kConfig, "unknown key '" + k + "' in " + where);
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::vector<int> int_list(const json& j, int n) {
  if (j.is_number_integer()) return std::vector<int>(n, j.get<int>());
  return j.get<std::vector<int>>();
}

DepthConfig parse_depth(const json& j) {
  check_keys(j, {"hierarchical", "temporal", "factorial", "generalized"}, "depth");
  DepthConfig d;
  d.hierarchical = j.value("hierarchical", 1);
  require(d.hierarchical >= 1, ErrorKind::kConfig, "hierarchical depth must be >= 1");
  d.temporal = j.contains("temporal") ? int_list(j["temporal"], d.hierarchical)
                                      : std::vector<int>(d.hierarchical, 1);
  if (j.contains("temporal") && j["temporal"].is_number_integer()) d.temporal[0] = 1;
  d.factorial = j.contains("factorial") ? int_list(j["factorial"], d.hierarchical)
                                        : std::vector<int>(d.hierarchical, 1);
  d.generalized = j.contains("generalized") ? int_list(j["generalized"], d.hierarchical)
                                            : std::vector<int>(d.hierarchical, 1);
  d.validate();
  return d;
}

EnvConfig parse_env(const json& j) {
  check_keys(j,
             {"name", "reward_prob", "horizon", "width", "height", "goal", "walls", "balls",
              "catch_reward", "miss_reward", "learn_paddle", "learn_outcome", "prior_count"},
             "env");
  EnvConfig e;
  e.name = j.at("name").get<std::string>();
  if (e.name == "tmaze") {
    get_if(j, "reward_prob", e.tmaze.reward_prob);
    get_if(j, "horizon", e.tmaze.horizon);
  } else if (e.name == "gridworld") {
    get_if(j, "width", e.grid.width);
    get_if(j, "height", e.grid.height);
    e.grid.goal = e.grid.width * e.grid.height - 1;
    get_if(j, "goal", e.grid.goal);
    get_if(j, "walls", e.grid.walls);
    get_if(j, "horizon", e.grid.horizon);
  } else if (e.name == "mini_arcade") {
    get_if(j, "width", e.arcade.width);
    get_if(j, "height", e.arcade.height);
    get_if(j, "balls", e.arcade.balls);
    get_if(j, "catch_reward", e.arcade.catch_reward);
    get_if(j, "miss_reward", e.arcade.miss_reward);
    get_if(j, "learn_paddle", e.learn_paddle);
    get_if(j, "learn_outcome", e.learn_outcome);
    get_if(j, "prior_count", e.prior_count);
  } else {
    fail(ErrorKind::kConfig, "unknown env '" + e.name + "'");
  }
  return e;
}

std::unique_ptr<Env> make_env(const EnvConfig& e, std::uint64_t seed) {
  if (e.name == "tmaze") return make_tmaze(seed, e.tmaze);
  if (e.name == "gridworld") return make_gridworld(seed, e.grid);
  return make_mini_arcade(seed, e.arcade);
}

HmmLayer builtin_model(const EnvConfig& e) {
  if (e.name == "tmaze") return tmaze_model(e.tmaze);
  if (e.name == "gridworld") return gridworld_model(e.grid);
  return mini_arcade_model(e.arcade, e.learn_paddle, e.learn_outcome, e.prior_count);
}

/// Default preferences: reward outcome in the T-maze and arcade, negative
/// shortest-path distance plus the goal flag in the gridworld.
Preferences default_preferences(const EnvConfig& e) {
  Preferences p;
  if (e.name == "tmaze") {
    p.log_pref = {Eigen::VectorXd(), Eigen::Vector3d(0.0, 1.0, -0.6), Eigen::VectorXd()};
  } else if (e.name == "gridworld") {
    const int n = e.grid.width * e.grid.height;
    Eigen::VectorXd cell(n);
    for (int c = 0; c < n; ++c) {
      const bool wall =
          std::find(e.grid.walls.begin(), e.grid.walls.end(), c) != e.grid.walls.end();
      const int d = wall ? -1 : grid_shortest_path(e.grid, c, e.grid.goal);
      cell[c] = d < 0 ? -static_cast<double>(n) : -static_cast<double>(d);
    }
    p.log_pref = {cell, Eigen::Vector2d(0.0, 2.0)};
  } else {
    p.log_pref = {Eigen::VectorXd(), Eigen::VectorXd(), Eigen::VectorXd(),
                  Eigen::Vector3d(0.0, 2.0, -2.0)};
  }
  return p;
}

std::vector<std::vector<LayerData>> leaf_data(const ModelGraph& graph, const ModelArchive& a,
                                              const Dataset& d);

}  // namespace

// ---------------------------------------------------------------------------
// Archive

std::string save_archive(const ModelArchive& a) {
  json j;
  j["format_version"] = a.format_version;
  j["mode"] = a.mode;
  json prov;
  prov["seed"] = a.provenance.seed;
  prov["dataset_digest"] = a.provenance.dataset_digest;
  prov["build_version"] = a.provenance.build_version;
  j["provenance"] = std::move(prov);
  j["depth"] = a.depth ? depth_json(*a.depth) : json(nullptr);
  j["top_horizon"] = a.top_horizon;
  j["columns"] = a.columns;
  j["alphabets"] = a.alphabets;
  json layers = json::array();
  for (const auto& l : a.graph.layers)
    layers.push_back(is_discrete(l) ? hmm_json(std::get<HmmLayer>(l)) : slds_json(std::get<SldsLayer>(l)));
  json links = json::array();
  for (const auto& link : a.graph.links) links.push_back(link_json(link));
  j["graph"] = {{"layers", std::move(layers)}, {"links", std::move(links)}};
  return j.dump(1) + "\n";
}

ModelArchive load_archive(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kData, std::string("archive is not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::kData, "archive must be a JSON object");
  require(j.contains("format_version") && j["format_version"].is_number_integer(),
          ErrorKind::kVersion, "archive has no integer format_version");
  const int version = j["format_version"].get<int>();
  require(version == kArchiveFormatVersion, ErrorKind::kVersion,
          "unsupported archive format_version " + std::to_string(version) + " (expected " +
              std::to_string(kArchiveFormatVersion) + ")");
  ModelArchive a;
  try {
    a.mode = j.at("mode").get<std::string>();
    const json& prov = j.at("provenance");
    a.provenance.seed = prov.at("seed").get<std::uint64_t>();
    a.provenance.dataset_digest = prov.at("dataset_digest").get<std::string>();
    a.provenance.build_version = prov.at("build_version").get<std::string>();
    if (!j.at("depth").is_null()) {
      const json& d = j["depth"];
      DepthConfig dc;
      dc.hierarchical = d.at("hierarchical").get<int>();
      dc.temporal = d.at("temporal").get<std::vector<int>>();
      dc.factorial = d.at("factorial").get<std::vector<int>>();
      dc.generalized = d.at("generalized").get<std::vector<int>>();
      a.depth = dc;
    }
    a.top_horizon = j.at("top_horizon").get<int>();
    a.columns = j.at("columns").get<std::vector<std::string>>();
    a.alphabets = j.at("alphabets").get<std::vector<int>>();
    const json& g = j.at("graph");
    for (const json& l : g.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "hmm")
        a.graph.layers.emplace_back(json_hmm(l));
      else if (type == "slds")
        a.graph.layers.emplace_back(json_slds(l));
      else
        fail(ErrorKind::kData, "unknown layer type '" + type + "'");
    }
    for (const json& l : g.at("links")) a.graph.links.push_back(json_link(l));
  } catch (const json::exception& e) {
    fail(ErrorKind::kData, std::string("malformed archive: ") + e.what());
  }
  a.graph.validate();
  return a;
}

void write_archive(const std::string& path, const ModelArchive& a) {
  write_file(path, save_archive(a));
}

ModelArchive read_archive(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return load_archive(text);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Files and datasets

std::string digest_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(Rng::fnv1a(bytes)));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kData, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) ensure_dir(p.parent_path().string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kData, "cannot write " + path);
  out << text;
  require(out.good(), ErrorKind::kData, "write failed for " + path);
}

int Dataset::size() const {
  return static_cast<int>(continuous ? sequences.size() : discrete.size());
}

int Dataset::total_steps() const {
  int n = 0;
  if (continuous)
    for (const auto& s : sequences) n += s.length();
  else
    for (const auto& s : discrete) n += s.length();
  return n;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, '\t')) out.push_back(cur);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

}  // namespace

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  Dataset d;
  auto where = [&] { return "line " + std::to_string(lineno); };

  do {
    require(static_cast<bool>(std::getline(in, line)), ErrorKind::kData, "dataset has no header");
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  } while (line.empty());
  const auto head = split_tabs(line);
  require(head[0] == "#discrete" || head[0] == "#continuous", ErrorKind::kData,
          "dataset header must start with #discrete or #continuous");
  d.continuous = head[0] == "#continuous";
  int action_col = -1;
  for (std::size_t c = 1; c < head.size(); ++c) {
    const std::string& f = head[c];
    if (d.continuous) {
      require(!f.empty(), ErrorKind::kData, "empty column name in header");
      d.names.push_back(f);
      continue;
    }
    const auto colon = f.rfind(':');
    require(colon != std::string::npos && colon > 0, ErrorKind::kData,
            "discrete column '" + f + "' must be name:alphabet");
    const std::string name = f.substr(0, colon);
    int alpha = 0;
    const char* b = f.data() + colon + 1;
    const auto r = std::from_chars(b, f.data() + f.size(), alpha);
    require(r.ec == std::errc() && r.ptr == f.data() + f.size() && alpha >= 1, ErrorKind::kData,
            "bad alphabet size in column '" + f + "'");
    if (name == "action") {
      require(action_col < 0, ErrorKind::kData, "more than one action column");
      action_col = static_cast<int>(c) - 1;
      d.num_actions = alpha;
    } else {
      d.names.push_back(name);
      d.alphabets.push_back(alpha);
    }
  }
  require(!d.names.empty(), ErrorKind::kData, "dataset declares no observation columns");
  const int ncols = static_cast<int>(head.size()) - 1;
  const int nobs = static_cast<int>(d.names.size());

  std::vector<std::vector<double>> rows_c;
  std::vector<std::vector<int>> rows_d;
  std::vector<int> acts;
  auto flush = [&] {
    if (d.continuous && !rows_c.empty()) {
      SldsSequence s;
      s.obs.resize(static_cast<Eigen::Index>(rows_c.size()), nobs);
      for (std::size_t t = 0; t < rows_c.size(); ++t)
        for (int m = 0; m < nobs; ++m) s.obs(static_cast<Eigen::Index>(t), m) = rows_c[t][m];
      d.sequences.push_back(std::move(s));
    } else if (!d.continuous && !rows_d.empty()) {
      DiscreteSequence s;
      s.obs.resize(static_cast<Eigen::Index>(rows_d.size()), nobs);
      for (std::size_t t = 0; t < rows_d.size(); ++t)
        for (int m = 0; m < nobs; ++m) s.obs(static_cast<Eigen::Index>(t), m) = rows_d[t][m];
      if (action_col >= 0) {
        // the last row's action drives nothing
        s.actions.assign(acts.begin(), acts.end() - 1);
      }
      d.discrete.push_back(std::move(s));
    }
    rows_c.clear();
    rows_d.clear();
    acts.clear();
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const auto f = split_tabs(line);
    require(static_cast<int>(f.size()) == ncols, ErrorKind::kData,
            where() + ": expected " + std::to_string(ncols) + " fields, found " +
                std::to_string(f.size()));
    if (d.continuous) {
      std::vector<double> row(nobs);
      for (int m = 0; m < nobs; ++m) {
        if (f[m] == "nan" || f[m] == "NaN") {
          row[m] = std::numeric_limits<double>::quiet_NaN();
          continue;
        }
        const auto r = std::from_chars(f[m].data(), f[m].data() + f[m].size(), row[m]);
        require(r.ec == std::errc() && r.ptr == f[m].data() + f[m].size() && std::isfinite(row[m]),
                ErrorKind::kData, where() + ": bad number '" + f[m] + "'");
      }
      rows_c.push_back(std::move(row));
    } else {
      std::vector<int> row;
      int action = -1;
      for (int c = 0; c < ncols; ++c) {
        int v = 0;
        const auto r = std::from_chars(f[c].data(), f[c].data() + f[c].size(), v);
        require(r.ec == std::errc() && r.ptr == f[c].data() + f[c].size(), ErrorKind::kData,
                where() + ": bad symbol '" + f[c] + "'");
        if (c == action_col) {
          action = v;
          continue;
        }
        const int m = static_cast<int>(row.size());
        require(v >= -1 && v < d.alphabets[m], ErrorKind::kData,
                where() + ": symbol " + std::to_string(v) + " outside alphabet of column '" +
                    d.names[m] + "'");
        row.push_back(v);
      }
      if (action_col >= 0) {
        require(action >= 0 && action < d.num_actions, ErrorKind::kData,
                where() + ": action " + std::to_string(action) + " out of range");
        acts.push_back(action);
      }
      rows_d.push_back(std::move(row));
    }
  }
  flush();
  require(d.total_steps() > 0, ErrorKind::kData, "dataset has no timesteps");
  return d;
}

std::string format_dataset(const Dataset& d) {
  std::string s = d.continuous ? "#continuous" : "#discrete";
  for (std::size_t m = 0; m < d.names.size(); ++m) {
    s += '\t' + d.names[m];
    if (!d.continuous) s += ':' + std::to_string(d.alphabets[m]);
  }
  if (!d.continuous && d.num_actions > 0) s += "\taction:" + std::to_string(d.num_actions);
  s += '\n';
  for (int i = 0; i < d.size(); ++i) {
    if (i > 0) s += '\n';
    if (d.continuous) {
      const Eigen::MatrixXd& o = d.sequences[i].obs;
      for (Eigen::Index t = 0; t < o.rows(); ++t) {
        for (Eigen::Index m = 0; m < o.cols(); ++m) {
          if (m > 0) s += '\t';
          s += format_double(o(t, m));
        }
        s += '\n';
      }
    } else {
      const DiscreteSequence& q = d.discrete[i];
      for (Eigen::Index t = 0; t < q.obs.rows(); ++t) {
        for (Eigen::Index m = 0; m < q.obs.cols(); ++m) {
          if (m > 0) s += '\t';
          s += std::to_string(q.obs(t, m));
        }
        if (d.num_actions > 0) {
          const int a = t < static_cast<Eigen::Index>(q.actions.size()) ? q.actions[t] : 0;
          s += '\t' + std::to_string(a);
        }
        s += '\n';
      }
    }
  }
  return s;
}

Dataset read_dataset(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_dataset(text);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

void write_dataset(const std::string& path, const Dataset& d) { write_file(path, format_dataset(d)); }

// ---------------------------------------------------------------------------
// Configuration

RunConfig parse_config(const std::string& text, const std::string& base_dir) {
  RunConfig cfg;
  cfg.base_dir = base_dir;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"command", "model", "dataset", "mode", "depth", "candidates", "skeleton", "fsl",
                "slds", "sweeps", "restarts", "seed", "jobs", "horizon", "samples", "env",
                "planner", "preferences", "episodes", "out"},
               "config");
    get_if(j, "command", cfg.command);
    get_if(j, "model", cfg.model);
    get_if(j, "dataset", cfg.dataset);
    get_if(j, "mode", cfg.mode);
    if (j.contains("depth")) cfg.depth = parse_depth(j["depth"]);
    if (j.contains("candidates"))
      for (const json& c : j["candidates"]) cfg.candidates.push_back(parse_depth(c));
    if (j.contains("skeleton")) {
      const json& s = j["skeleton"];
      check_keys(s, {"states", "path_states", "prior_count"}, "skeleton");
      get_if(s, "states", cfg.skeleton.states);
      get_if(s, "path_states", cfg.skeleton.path_states);
      get_if(s, "prior_count", cfg.skeleton.prior_count);
    }
    if (j.contains("fsl")) {
      const json& s = j["fsl"];
      check_keys(s, {"strides", "mi_threshold", "alphabet_cap"}, "fsl");
      get_if(s, "strides", cfg.fsl.strides);
      get_if(s, "mi_threshold", cfg.fsl.mi_threshold);
      get_if(s, "alphabet_cap", cfg.fsl.alphabet_cap);
    }
    if (j.contains("slds")) {
      const json& s = j["slds"];
      check_keys(s, {"modes", "state_dim", "vi_iters", "learn_recurrence"}, "slds");
      get_if(s, "modes", cfg.slds.modes);
      get_if(s, "state_dim", cfg.slds.state_dim);
      get_if(s, "vi_iters", cfg.slds.vi_iters);
      get_if(s, "learn_recurrence", cfg.slds.learn_recurrence);
    }
    get_if(j, "sweeps", cfg.sweeps);
    get_if(j, "restarts", cfg.restarts);
    get_if(j, "seed", cfg.seed);
    get_if(j, "jobs", cfg.jobs);
    get_if(j, "horizon", cfg.horizon);
    get_if(j, "samples", cfg.samples);
    get_if(j, "episodes", cfg.episodes);
    get_if(j, "out", cfg.out);
    if (j.contains("env")) cfg.env = parse_env(j["env"]);
    if (j.contains("planner")) {
      const json& p = j["planner"];
      check_keys(p,
                 {"horizon", "info_gain_weight", "parameter_info_gain", "policy_cap", "rollouts",
                  "learn"},
                 "planner");
      get_if(p, "horizon", cfg.planner.horizon);
      get_if(p, "info_gain_weight", cfg.planner.info_gain_weight);
      get_if(p, "parameter_info_gain", cfg.planner.parameter_info_gain);
      get_if(p, "policy_cap", cfg.planner.policy_cap);
      get_if(p, "rollouts", cfg.planner.num_rollouts);
      get_if(p, "learn", cfg.planner.learn);
    }
    if (j.contains("preferences")) {
      const json& p = j["preferences"];
      check_keys(p, {"log_pref"}, "preferences");
      Preferences prefs;
      for (const json& v : p.at("log_pref")) prefs.log_pref.push_back(json_vec(v));
      prefs.validate();
      cfg.preferences = prefs;
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("invalid config: ") + e.what());
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const CliOverrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.out) cfg.out = fs::absolute(*o.out).string();
  if (o.model) cfg.model = fs::absolute(*o.model).string();
}

void RunConfig::resolve(const std::string& cmd) {
  auto abs = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (fs::path(base_dir) / p).lexically_normal().string();
  };
  abs(model);
  abs(dataset);
  abs(out);
  if (cmd == "train" && model.empty()) model = join(out, "model.json");
  const bool reads_model = cmd == "generate" || cmd == "infer" || cmd == "inspect" ||
                           (cmd == "plan" && !model.empty());
  if (reads_model) {
    require(!model.empty(), ErrorKind::kConfig, cmd + " needs a model archive path");
    require(fs::is_regular_file(model), ErrorKind::kData, "model archive not found: " + model);
  }
  if (cmd == "train" || cmd == "infer" || cmd == "search") {
    require(!dataset.empty(), ErrorKind::kConfig, cmd + " needs a dataset path");
    require(fs::is_regular_file(dataset), ErrorKind::kData, "dataset not found: " + dataset);
  }
}

void RunConfig::validate(const std::string& cmd) const {
  require(command.empty() || command == cmd, ErrorKind::kConfig,
          "config is for command '" + command + "', not '" + cmd + "'");
  require(sweeps >= 1 && restarts >= 1 && jobs >= 1 && samples >= 1 && episodes >= 1,
          ErrorKind::kConfig, "sweeps, restarts, jobs, samples and episodes must be >= 1");
  require(horizon >= 0, ErrorKind::kConfig, "horizon must be >= 0");
  require(slds.modes >= 1 && slds.state_dim >= 1 && slds.vi_iters >= 1, ErrorKind::kConfig,
          "slds modes, state_dim and vi_iters must be >= 1");
  require(skeleton.states >= 1 && skeleton.path_states >= 1, ErrorKind::kConfig,
          "skeleton states must be >= 1");
  require(!out.empty(), ErrorKind::kConfig, "output directory must be set");
  if (cmd == "train")
    require(mode == "vb" || mode == "fsl" || mode == "slds", ErrorKind::kConfig,
            "train mode must be vb, fsl or slds");
  if (cmd == "train" && mode == "fsl")
    require(!fsl.strides.empty(), ErrorKind::kConfig, "fsl mode needs strides");
  if (cmd == "search")
    require(!candidates.empty(), ErrorKind::kConfig, "search needs a non-empty candidate list");
  if (cmd == "plan") {
    require(env.has_value(), ErrorKind::kConfig, "plan needs an env");
    planner.validate();
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace {

void check_elbo(const std::vector<double>& elbo, int restart) {
  for (std::size_t i = 0; i < elbo.size(); ++i)
    require(std::isfinite(elbo[i]), ErrorKind::kNumerical,
            "training diverged: non-finite ELBO at sweep " + std::to_string(i + 1) +
                " (restart " + std::to_string(restart) + ")");
}

struct TrainOutcome {
  ModelGraph graph;
  int top_horizon = 0;
  std::vector<json> metrics;
  std::vector<json> timing;
  double final_elbo = 0.0;
};

TrainOutcome train_fsl(const RunConfig& cfg, const Dataset& d) {
  require(!d.continuous, ErrorKind::kData, "fsl mode needs a discrete dataset");
  require(d.size() == 1, ErrorKind::kData, "fsl mode needs exactly one sequence");
  require(d.num_actions == 0, ErrorKind::kData, "fsl mode does not take actions");
  const Eigen::MatrixXi& o = d.discrete[0].obs;
  require((o.array() >= 0).all(), ErrorKind::kData, "fsl mode needs complete data");
  std::vector<std::vector<int>> channels(o.cols());
  for (Eigen::Index c = 0; c < o.cols(); ++c)
    channels[c].assign(o.col(c).data(), o.col(c).data() + o.rows());
  const auto t0 = std::chrono::steady_clock::now();
  FslResult r = fsl_build(channels, cfg.fsl);
  TrainOutcome out;
  out.graph = std::move(r.graph);
  out.top_horizon = r.top_horizon;
  ModelArchive tmp;
  tmp.mode = "fsl";
  const auto data = leaf_data(out.graph, tmp, d);
  const GraphPosterior post = hierarchical_infer(out.graph, data[0], 1);
  check_elbo(post.elbo, 0);
  out.final_elbo = post.final_elbo();
  out.metrics.push_back({{"restart", 0}, {"sweep", 1}, {"elbo", out.final_elbo}});
  json levels = json::array();
  for (const auto& l : r.levels) levels.push_back({{"stride", l.stride}, {"patterns", l.patterns}});
  out.metrics.push_back({{"levels", std::move(levels)}, {"top_horizon", r.top_horizon}});
  out.timing.push_back({{"restart", 0}, {"seconds", seconds_since(t0)}});
  return out;
}

TrainOutcome train_vb(const RunConfig& cfg, const Dataset& d) {
  require(!d.continuous, ErrorKind::kData, "vb mode needs a discrete dataset");
  const DepthConfig depth = cfg.depth.value_or(DepthConfig{1, {1}, {1}, {1}});
  ModelGraph skeleton = build_skeleton(depth, d.alphabets, cfg.skeleton);
  if (d.num_actions > 0) {
    require(skeleton.size() == 1, ErrorKind::kConfig, "actions need a single-layer model");
    HmmShape shape = std::get<HmmLayer>(skeleton.layers[0]).shape;
    for (auto& row : shape.controllable) std::fill(row.begin(), row.end(), false);
    for (auto& f : shape.controllable) f[0] = true;
    shape.num_actions = d.num_actions;
    skeleton = ModelGraph::single(HmmLayer::make(shape, cfg.skeleton.prior_count));
  }
  const int leaf = skeleton.size() - 1;
  Rng rng = Rng::stream(cfg.seed, "cli:train");
  TrainOutcome out;
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelGraph g = skeleton;
    for (auto& l : g.layers) l = perturb_counts(std::get<HmmLayer>(l), rng, 1.0);
    for (auto& link : g.links)
      for (Eigen::Index j = 0; j < link.table.child_init.counts.cols(); ++j)
        for (Eigen::Index i = 0; i < link.table.child_init.counts.rows(); ++i)
          link.table.child_init.counts(i, j) += rng.uniform();
    std::vector<double> elbo;
    if (g.size() == 1) {
      HmmLearnResult res = vb_learn(std::get<HmmLayer>(g.layers[0]), d.discrete, cfg.sweeps);
      g.layers[0] = std::move(res.layer);
      elbo = std::move(res.elbo);
    } else {
      std::vector<std::vector<LayerData>> gd;
      for (const auto& s : d.discrete) {
        std::vector<LayerData> v(g.size());
        v[leaf] = s;
        gd.push_back(std::move(v));
      }
      GraphLearnResult res = vb_learn_graph(g, gd, cfg.sweeps);
      g = std::move(res.graph);
      elbo = std::move(res.elbo);
    }
    check_elbo(elbo, r);
    for (std::size_t i = 0; i < elbo.size(); ++i)
      out.metrics.push_back({{"restart", r}, {"sweep", i + 1}, {"elbo", elbo[i]}});
    out.timing.push_back({{"restart", r}, {"seconds", seconds_since(t0)}});
    if (elbo.back() > best) {
      best = elbo.back();
      out.graph = std::move(g);
    }
  }
  out.final_elbo = best;
  return out;
}

TrainOutcome train_slds(const RunConfig& cfg, const Dataset& d) {
  require(d.continuous, ErrorKind::kData, "slds mode needs a continuous dataset");
  const int obs_dim = static_cast<int>(d.names.size());
  Rng rng = Rng::stream(cfg.seed, "cli:train");
  SldsLearnOptions opts;
  opts.vi_iters = cfg.slds.vi_iters;
  opts.learn_recurrence = cfg.slds.learn_recurrence;
  TrainOutcome out;
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    SldsLayer layer = SldsLayer::make(cfg.slds.modes, cfg.slds.state_dim, obs_dim);
    for (int k = 0; k < layer.num_modes; ++k) {
      for (Eigen::Index i = 0; i < layer.dynamics[k].size(); ++i)
        layer.dynamics[k](i) += 0.1 * rng.normal();
      for (Eigen::Index i = 0; i < layer.bias[k].size(); ++i) layer.bias[k](i) = 0.1 * rng.normal();
    }
    layer.reset_prior();
    SldsLearnResult res = vb_learn(layer, d.sequences, cfg.sweeps, opts);
    check_elbo(res.elbo, r);
    for (std::size_t i = 0; i < res.elbo.size(); ++i)
      out.metrics.push_back({{"restart", r}, {"sweep", i + 1}, {"elbo", res.elbo[i]}});
    out.timing.push_back({{"restart", r}, {"seconds", seconds_since(t0)}});
    if (res.elbo.back() > best) {
      best = res.elbo.back();
      out.graph = ModelGraph::single(std::move(res.layer));
    }
  }
  out.final_elbo = best;
  return out;
}

/// Column index of every leaf modality named ch<i> (fsl models).
int channel_index(const std::string& name) {
  require(name.rfind("ch", 0) == 0, ErrorKind::kConfig, "modality '" + name + "' is not ch<index>");
  return std::stoi(name.substr(2));
}

std::vector<std::vector<LayerData>> leaf_data(const ModelGraph& graph, const ModelArchive& a,
                                              const Dataset& d) {
  std::vector<std::vector<LayerData>> out;
  const std::vector<int> leaves = graph.leaves();
  for (int i = 0; i < d.size(); ++i) {
    std::vector<LayerData> v(graph.size());
    if (a.mode == "fsl") {
      const Eigen::MatrixXi& o = d.discrete[i].obs;
      for (int leaf : leaves) {
        const HmmLayer& l = std::get<HmmLayer>(graph.layers[leaf]);
        if (l.num_modalities() == 0) continue;
        DiscreteSequence s;
        s.obs.resize(o.rows(), l.num_modalities());
        for (int m = 0; m < l.num_modalities(); ++m) {
          const int c = channel_index(l.shape.modality_names[m]);
          require(c < o.cols(), ErrorKind::kShape, "dataset lacks channel " + std::to_string(c));
          s.obs.col(m) = o.col(c);
        }
        v[leaf] = std::move(s);
      }
    } else {
      require(leaves.size() == 1, ErrorKind::kConfig, "model must have exactly one leaf layer");
      if (d.continuous)
        v[leaves[0]] = d.sequences[i];
      else
        v[leaves[0]] = d.discrete[i];
    }
    out.push_back(std::move(v));
  }
  return out;
}

Eigen::VectorXi argmax_cols(const Eigen::MatrixXd& m) {
  Eigen::VectorXi out(m.cols());
  for (Eigen::Index t = 0; t < m.cols(); ++t) m.col(t).maxCoeff(&out[t]);
  return out;
}

std::vector<int> to_vec(const Eigen::VectorXi& v) { return std::vector<int>(v.data(), v.data() + v.size()); }

double sparsity(const DirichletCounts& c) {
  if (c.counts.size() == 0) return 0.0;
  const Eigen::MatrixXd m = c.mean();
  return static_cast<double>((m.array() < 1e-2).count()) / static_cast<double>(m.size());
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

template <class T>
std::string list(const std::vector<T>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) s += ",";
    if constexpr (std::is_same_v<T, bool>)
      s += v[i] ? "y" : "n";
    else
      s += std::to_string(v[i]);
  }
  return s + "]";
}

}  // namespace

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const std::string text = read_file(cfg.dataset);
  Dataset d;
  try {
    d = parse_dataset(text);
  } catch (const Error& e) {
    throw Error(e.kind(), cfg.dataset + ": " + e.what());
  }
  TrainOutcome r;
  if (cfg.mode == "fsl")
    r = train_fsl(cfg, d);
  else if (cfg.mode == "slds")
    r = train_slds(cfg, d);
  else
    r = train_vb(cfg, d);

  ModelArchive a;
  a.mode = cfg.mode;
  a.graph = std::move(r.graph);
  a.depth = a.graph.depth();
  a.top_horizon = r.top_horizon;
  a.columns = d.names;
  a.alphabets = d.alphabets;
  a.provenance.seed = cfg.seed;
  a.provenance.dataset_digest = digest_hex(text);
  ensure_dir(cfg.out);
  write_archive(cfg.model, a);
  write_file(join(cfg.out, "metrics.jsonl"), jsonl(r.metrics));
  write_file(join(cfg.out, "timing.jsonl"), jsonl(r.timing));
  log << "trained " << cfg.mode << " model: " << a.graph.size() << " layer(s), final ELBO "
      << format_double(r.final_elbo) << "\n"
      << "archive " << cfg.model << "\n";
}

void cmd_generate(const RunConfig& cfg, std::ostream& log) {
  const ModelArchive a = read_archive(cfg.model);
  const int horizon = cfg.horizon > 0 ? cfg.horizon : a.top_horizon;
  require(horizon >= 1, ErrorKind::kConfig, "generate needs a horizon (config or archive)");
  const ModelGraph& g = a.graph;
  GraphInputs inputs;
  for (int i = 0; i < g.size(); ++i)
    if (is_discrete(g.layers[i]) && std::get<HmmLayer>(g.layers[i]).is_controllable()) {
      const int na = std::get<HmmLayer>(g.layers[i]).shape.num_actions;
      inputs.actions[i].sampler = [na](int, Rng& rng) { return rng.uniform_int(na); };
    }

  Dataset out;
  const std::vector<int> leaves = g.leaves();
  for (int s = 0; s < cfg.samples; ++s) {
    const GraphSample smp = generate(g, horizon, cfg.seed + static_cast<std::uint64_t>(s), inputs);
    if (a.mode == "fsl") {
      const auto ch = graph_channels(g, smp);
      DiscreteSequence q;
      q.obs.resize(static_cast<Eigen::Index>(ch.empty() ? 0 : ch[0].size()),
                   static_cast<Eigen::Index>(ch.size()));
      for (std::size_t c = 0; c < ch.size(); ++c)
        for (std::size_t t = 0; t < ch[c].size(); ++t)
          q.obs(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = ch[c][t];
      out.discrete.push_back(std::move(q));
      continue;
    }
    require(leaves.size() == 1, ErrorKind::kConfig, "model must have exactly one leaf layer");
    const int leaf = leaves[0];
    if (is_discrete(g.layers[leaf])) {
      DiscreteSequence q;
      q.obs = smp.layers[leaf].symbols;
      q.actions = smp.layers[leaf].actions;
      out.discrete.push_back(std::move(q));
    } else {
      out.continuous = true;
      SldsSequence q;
      q.obs = smp.layers[leaf].continuous.obs;
      out.sequences.push_back(std::move(q));
    }
  }
  const int leaf = a.mode == "fsl" ? -1 : leaves[0];
  int ncols = 0;
  if (out.continuous)
    ncols = std::get<SldsLayer>(g.layers[leaf]).obs_dim;
  else
    ncols = static_cast<int>(out.discrete[0].obs.cols());
  if (static_cast<int>(a.columns.size()) == ncols) {
    out.names = a.columns;
  } else {
    for (int c = 0; c < ncols; ++c) out.names.push_back("o" + std::to_string(c));
  }
  if (!out.continuous) {
    if (leaf >= 0) {
      const HmmLayer& l = std::get<HmmLayer>(g.layers[leaf]);
      out.alphabets = l.shape.num_obs;
      if (l.is_controllable()) out.num_actions = l.shape.num_actions;
    } else if (static_cast<int>(a.alphabets.size()) == ncols) {
      out.alphabets = a.alphabets;
    } else {
      out.alphabets.assign(ncols, 0);
      for (const auto& q : out.discrete)
        for (int c = 0; c < ncols; ++c)
          out.alphabets[c] = std::max(out.alphabets[c], q.obs.col(c).maxCoeff() + 1);
    }
  }
  ensure_dir(cfg.out);
  const std::string path = join(cfg.out, "generated.tsv");
  write_dataset(path, out);
  log << "generated " << cfg.samples << " sequence(s) of " << out.total_steps() / cfg.samples
      << " steps -> " << path << "\n";
}

void cmd_infer(const RunConfig& cfg, std::ostream& log) {
  const ModelArchive a = read_archive(cfg.model);
  const Dataset d = read_dataset(cfg.dataset);
  const auto data = leaf_data(a.graph, a, d);
  std::vector<json> post_rows, elbo_rows;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const GraphPosterior p = hierarchical_infer(a.graph, data[i], cfg.sweeps);
    check_elbo(p.elbo, 0);
    for (std::size_t k = 0; k < p.elbo.size(); ++k)
      elbo_rows.push_back({{"sequence", i}, {"sweep", k + 1}, {"elbo", p.elbo[k]}});
    total += p.final_elbo();
    for (int l = 0; l < a.graph.size(); ++l) {
      json row = {{"sequence", i}, {"layer", l}};
      if (is_discrete(a.graph.layers[l])) {
        const DiscreteTrajectory& q = p.discrete[l];
        if (q.joint_marginals.size() > 0) row["map_joint"] = to_vec(argmax_cols(q.joint_marginals));
        json f = json::array();
        for (const auto& m : q.factor_marginals) f.push_back(to_vec(argmax_cols(m)));
        row["map_factors"] = std::move(f);
      } else {
        const HybridTrajectory& q = p.continuous[l];
        row["map_modes"] = q.map_modes();
        row["means"] = mat_json(q.means.transpose());
      }
      post_rows.push_back(std::move(row));
    }
  }
  ensure_dir(cfg.out);
  write_file(join(cfg.out, "posterior.jsonl"), jsonl(post_rows));
  write_file(join(cfg.out, "elbo.jsonl"), jsonl(elbo_rows));
  log << "inferred " << data.size() << " sequence(s), total ELBO " << format_double(total) << "\n";
}

void cmd_plan(const RunConfig& cfg, std::ostream& log) {
  const EnvConfig& ec = *cfg.env;
  std::unique_ptr<Env> env = make_env(ec, cfg.seed);
  HmmLayer model;
  std::string source = "builtin";
  if (!cfg.model.empty()) {
    const ModelArchive a = read_archive(cfg.model);
    require(a.graph.size() == 1 && is_discrete(a.graph.layers[0]), ErrorKind::kConfig,
            "plan needs a single discrete layer model");
    model = std::get<HmmLayer>(a.graph.layers[0]);
    source = cfg.model;
  } else {
    model = builtin_model(ec);
  }
  const Preferences prefs = cfg.preferences.value_or(default_preferences(ec));
  PlannerConfig pc = cfg.planner;
  pc.seed = cfg.seed;
  pc.jobs = cfg.jobs;
  const ActResult res = act_loop(*env, model, prefs, pc, cfg.episodes);

  std::vector<json> steps, timing;
  std::string table = "episode\treturn\tsteps\tterminal\n";
  std::vector<double> returns, to_goal;
  double update_us = 0.0, total_us = 0.0;
  int n_steps = 0;
  for (std::size_t e = 0; e < res.episodes.size(); ++e) {
    const EpisodeLog& ep = res.episodes[e];
    for (const StepLog& s : ep.steps) {
      json row = {{"episode", e}};
      const json step = json::parse(serialize_step_log(s));
      for (auto& [k, v] : step.items()) row[k] = v;
      steps.push_back(std::move(row));
      json trow = {{"episode", e}};
      const json times = json::parse(serialize_step_timing(s));
      for (auto& [k, v] : times.items()) trow[k] = v;
      timing.push_back(std::move(trow));
      if (s.action >= 0) {
        update_us += s.update_us;
        total_us += s.total_us;
        ++n_steps;
      }
    }
    const int acted = static_cast<int>(ep.steps.size()) - 1;
    returns.push_back(ep.total_reward);
    if (ep.reached_terminal && ep.total_reward > 0.0) to_goal.push_back(acted);
    table += std::to_string(e) + "\t" + format_double(ep.total_reward) + "\t" +
             std::to_string(acted) + "\t" + (ep.reached_terminal ? "1" : "0") + "\n";
  }
  const double n = static_cast<double>(returns.size());
  double mean = 0.0, var = 0.0;
  for (double r : returns) mean += r / n;
  for (double r : returns) var += (r - mean) * (r - mean);
  const double sd = returns.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  json summary;
  summary["episodes"] = returns.size();
  summary["return_mean"] = mean;
  summary["return_ci95"] = 1.96 * sd / std::sqrt(n);
  summary["success_rate"] = static_cast<double>(to_goal.size()) / n;
  if (to_goal.empty()) {
    summary["steps_to_goal_mean"] = nullptr;
  } else {
    double s = 0.0;
    for (double v : to_goal) s += v;
    summary["steps_to_goal_mean"] = s / static_cast<double>(to_goal.size());
  }
  summary["model"] = source;
  json tsum;
  tsum["steps"] = n_steps;
  tsum["update_us_mean"] = n_steps > 0 ? update_us / n_steps : 0.0;
  tsum["step_us_mean"] = n_steps > 0 ? total_us / n_steps : 0.0;

  ensure_dir(cfg.out);
  write_file(join(cfg.out, "episodes.jsonl"), jsonl(steps));
  write_file(join(cfg.out, "episodes_timing.jsonl"), jsonl(timing));
  write_file(join(cfg.out, "summary.tsv"), table);
  write_file(join(cfg.out, "summary.json"), summary.dump(1) + "\n");
  write_file(join(cfg.out, "summary_timing.json"), tsum.dump(1) + "\n");
  if (pc.learn) {
    ModelArchive a;
    a.mode = "builtin";
    a.graph = ModelGraph::single(res.model);
    a.depth = a.graph.depth();
    a.provenance.seed = cfg.seed;
    write_archive(join(cfg.out, "model_after.json"), a);
  }
  log << "planned " << cfg.episodes << " episode(s) in " << ec.name << ": return mean "
      << fmt(mean) << " +/- " << fmt(1.96 * sd / std::sqrt(n)) << ", success "
      << to_goal.size() << "/" << returns.size() << ", per-step update "
      << fmt(n_steps > 0 ? update_us / n_steps : 0.0, 1) << " us, per-step total "
      << fmt(n_steps > 0 ? total_us / n_steps : 0.0, 1) << " us\n";
}

void cmd_search(const RunConfig& cfg, std::ostream& log) {
  const Dataset d = read_dataset(cfg.dataset);
  require(!d.continuous, ErrorKind::kData, "search needs a discrete dataset");
  require(d.num_actions == 0, ErrorKind::kData, "search does not take actions");
  DepthSearchOptions opts;
  opts.sweeps = cfg.sweeps;
  opts.restarts = cfg.restarts;
  opts.seed = cfg.seed;
  opts.jobs = cfg.jobs;
  opts.skeleton = cfg.skeleton;
  const DepthSearchResult r = depth_search(d.discrete, d.alphabets, cfg.candidates, opts);
  json report, timing;
  report["selected"] = r.candidates[r.selected].key;
  report["margin"] = r.margin;
  json cands = json::array();
  for (const auto& c : r.candidates) {
    json cj;
    cj["key"] = c.key;
    cj["depth"] = depth_json(c.depth);
    cj["elbo"] = c.failed ? json(nullptr) : json(c.elbo);
    cj["score"] = c.failed ? json(nullptr) : json(c.score);
    cj["parameters"] = c.parameters;
    cj["failed"] = c.failed;
    cj["error"] = c.error;
    cands.push_back(std::move(cj));
    timing[c.key] = c.seconds;
  }
  report["candidates"] = std::move(cands);
  ensure_dir(cfg.out);
  write_file(join(cfg.out, "search.json"), report.dump(1) + "\n");
  write_file(join(cfg.out, "search_timing.json"), timing.dump(1) + "\n");
  log << "selected " << r.candidates[r.selected].key << " (score "
      << format_double(r.candidates[r.selected].score) << ", margin " << format_double(r.margin)
      << ")\n";
  for (const auto& c : r.candidates)
    log << "  " << c.key << "\t" << (c.failed ? "failed: " + c.error : format_double(c.score)) << "\n";
}

std::string describe_archive(const ModelArchive& a) {
  std::ostringstream s;
  s << "format_version " << a.format_version << "\n";
  s << "mode " << a.mode << "\n";
  s << "provenance seed " << a.provenance.seed << " dataset "
    << (a.provenance.dataset_digest.empty() ? "-" : a.provenance.dataset_digest) << " build "
    << a.provenance.build_version << "\n";
  if (a.depth)
    s << "depth L=" << a.depth->hierarchical << " temporal=" << list(a.depth->temporal)
      << " factorial=" << list(a.depth->factorial) << " generalized=" << list(a.depth->generalized)
      << " total=" << a.depth->total_depth() << "\n";
  const ModelGraph& g = a.graph;
  s << "layers " << g.size() << " links " << g.links.size() << "\n";
  for (int i = 0; i < g.size(); ++i) {
    const int pl = g.parent_link(i);
    s << "layer " << i;
    if (pl >= 0) s << " (parent " << g.links[pl].upper << ", stride " << g.links[pl].stride << ")";
    if (is_discrete(g.layers[i])) {
      const HmmLayer& l = std::get<HmmLayer>(g.layers[i]);
      s << " discrete: factors " << l.num_factors() << ", joint latent " << l.latent_space().size()
        << ", modalities " << l.num_modalities() << ", actions " << l.shape.num_actions
        << ", parameters " << l.parameter_count() << "\n";
      for (int f = 0; f < l.num_factors(); ++f) {
        s << "  factor " << f << ": orders " << list(l.shape.order_states[f]) << " controllable "
          << list(l.shape.controllable[f]) << " transition sparsity";
        for (int k = 0; k < l.num_orders(f); ++k) s << " " << fmt(sparsity(l.trans[f][k]));
        s << "\n";
      }
      for (int m = 0; m < l.num_modalities(); ++m) {
        const std::string name =
            m < static_cast<int>(l.shape.modality_names.size()) ? l.shape.modality_names[m] : "";
        s << "  modality " << m << (name.empty() ? "" : " " + name) << ": " << l.shape.num_obs[m]
          << " symbols, sparsity " << fmt(sparsity(l.obs[m])) << "\n";
      }
    } else {
      const SldsLayer& l = std::get<SldsLayer>(g.layers[i]);
      s << " continuous: modes " << l.num_modes << ", state " << l.state_dim << ", obs "
        << l.obs_dim << ", control " << l.control_dim << ", parameters " << l.parameter_count()
        << "\n";
      for (int k = 0; k < l.num_modes; ++k)
        s << "  mode " << k << ": spectral radius "
          << fmt(l.dynamics[k].eigenvalues().cwiseAbs().maxCoeff()) << ", noise trace "
          << fmt(l.noise[k].trace()) << "\n";
    }
  }
  for (std::size_t k = 0; k < g.links.size(); ++k) {
    const Link& link = g.links[k];
    s << "link " << k << ": " << link.upper << " -> " << link.lower << ", stride " << link.stride
      << ", " << kind_name(link.table.kind);
    if (link.table.kind == LinkKind::kDiscreteDiscrete)
      s << ", table " << link.table.child_init.outcomes() << "x" << link.table.child_init.configs()
        << ", sparsity " << fmt(sparsity(link.table.child_init));
    s << "\n";
  }
  return s.str();
}

void cmd_inspect(const RunConfig& cfg, std::ostream& log) {
  const ModelArchive a = read_archive(cfg.model);
  const std::string text = describe_archive(a);
  ensure_dir(cfg.out);
  write_file(join(cfg.out, "inspect.txt"), text);
  log << text;
}

void run_command(const std::string& command, const RunConfig& cfg, std::ostream& log) {
  if (command == "train")
    cmd_train(cfg, log);
  else if (command == "generate")
    cmd_generate(cfg, log);
  else if (command == "infer")
    cmd_infer(cfg, log);
  else if (command == "plan")
    cmd_plan(cfg, log);
  else if (command == "search")
    cmd_search(cfg, log);
  else if (command == "inspect")
    cmd_inspect(cfg, log);
  else
    fail(ErrorKind::kConfig, "unknown command '" + command + "'");
}

}  // namespace wmb

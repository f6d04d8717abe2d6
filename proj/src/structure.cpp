#include "wmb/structure.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <optional>

#include "wmb/error.hpp"

namespace wmb {

// ---------------------------------------------------------------------------
// Online growth

void GrowthConfig::validate() const {
  require(max_components >= 1, ErrorKind::kConfig, "max_components must be >= 1");
  require(prune_count >= 0.0, ErrorKind::kConfig, "prune_count must be >= 0");
  require(!std::isnan(evidence_threshold), ErrorKind::kConfig, "evidence threshold is NaN");
}

Eigen::VectorXd Mixture::weights() const {
  Eigen::VectorXd w(size());
  for (int k = 0; k < size(); ++k) w[k] = mass[k];
  const double s = w.sum();
  if (s > 0.0) w /= s;
  return w;
}

GrowthDecision grow_or_assign(Mixture& model, const Eigen::VectorXd& x, const GrowthConfig& cfg) {
  cfg.validate();
  model.prior.validate();
  require(x.size() == model.prior.dim(), ErrorKind::kShape, "datum dimension does not match the prior");
  require(x.allFinite(), ErrorKind::kData, "datum is not finite");
  GrowthDecision d;
  d.fresh_log_pred = gaussian_log_predictive(x, model.prior);
  d.best_log_pred = -std::numeric_limits<double>::infinity();
  int best = -1;
  for (int k = 0; k < model.size(); ++k) {
    const double lp = gaussian_log_predictive(x, model.components[k]);
    if (lp > d.best_log_pred) {
      d.best_log_pred = lp;
      best = k;
    }
  }
  const bool want = best < 0 || d.fresh_log_pred - d.best_log_pred > cfg.evidence_threshold;
  if (want && model.size() < cfg.max_components) {
    model.components.push_back(niw_update(model.prior, x));
    model.mass.push_back(1.0);
    d.assignment = model.size() - 1;
    d.grew = true;
    return d;
  }
  d.saturated = want;
  d.assignment = best;
  model.components[best] = niw_update(model.components[best], x);
  model.mass[best] += 1.0;
  return d;
}

Mixture prune(const Mixture& model, const GrowthConfig& cfg) {
  cfg.validate();
  Mixture out;
  out.prior = model.prior;
  for (int k = 0; k < model.size(); ++k)
    if (model.mass[k] >= cfg.prune_count) {
      out.components.push_back(model.components[k]);
      out.mass.push_back(model.mass[k]);
    }
  require(out.size() > 0 || model.size() == 0, ErrorKind::kPrecondition,
          "pruning would remove every component");
  return out;
}

// ---------------------------------------------------------------------------
// SVD codebook

SvdCodebook svd_codebook(const Eigen::MatrixXd& m, int rank) {
  require(m.size() > 0, ErrorKind::kConfig, "svd_codebook needs a non-empty matrix");
  require(rank >= 1, ErrorKind::kConfig, "svd_codebook rank must be >= 1");
  require(rank <= std::min(m.rows(), m.cols()), ErrorKind::kConfig,
          "svd_codebook rank exceeds the matrix dimensions");
  require(m.allFinite(), ErrorKind::kData, "svd_codebook input is not finite");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU);
  SvdCodebook out;
  out.singular_values = svd.singularValues();
  out.basis = svd.matrixU().leftCols(rank);
  out.projections = out.basis.transpose() * m;
  out.reconstruction_error = (m - out.basis * out.projections).squaredNorm();
  out.tail_energy = out.singular_values.tail(out.singular_values.size() - rank).squaredNorm();
  const double top = out.singular_values[0];
  out.quantum = top > 0.0 ? 1e-6 * top : 1.0;
  std::map<std::vector<long long>, int> seen;
  std::vector<Eigen::VectorXd> book;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    std::vector<long long> key(rank);
    for (int r = 0; r < rank; ++r)
      key[r] = std::llround(out.projections(r, j) / out.quantum);
    auto [it, fresh] = seen.emplace(key, static_cast<int>(book.size()));
    if (fresh) {
      Eigen::VectorXd c(rank);
      for (int r = 0; r < rank; ++r) c[r] = static_cast<double>(key[r]) * out.quantum;
      book.push_back(c);
    }
    out.codes.push_back(it->second);
  }
  out.codebook.resize(rank, static_cast<Eigen::Index>(book.size()));
  for (std::size_t i = 0; i < book.size(); ++i) out.codebook.col(static_cast<Eigen::Index>(i)) = book[i];
  return out;
}

// ---------------------------------------------------------------------------
// Grouping

double mutual_information(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size(), ErrorKind::kShape, "channels must have a common length");
  if (a.empty()) return 0.0;
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> pa, pb;
  const double n = static_cast<double>(a.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    joint[{a[t], b[t]}] += 1.0 / n;
    pa[a[t]] += 1.0 / n;
    pb[b[t]] += 1.0 / n;
  }
  double mi = 0.0;
  for (const auto& [k, p] : joint) mi += p * std::log(p / (pa[k.first] * pb[k.second]));
  return std::max(mi, 0.0);
}

namespace {

struct JointCodes {
  std::vector<std::vector<int>> book;
  std::vector<int> codes;
};

JointCodes joint_codes(const std::vector<std::vector<int>>& channels, const std::vector<int>& members) {
  JointCodes out;
  std::map<std::vector<int>, int> seen;
  const std::size_t len = channels[members[0]].size();
  for (std::size_t t = 0; t < len; ++t) {
    std::vector<int> tuple;
    for (int m : members) tuple.push_back(channels[m][t]);
    auto [it, fresh] = seen.emplace(tuple, static_cast<int>(out.book.size()));
    if (fresh) out.book.push_back(tuple);
    out.codes.push_back(it->second);
  }
  return out;
}

}  // namespace

GroupingReport mi_grouping(const std::vector<std::vector<int>>& channels, double threshold) {
  require(!channels.empty(), ErrorKind::kConfig, "mi_grouping needs at least one channel");
  const int c = static_cast<int>(channels.size());
  for (const auto& ch : channels)
    require(ch.size() == channels[0].size(), ErrorKind::kShape, "channels must have a common length");
  GroupingReport rep;
  rep.mi = Eigen::MatrixXd::Zero(c, c);
  std::vector<int> parent(c);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (int i = 0; i < c; ++i)
    for (int j = i; j < c; ++j) {
      const double v = mutual_information(channels[i], channels[j]);
      rep.mi(i, j) = rep.mi(j, i) = v;
      if (i != j && v >= threshold) {
        const int a = find(i), b = find(j);
        parent[std::max(a, b)] = std::min(a, b);
      }
    }
  std::map<int, std::vector<int>> comps;
  for (int i = 0; i < c; ++i) comps[find(i)].push_back(i);
  for (auto& [root, members] : comps) {
    std::sort(members.begin(), members.end());
    rep.groups.push_back(members);
  }
  std::sort(rep.groups.begin(), rep.groups.end());
  for (const auto& g : rep.groups) {
    JointCodes jc = joint_codes(channels, g);
    rep.codebooks.push_back(std::move(jc.book));
    rep.codes.push_back(std::move(jc.codes));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// FSL

namespace {

/// A layer under construction; children refer to other proto layers.
struct Proto {
  HmmLayer layer;
  std::vector<int> children;
  std::vector<LinkTable> links;
  std::vector<int> strides;
};

/// One channel at the current level: a raw data channel or the pattern
/// sequence of a proto layer.
struct Item {
  std::vector<int> seq;
  int alphabet = 1;
  int raw = -1;    // data channel index
  int proto = -1;  // proto layer whose patterns these are
  std::vector<int> pattern_joint;  // pattern id -> joint latent of that proto
};

int alphabet_of(const std::vector<int>& s) { return *std::max_element(s.begin(), s.end()) + 1; }

void add_observations(HmmLayer& l, const std::vector<Item>& items, const std::vector<int>& members,
                      const JointCodes& jc, const std::vector<int>& state_of_code, double floor) {
  const JointSpace cols = l.obs_column_space();
  for (std::size_t j = 0; j < members.size(); ++j) {
    DirichletCounts& c = l.obs[j];
    c.counts.setConstant(floor);
    for (std::size_t t = 0; t < jc.codes.size(); ++t) {
      const int s = state_of_code[jc.codes[t]];
      c.counts(items[members[j]].seq[t], cols.encode({s})) += 1.0;
    }
  }
}

/// Link counts from this layer's joint latent (state digit) to each child's
/// pattern; the path digit of the parent does not matter.
void add_links(Proto& p, const std::vector<Item>& items, const std::vector<int>& members,
               const JointCodes& jc, const std::vector<int>& state_count,
               const std::vector<Proto>& protos, int stride_of_children, double floor) {
  const JointSpace lat = p.layer.latent_space();
  for (std::size_t j = 0; j < members.size(); ++j) {
    const Item& it = items[members[j]];
    const int jc_size = protos[it.proto].layer.latent_space().size();
    LinkTable t = LinkTable::discrete(jc_size, lat.size(), floor);
    for (int z = 0; z < lat.size(); ++z) {
      const int s = lat.digit(z, 0);
      const int pattern = jc.book[s][j];
      t.child_init.counts(it.pattern_joint[pattern], z) += std::max(1, state_count[s]);
    }
    p.children.push_back(it.proto);
    p.links.push_back(std::move(t));
    p.strides.push_back(stride_of_children);
  }
}

}  // namespace

FslResult fsl_build(const std::vector<std::vector<int>>& channels, const FslOptions& opts) {
  require(!channels.empty(), ErrorKind::kConfig, "fsl_build needs at least one channel");
  require(opts.alphabet_cap >= 1, ErrorKind::kConfig, "alphabet cap must be >= 1");
  require(opts.floor > 0.0, ErrorKind::kConfig, "count floor must be > 0");
  for (int s : opts.strides) require(s >= 1, ErrorKind::kConfig, "strides must be >= 1");
  const std::size_t len = channels[0].size();
  require(len > 0, ErrorKind::kData, "fsl_build needs non-empty channels");
  std::vector<Item> items;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    require(channels[i].size() == len, ErrorKind::kShape, "channels must have a common length");
    for (int v : channels[i])
      require(v >= 0, ErrorKind::kConfig, "fsl_build needs discrete (non-negative integer) channels");
    Item it;
    it.seq = channels[i];
    it.alphabet = alphabet_of(it.seq);
    it.raw = static_cast<int>(i);
    items.push_back(std::move(it));
  }

  FslResult res;
  std::vector<Proto> protos;
  int top = -1;
  for (std::size_t level = 0;; ++level) {
    const GroupingReport rep = mi_grouping([&] {
      std::vector<std::vector<int>> seqs;
      for (const auto& it : items) seqs.push_back(it.seq);
      return seqs;
    }(), opts.mi_threshold);
    const bool raw_level = items[0].raw >= 0;
    const bool strides_left = level < opts.strides.size();
    const bool trivial = rep.groups.size() == 1 && rep.codebooks[0].size() == 1;
    if (!strides_left || (!raw_level && items.size() == 1) || (raw_level && trivial)) {
      // top layer over every remaining channel jointly
      std::vector<int> members(items.size());
      std::iota(members.begin(), members.end(), 0);
      std::vector<std::vector<int>> seqs;
      for (const auto& it : items) seqs.push_back(it.seq);
      const JointCodes jc = joint_codes(seqs, members);
      const int k = static_cast<int>(jc.book.size());
      HmmShape shape;
      shape.order_states = {{k}};
      if (raw_level)
        for (const auto& it : items) {
          shape.num_obs.push_back(it.alphabet);
          shape.modality_names.push_back("ch" + std::to_string(it.raw));
        }
      Proto p;
      p.layer = HmmLayer::make(shape, opts.floor);
      HmmLayer& l = p.layer;
      l.init[0][0].counts(jc.codes[0], 0) += 1.0;
      for (std::size_t t = 1; t < jc.codes.size(); ++t)
        l.trans[0][0].counts(jc.codes[t], l.trans_config(0, 0, jc.codes[t - 1], 0, 0)) += 1.0;
      std::vector<int> identity(k), count(k, 0);
      std::iota(identity.begin(), identity.end(), 0);
      for (int c : jc.codes) ++count[c];
      if (raw_level) {
        add_observations(l, items, members, jc, identity, opts.floor);
      } else {
        add_links(p, items, members, jc, count, protos, opts.strides[level - 1], opts.floor);
      }
      protos.push_back(std::move(p));
      top = static_cast<int>(protos.size()) - 1;
      res.top_horizon = static_cast<int>(jc.codes.size());
      break;
    }

    const int tau = opts.strides[level];
    require(items[0].seq.size() % static_cast<std::size_t>(tau) == 0, ErrorKind::kConfig,
            "sequence length " + std::to_string(items[0].seq.size()) +
                " is not a multiple of stride " + std::to_string(tau) + " at level " +
                std::to_string(level));
    FslLevel info;
    info.stride = tau;
    info.groups = rep.groups;
    std::vector<Item> next;
    for (std::size_t gi = 0; gi < rep.groups.size(); ++gi) {
      const std::vector<int>& members = rep.groups[gi];
      JointCodes jc;
      jc.book = rep.codebooks[gi];
      jc.codes = rep.codes[gi];
      const int k = static_cast<int>(jc.book.size());
      const int windows = static_cast<int>(jc.codes.size()) / tau;

      // Greedy path assignment. A path value is (function f, step k) and
      // advances deterministically to (f, k + 1); table[f][k][s] is the state
      // that follows s when entering step k.
      std::vector<std::vector<std::vector<int>>> table;
      std::vector<int> window_fn(windows);
      for (int n = 0; n < windows; ++n) {
        const int* w = jc.codes.data() + n * tau;
        int chosen = -1;
        for (std::size_t f = 0; f < table.size() && chosen < 0; ++f) {
          bool ok = true;
          for (int i = 0; i + 1 < tau && ok; ++i) {
            const int nx = table[f][i + 1][w[i]];
            ok = nx < 0 || nx == w[i + 1];
          }
          if (ok) chosen = static_cast<int>(f);
        }
        if (chosen < 0) {
          table.emplace_back(tau, std::vector<int>(k, -1));
          chosen = static_cast<int>(table.size()) - 1;
        }
        for (int i = 0; i + 1 < tau; ++i) table[chosen][i + 1][w[i]] = w[i + 1];
        window_fn[n] = chosen;
      }
      const int np = static_cast<int>(table.size()) * tau;

      HmmShape shape;
      shape.order_states = {{k, np}};
      if (raw_level)
        for (int m : members) {
          shape.num_obs.push_back(items[m].alphabet);
          shape.modality_names.push_back("ch" + std::to_string(items[m].raw));
        }
      Proto p;
      p.layer = HmmLayer::make(shape, opts.floor);
      HmmLayer& l = p.layer;
      const JointSpace lat = l.latent_space();

      Item parent;
      std::map<std::pair<int, int>, int> pattern_id;
      std::vector<int> state_start_count(k, 0);
      for (int n = 0; n < windows; ++n) {
        const int* w = jc.codes.data() + n * tau;
        const int path = window_fn[n] * tau;
        l.init[0][0].counts(w[0], 0) += 1.0;
        l.init[0][1].counts(path, 0) += 1.0;
        for (int i = 0; i + 1 < tau; ++i) {
          l.trans[0][0].counts(w[i + 1], l.trans_config(0, 0, w[i], path + i + 1, 0)) += 1.0;
          l.trans[0][1].counts(path + i + 1, l.trans_config(0, 1, path + i, 0, 0)) += 1.0;
        }
        ++state_start_count[w[0]];
        auto [it, fresh] = pattern_id.emplace(std::make_pair(w[0], path),
                                              static_cast<int>(parent.pattern_joint.size()));
        if (fresh) parent.pattern_joint.push_back(lat.encode({w[0], path}));
        parent.seq.push_back(it->second);
      }
      const int patterns = static_cast<int>(parent.pattern_joint.size());
      if (patterns > opts.alphabet_cap)
        fail(ErrorKind::kData, "growth stall at level " + std::to_string(level) + ": " +
                                   std::to_string(patterns) + " patterns exceed the cap of " +
                                   std::to_string(opts.alphabet_cap));
      std::vector<int> identity(k), count(k, 0);
      std::iota(identity.begin(), identity.end(), 0);
      for (int c : jc.codes) ++count[c];
      if (raw_level) {
        add_observations(l, items, members, jc, identity, opts.floor);
      } else {
        add_links(p, items, members, jc, count, protos, opts.strides[level - 1], opts.floor);
      }
      protos.push_back(std::move(p));
      parent.proto = static_cast<int>(protos.size()) - 1;
      parent.alphabet = patterns;
      next.push_back(std::move(parent));
      info.states.push_back(k);
      info.paths.push_back(static_cast<int>(table.size()));
      info.patterns.push_back(patterns);
    }
    res.levels.push_back(std::move(info));
    items = std::move(next);
  }

  // emit top-down
  std::vector<int> order = {top};
  std::vector<int> index_of(protos.size(), -1);
  index_of[top] = 0;
  res.graph.layers.push_back(protos[top].layer);
  for (std::size_t q = 0; q < order.size(); ++q) {
    const Proto& p = protos[order[q]];
    for (std::size_t c = 0; c < p.children.size(); ++c) {
      const int child = p.children[c];
      LinkTable t = p.links[c];
      t.child_init_prior = DirichletCounts::filled(t.child_init.outcomes(), t.child_init.configs(),
                                                   opts.floor);
      index_of[child] = compose(res.graph, index_of[order[q]], protos[child].layer, std::move(t),
                                p.strides[c]);
      order.push_back(child);
    }
  }
  res.graph.validate();
  return res;
}

std::vector<std::vector<int>> graph_channels(const ModelGraph& graph, const GraphSample& sample) {
  std::map<int, std::vector<int>> out;
  for (int i = 0; i < graph.size(); ++i) {
    if (!is_discrete(graph.layers[i])) continue;
    const HmmLayer& l = std::get<HmmLayer>(graph.layers[i]);
    for (int m = 0; m < l.num_modalities(); ++m) {
      const std::string& name = m < static_cast<int>(l.shape.modality_names.size())
                                    ? l.shape.modality_names[m]
                                    : std::string();
      require(name.rfind("ch", 0) == 0, ErrorKind::kConfig,
              "layer " + std::to_string(i) + " modality is not named ch<index>");
      const int c = std::stoi(name.substr(2));
      const Eigen::MatrixXi& sym = sample.layers[i].symbols;
      std::vector<int> v(sym.rows());
      for (Eigen::Index t = 0; t < sym.rows(); ++t) v[t] = sym(t, m);
      out[c] = std::move(v);
    }
  }
  std::vector<std::vector<int>> res;
  int expect = 0;
  for (auto& [c, v] : out) {
    require(c == expect++, ErrorKind::kConfig, "channel indices are not contiguous");
    res.push_back(std::move(v));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Depth search

std::string depth_key(const DepthConfig& d) {
  std::string s = "L" + std::to_string(d.hierarchical);
  auto list = [&](char tag, const std::vector<int>& v) {
    s += ':';
    s += tag;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  };
  list('T', d.temporal);
  list('F', d.factorial);
  list('G', d.generalized);
  return s;
}

ModelGraph build_skeleton(const DepthConfig& depth, const std::vector<int>& num_obs,
                          const SkeletonOptions& opts) {
  depth.validate();
  require(opts.states >= 1 && opts.path_states >= 1, ErrorKind::kConfig,
          "skeleton sizes must be >= 1");
  require(!num_obs.empty(), ErrorKind::kConfig, "skeleton needs at least one modality");
  auto make_layer = [&](int i, bool leaf) {
    const int f = depth.factorial[i];
    const int k = std::max(2, static_cast<int>(std::lround(std::pow(opts.states, 1.0 / f))));
    HmmShape s;
    for (int j = 0; j < f; ++j) {
      std::vector<int> orders = {k};
      for (int g = 1; g < depth.generalized[i]; ++g) orders.push_back(opts.path_states);
      s.order_states.push_back(orders);
    }
    if (leaf) {
      s.num_obs = num_obs;
      for (std::size_t m = 0; m < num_obs.size(); ++m) s.modality_names.push_back("ch" + std::to_string(m));
    }
    return HmmLayer::make(s, opts.prior_count);
  };
  const int n = depth.hierarchical;
  ModelGraph g = ModelGraph::single(make_layer(0, n == 1));
  for (int i = 1; i < n; ++i) {
    const HmmLayer child = make_layer(i, i == n - 1);
    const int jp = link_parent_size(g.layers[i - 1]);
    compose(g, i - 1, child,
            LinkTable::discrete(child.latent_space().size(), jp, opts.prior_count),
            depth.temporal[i]);
  }
  return g;
}

namespace {

int graph_parameters(const ModelGraph& g) {
  int n = 0;
  for (const auto& l : g.layers) n += std::get<HmmLayer>(l).parameter_count();
  for (const auto& link : g.links)
    n += (link.table.child_init.outcomes() - 1) * link.table.child_init.configs();
  return n;
}

CandidateScore evaluate_candidate(const std::vector<DiscreteSequence>& data,
                                  const std::vector<int>& num_obs, const DepthConfig& depth,
                                  const DepthSearchOptions& opts) {
  CandidateScore cs;
  cs.depth = depth;
  cs.key = depth_key(depth);
  const auto start = std::chrono::steady_clock::now();
  try {
    const ModelGraph skeleton = build_skeleton(depth, num_obs, opts.skeleton);
    cs.parameters = graph_parameters(skeleton);
    const int leaf = skeleton.size() - 1;
    double symbols = 0.0;
    for (const auto& s : data)
      symbols += static_cast<double>((s.obs.array() >= 0).count());
    require(symbols > 0.0, ErrorKind::kData, "depth search needs observed symbols");
    Rng rng = Rng::stream(opts.seed ^ Rng::fnv1a(cs.key), "structure:search");
    double best = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < opts.restarts; ++r) {
      ModelGraph g = skeleton;
      for (auto& l : g.layers) l = perturb_counts(std::get<HmmLayer>(l), rng, opts.perturbation);
      for (auto& link : g.links)
        for (Eigen::Index j = 0; j < link.table.child_init.counts.cols(); ++j)
          for (Eigen::Index i = 0; i < link.table.child_init.counts.rows(); ++i)
            link.table.child_init.counts(i, j) += opts.perturbation * rng.uniform();
      double elbo;
      if (g.size() == 1) {
        elbo = vb_learn(std::get<HmmLayer>(g.layers[0]), data, opts.sweeps).elbo.back();
      } else {
        std::vector<std::vector<LayerData>> gd;
        for (const auto& s : data) {
          std::vector<LayerData> v(g.size());
          v[leaf] = s;
          gd.push_back(std::move(v));
        }
        elbo = vb_learn_graph(g, gd, opts.sweeps).elbo.back();
      }
      require(std::isfinite(elbo), ErrorKind::kNumerical, "non-finite ELBO");
      best = std::max(best, elbo);
    }
    cs.elbo = best;
    cs.score = best / symbols;
  } catch (const Error& e) {
    cs.failed = true;
    cs.error = e.what();
  }
  cs.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cs;
}

bool ranks_before(const CandidateScore& a, const CandidateScore& b) {
  if (a.failed != b.failed) return !a.failed;
  if (!a.failed) {
    const double tol = 1e-9 * std::max(1.0, std::max(std::abs(a.score), std::abs(b.score)));
    if (std::abs(a.score - b.score) > tol) return a.score > b.score;
    const int da = a.depth.total_depth(), db = b.depth.total_depth();
    if (da != db) return da < db;
  }
  return a.key < b.key;
}

}  // namespace

DepthSearchResult depth_search(const std::vector<DiscreteSequence>& data,
                               const std::vector<int>& num_obs,
                               const std::vector<DepthConfig>& candidates,
                               const DepthSearchOptions& opts) {
  require(!candidates.empty(), ErrorKind::kConfig, "depth search needs at least one candidate");
  require(!data.empty(), ErrorKind::kData, "depth search needs data");
  require(opts.sweeps >= 1 && opts.restarts >= 1 && opts.jobs >= 1, ErrorKind::kConfig,
          "sweeps, restarts and jobs must be >= 1");
  DepthSearchResult res;
  res.candidates.resize(candidates.size());
  for (std::size_t start = 0; start < candidates.size(); start += opts.jobs) {
    const std::size_t stop = std::min(candidates.size(), start + static_cast<std::size_t>(opts.jobs));
    if (opts.jobs == 1) {
      res.candidates[start] = evaluate_candidate(data, num_obs, candidates[start], opts);
      continue;
    }
    std::vector<std::future<CandidateScore>> futs;
    for (std::size_t i = start; i < stop; ++i)
      futs.push_back(std::async(std::launch::async, evaluate_candidate, std::cref(data),
                                std::cref(num_obs), std::cref(candidates[i]), std::cref(opts)));
    for (std::size_t i = start; i < stop; ++i) res.candidates[i] = futs[i - start].get();
  }
  std::sort(res.candidates.begin(), res.candidates.end(), ranks_before);
  require(!res.candidates[0].failed, ErrorKind::kNumerical,
          "every depth candidate failed: " + res.candidates[0].error);
  res.selected = 0;
  if (res.candidates.size() > 1 && !res.candidates[1].failed)
    res.margin = res.candidates[0].score - res.candidates[1].score;
  return res;
}

}  // namespace wmb

#include "wmb/composition.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "wmb/error.hpp"

namespace wmb {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

const HmmLayer& hmm(const Layer& l) { return std::get<HmmLayer>(l); }
const SldsLayer& slds(const Layer& l) { return std::get<SldsLayer>(l); }

Eigen::MatrixXd link_matrix(const LinkTable& t, ParamMode mode) {
  if (mode == ParamMode::kMean) return t.child_init.mean();
  return dirichlet_expected_log(t.child_init).array().exp().matrix();
}

/// log(M^T exp(v)) computed stably.
Eigen::VectorXd log_mat_t_exp(const Eigen::MatrixXd& m, const Eigen::VectorXd& v) {
  const double mx = v.maxCoeff();
  require(std::isfinite(mx), ErrorKind::kNumerical, "child window has zero likelihood");
  const Eigen::VectorXd e = (v.array() - mx).exp().matrix();
  return ((m.transpose() * e).array().log() + mx).matrix();
}

DiscreteSequence window_of(const DiscreteSequence& seq, int start, int len) {
  DiscreteSequence w;
  w.obs = seq.obs.middleRows(start, len);
  if (!seq.actions.empty())
    w.actions.assign(seq.actions.begin() + start, seq.actions.begin() + start + len - 1);
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Links and graphs

LinkTable LinkTable::discrete(int child_joint, int parent_joint, double prior_count) {
  LinkTable t;
  t.kind = LinkKind::kDiscreteDiscrete;
  t.child_init = DirichletCounts::filled(child_joint, parent_joint, prior_count);
  t.child_init_prior = t.child_init;
  return t;
}

LinkTable LinkTable::to_continuous(std::vector<GaussianBelief> state_init,
                                   std::vector<CategoricalBelief> switch_init) {
  LinkTable t;
  t.kind = LinkKind::kDiscreteContinuous;
  t.state_init = std::move(state_init);
  t.switch_init = std::move(switch_init);
  return t;
}

LinkTable LinkTable::affine(Eigen::MatrixXd map, Eigen::VectorXd offset, Eigen::MatrixXd noise) {
  LinkTable t;
  t.kind = LinkKind::kContinuousContinuous;
  t.map = std::move(map);
  t.offset = std::move(offset);
  t.noise = std::move(noise);
  return t;
}

int DepthConfig::total_depth() const {
  int s = hierarchical;
  for (int f : factorial) s += f;
  for (int g : generalized) s += g;
  return s;
}

void DepthConfig::validate() const {
  require(hierarchical >= 1, ErrorKind::kConfig, "hierarchical depth must be >= 1");
  const auto n = static_cast<std::size_t>(hierarchical);
  require(temporal.size() == n && factorial.size() == n && generalized.size() == n,
          ErrorKind::kConfig, "depth entries must be given for every layer");
  for (std::size_t i = 0; i < n; ++i)
    require(temporal[i] >= 1 && factorial[i] >= 1 && generalized[i] >= 1, ErrorKind::kConfig,
            "depth entries must be >= 1");
}

ModelGraph ModelGraph::single(Layer layer) {
  ModelGraph g;
  g.layers.push_back(std::move(layer));
  g.validate();
  return g;
}

int ModelGraph::parent_link(int layer) const {
  for (std::size_t i = 0; i < links.size(); ++i)
    if (links[i].lower == layer) return static_cast<int>(i);
  return -1;
}

std::vector<int> ModelGraph::child_links(int layer) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < links.size(); ++i)
    if (links[i].upper == layer) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> ModelGraph::leaves() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (child_links(i).empty()) out.push_back(i);
  return out;
}

int ModelGraph::steps_per_root(int layer) const {
  int s = 1;
  for (int l = parent_link(layer); l >= 0; l = parent_link(links[l].upper)) s *= links[l].stride;
  return s;
}

DepthConfig ModelGraph::depth() const {
  DepthConfig d;
  d.hierarchical = size();
  for (int i = 0; i < size(); ++i) {
    const int pl = parent_link(i);
    d.temporal.push_back(pl < 0 ? 1 : links[pl].stride);
    if (is_discrete(layers[i])) {
      const HmmLayer& h = hmm(layers[i]);
      int g = 1;
      for (int f = 0; f < h.num_factors(); ++f) g = std::max(g, h.num_orders(f));
      d.factorial.push_back(h.num_factors());
      d.generalized.push_back(g);
    } else {
      d.factorial.push_back(1);
      d.generalized.push_back(1);
    }
  }
  return d;
}

int link_parent_size(const Layer& upper) {
  if (is_discrete(upper)) return hmm(upper).latent_space().size();
  return slds(upper).state_dim;
}

namespace {

void validate_link(const Layer& upper, const Layer& lower, const Link& link) {
  require(link.stride >= 1, ErrorKind::kConfig, "link stride must be >= 1");
  const LinkTable& t = link.table;
  if (!is_discrete(upper) && is_discrete(lower))
    fail(ErrorKind::kConfig, "continuous -> discrete links are not supported");
  if (is_discrete(upper) && is_discrete(lower)) {
    require(t.kind == LinkKind::kDiscreteDiscrete, ErrorKind::kConfig,
            "discrete -> discrete link needs a discrete link table");
    const int jc = hmm(lower).latent_space().size();
    const int jp = hmm(upper).latent_space().size();
    require(t.child_init.outcomes() == jc && t.child_init.configs() == jp, ErrorKind::kShape,
            "link table must be (child joint x parent joint)");
    require(t.child_init_prior.outcomes() == jc && t.child_init_prior.configs() == jp,
            ErrorKind::kShape, "link prior must match the link table");
    require((t.child_init.counts.array() > 0.0).all(), ErrorKind::kPrecondition,
            "link counts must be positive");
  } else if (is_discrete(upper)) {
    require(t.kind == LinkKind::kDiscreteContinuous, ErrorKind::kConfig,
            "discrete -> continuous link needs per-state initial conditions");
    const int jp = hmm(upper).latent_space().size();
    const SldsLayer& c = slds(lower);
    require(static_cast<int>(t.state_init.size()) == jp &&
                static_cast<int>(t.switch_init.size()) == jp,
            ErrorKind::kShape, "link needs one initial condition per parent state");
    for (int z = 0; z < jp; ++z) {
      require(t.state_init[z].dim() == c.state_dim, ErrorKind::kShape,
              "link initial state has the wrong dimension");
      require(t.switch_init[z].size() == c.num_modes, ErrorKind::kShape,
              "link initial switch has the wrong size");
    }
  } else {
    require(t.kind == LinkKind::kContinuousContinuous, ErrorKind::kConfig,
            "continuous -> continuous link needs an affine map");
    const int dp = slds(upper).state_dim, dc = slds(lower).state_dim;
    require(t.map.rows() == dc && t.map.cols() == dp && t.offset.size() == dc &&
                t.noise.rows() == dc && t.noise.cols() == dc,
            ErrorKind::kShape, "affine link has the wrong shape");
    Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(t.noise));
    require(llt.info() == Eigen::Success, ErrorKind::kPrecondition,
            "affine link noise must be positive-definite");
  }
}

}  // namespace

void ModelGraph::validate() const {
  require(!layers.empty(), ErrorKind::kConfig, "graph has no layers");
  for (const auto& l : layers) std::visit([](const auto& x) { x.validate(); }, l);
  std::vector<int> parents(layers.size(), 0);
  for (const auto& link : links) {
    require(link.upper >= 0 && link.upper < size() && link.lower > 0 && link.lower < size(),
            ErrorKind::kConfig, "link refers to a missing layer");
    require(link.upper < link.lower, ErrorKind::kConfig, "layers must be ordered parent first");
    require(++parents[link.lower] == 1, ErrorKind::kConfig, "a layer has more than one parent");
    validate_link(layers[link.upper], layers[link.lower], link);
  }
  for (int i = 1; i < size(); ++i)
    require(parents[i] == 1, ErrorKind::kConfig, "every non-root layer needs one parent link");
}

int compose(ModelGraph& graph, int upper, Layer lower, LinkTable link, int stride) {
  require(upper >= 0 && upper < graph.size(), ErrorKind::kConfig, "upper layer index out of range");
  Link l{upper, graph.size(), std::move(link), stride};
  std::visit([](const auto& x) { x.validate(); }, lower);
  validate_link(graph.layers[upper], lower, l);
  graph.layers.push_back(std::move(lower));
  graph.links.push_back(std::move(l));
  return graph.size() - 1;
}

ModelGraph compose(Layer upper, Layer lower, LinkTable link, int stride) {
  ModelGraph g = ModelGraph::single(std::move(upper));
  compose(g, 0, std::move(lower), std::move(link), stride);
  return g;
}

// ---------------------------------------------------------------------------
// Generation

GraphSample generate(const ModelGraph& graph, int top_horizon, std::uint64_t seed,
                     const GraphInputs& inputs) {
  graph.validate();
  require(top_horizon >= 1, ErrorKind::kPrecondition, "top horizon must be >= 1");
  const int n = graph.size();
  GraphSample out;
  out.layers.resize(n);

  auto policy_of = [&](int i) {
    auto it = inputs.actions.find(i);
    return it == inputs.actions.end() ? ActionPolicy{} : it->second;
  };
  auto controls_of = [&](int i, int horizon) {
    const SldsLayer& l = slds(graph.layers[i]);
    auto it = inputs.controls.find(i);
    if (l.control_dim == 0) return Eigen::MatrixXd(0, 0);
    require(it != inputs.controls.end(), ErrorKind::kConfig,
            "missing controls for controllable layer " + std::to_string(i));
    require(it->second.rows() >= horizon - 1 && it->second.cols() == l.control_dim,
            ErrorKind::kShape, "controls for layer " + std::to_string(i) + " have the wrong shape");
    return it->second;
  };

  // root
  if (is_discrete(graph.layers[0])) {
    const RolloutSample r = generalized_rollout(hmm(graph.layers[0]), top_horizon, policy_of(0), seed);
    out.layers[0].joint = r.joint;
    out.layers[0].symbols = r.obs;
    out.layers[0].actions = r.actions;
  } else {
    out.layers[0].continuous = simulate(slds(graph.layers[0]), top_horizon,
                                        controls_of(0, top_horizon), seed);
  }

  for (int i = 1; i < n; ++i) {
    Rng rng = Rng::stream(seed, "composition:layer" + std::to_string(i));
    const Link& link = graph.links[graph.parent_link(i)];
    const LayerSample& parent = out.layers[link.upper];
    const int tau = link.stride;
    const int t_parent = top_horizon * graph.steps_per_root(link.upper);
    const int horizon = t_parent * tau;
    LayerSample& ls = out.layers[i];

    if (is_discrete(graph.layers[i])) {
      const HmmLayer& child = hmm(graph.layers[i]);
      const ActionPolicy policy = policy_of(i);
      if (child.is_controllable())
        require(!policy.empty(), ErrorKind::kConfig,
                "missing actions for controllable layer " + std::to_string(i));
      const Eigen::MatrixXd lmat = link.table.child_init.mean();
      ls.symbols.resize(horizon, child.num_modalities());
      int z = 0;
      for (int p = 0; p < t_parent; ++p) {
        for (int k = 0; k < tau; ++k) {
          const int t = p * tau + k;
          if (k == 0) {
            if (t > 0 && child.is_controllable()) ls.actions.push_back(0);
            z = rng.categorical(lmat.col(parent.joint[p]));
          } else {
            int a = 0;
            if (child.is_controllable()) {
              a = policy.action(t - 1, rng);
              require(a >= 0 && a < child.shape.num_actions, ErrorKind::kConfig,
                      "policy produced an out-of-range action");
              ls.actions.push_back(a);
            }
            z = sample_next_joint(child, z, a, rng);
          }
          ls.joint.push_back(z);
          ls.symbols.row(t) = sample_observation(child, z, rng).transpose();
        }
      }
    } else {
      const SldsLayer& child = slds(graph.layers[i]);
      const Eigen::MatrixXd controls = controls_of(i, horizon);
      SldsSample& cs = ls.continuous;
      cs.states.resize(horizon, child.state_dim);
      cs.obs.resize(horizon, child.obs_dim);
      int s = 0;
      Eigen::VectorXd x;
      for (int p = 0; p < t_parent; ++p) {
        for (int k = 0; k < tau; ++k) {
          const int t = p * tau + k;
          if (k == 0) {
            if (link.table.kind == LinkKind::kDiscreteContinuous) {
              const int z = parent.joint[p];
              s = rng.categorical(link.table.switch_init[z].probs);
              x = rng.gaussian(link.table.state_init[z].mean, link.table.state_init[z].cov);
            } else {
              const Eigen::VectorXd xp = parent.continuous.states.row(p).transpose();
              s = rng.categorical(child.switch_init.probs);
              x = rng.gaussian(link.table.map * xp + link.table.offset, link.table.noise);
            }
          } else {
            s = sample_switch(child, s, x, rng);
            const Eigen::VectorXd u = child.control_dim > 0
                                          ? Eigen::VectorXd(controls.row(t - 1).transpose())
                                          : Eigen::VectorXd();
            x = sample_state(child, s, x, u, rng);
          }
          cs.modes.push_back(s);
          cs.states.row(t) = x.transpose();
          cs.obs.row(t) = sample_emission(child, x, rng).transpose();
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

int infer_root_length(const ModelGraph& graph, const std::vector<LayerData>& data) {
  require(static_cast<int>(data.size()) == graph.size(), ErrorKind::kShape,
          "need one data entry per layer");
  int root = -1;
  for (int i = 0; i < graph.size(); ++i) {
    int len = -1;
    if (const auto* d = std::get_if<DiscreteSequence>(&data[i])) len = d->length();
    if (const auto* c = std::get_if<SldsSequence>(&data[i])) len = c->length();
    if (len < 0) continue;
    const int per = graph.steps_per_root(i);
    require(len % per == 0 && len > 0, ErrorKind::kShape,
            "length of layer " + std::to_string(i) + " data is not a multiple of its stride product");
    if (root < 0) root = len / per;
    require(root == len / per, ErrorKind::kShape, "layer data lengths disagree with the strides");
  }
  require(root > 0, ErrorKind::kShape, "no layer has data");
  return root;
}

namespace {

class GraphInference {
 public:
  GraphInference(const ModelGraph& graph, const std::vector<LayerData>& data,
                 const HierarchicalOptions& opts)
      : g_(graph), opts_(opts) {
    g_.validate();
    t_root_ = infer_root_length(graph, data);
    const int n = g_.size();
    dseq_.resize(n);
    cseq_.resize(n);
    kernels_.resize(n);
    extra_.resize(n);
    vi_.resize(n);
    post_.discrete.resize(n);
    post_.continuous.resize(n);
    post_.link_stats.resize(g_.links.size());
    lam_.resize(g_.links.size());
    window_ll_.resize(g_.links.size());
    lmat_.resize(g_.links.size());
    for (int i = 0; i < n; ++i) {
      const int len = t_root_ * g_.steps_per_root(i);
      if (is_discrete(g_.layers[i])) {
        const HmmLayer& l = hmm(g_.layers[i]);
        if (const auto* d = std::get_if<DiscreteSequence>(&data[i])) {
          dseq_[i] = *d;
        } else {
          require(std::holds_alternative<std::monostate>(data[i]), ErrorKind::kConfig,
                  "layer " + std::to_string(i) + " is discrete but got continuous data");
          require(!l.is_controllable(), ErrorKind::kConfig,
                  "missing actions for controllable layer " + std::to_string(i));
          dseq_[i].obs = Eigen::MatrixXi::Constant(len, l.num_modalities(), -1);
        }
        check_sequence(l, dseq_[i]);
        kernels_[i] = std::make_unique<HmmKernel>(l, opts_.mode);
        if (g_.size() > 1)
          require(kernels_[i]->joint_size() <= InferenceOptions{}.exact_cap, ErrorKind::kConfig,
                  "hierarchical inference needs exact discrete layers (layer " +
                      std::to_string(i) + ")");
      } else {
        const SldsLayer& l = slds(g_.layers[i]);
        if (const auto* c = std::get_if<SldsSequence>(&data[i])) {
          cseq_[i] = *c;
        } else {
          require(std::holds_alternative<std::monostate>(data[i]), ErrorKind::kConfig,
                  "layer " + std::to_string(i) + " is continuous but got discrete data");
          require(l.control_dim == 0, ErrorKind::kConfig,
                  "missing controls for controllable layer " + std::to_string(i));
          cseq_[i].obs = Eigen::MatrixXd::Constant(len, l.obs_dim,
                                                   std::numeric_limits<double>::quiet_NaN());
        }
        check_sequence(l, cseq_[i]);
      }
    }
    for (std::size_t k = 0; k < g_.links.size(); ++k)
      if (g_.links[k].table.kind == LinkKind::kDiscreteDiscrete)
        lmat_[k] = link_matrix(g_.links[k].table, opts_.mode);
  }

  GraphPosterior run(int sweeps) {
    require(sweeps >= 1, ErrorKind::kPrecondition, "hierarchical_infer needs sweeps >= 1");
    const bool root_discrete = is_discrete(g_.layers[0]);
    if (g_.size() == 1) return run_single(sweeps);
    for (int s = 0; s < sweeps; ++s) {
      for (int i = 0; i < g_.size(); ++i)
        if (!is_discrete(g_.layers[i])) update_continuous(i);
      if (root_discrete) discrete_pass();
      const double e = total_elbo();
      require(std::isfinite(e), ErrorKind::kNumerical,
              "non-finite ELBO at sweep " + std::to_string(s));
      post_.elbo.push_back(e);
    }
    for (int i = 0; i < g_.size(); ++i)
      if (vi_[i]) post_.continuous[i] = vi_[i]->trajectory();
    return std::move(post_);
  }

  double root_log_evidence() const { return root_logz_; }

 private:
  GraphPosterior run_single(int sweeps) {
    if (is_discrete(g_.layers[0])) {
      InferenceOptions io;
      io.mode = opts_.mode;
      post_.discrete[0] = forward_backward(hmm(g_.layers[0]), dseq_[0], io);
      root_logz_ = post_.discrete[0].log_evidence;
      post_.elbo.assign(sweeps, root_logz_);
    } else {
      StructuredVi vi(slds(g_.layers[0]), cseq_[0]);
      for (int s = 0; s < sweeps; ++s) {
        for (int k = 0; k < opts_.vi_iters; ++k) vi.iterate();
        post_.elbo.push_back(vi.trajectory().final_elbo());
      }
      post_.continuous[0] = vi.trajectory();
    }
    return std::move(post_);
  }

  int length(int i) const { return t_root_ * g_.steps_per_root(i); }

  // -- continuous layers ----------------------------------------------------

  SldsContext context_for(int i) const {
    SldsContext ctx;
    const SldsLayer& me = slds(g_.layers[i]);
    const int pl = g_.parent_link(i);
    if (pl >= 0) {
      const Link& link = g_.links[pl];
      const int tau = link.stride;
      const int tp = length(link.upper);
      if (link.table.kind == LinkKind::kDiscreteContinuous) {
        const int jp = static_cast<int>(link.table.state_init.size());
        const bool have = post_.discrete[link.upper].length() > 0;
        for (int n = 0; n < tp; ++n) {
          Restart r;
          r.t = n * tau;
          r.priors = link.table.state_init;
          r.switch_log_prior = Eigen::VectorXd::Zero(me.num_modes);
          for (int z = 0; z < jp; ++z) {
            const double w = have ? post_.discrete[link.upper].joint_marginals(z, n) : 1.0 / jp;
            r.weights.push_back(w);
            if (w > 0.0)
              r.switch_log_prior += w * link.table.switch_init[z].probs.array().log().matrix();
          }
          ctx.restarts.push_back(std::move(r));
        }
      } else if (vi_[link.upper]) {
        const HybridTrajectory& q = vi_[link.upper]->trajectory();
        const Eigen::MatrixXd qinv = stabilize_cov(link.table.noise).inverse();
        for (int n = 0; n < tp; ++n) {
          Restart r;
          r.t = n * tau;
          r.weights = {1.0};
          r.priors = {GaussianBelief(link.table.map * q.means.col(n) + link.table.offset,
                                     link.table.noise)};
          r.switch_log_prior = me.switch_init.probs.array().log().matrix();
          r.offset = -0.5 * (qinv.cwiseProduct(link.table.map * q.covs[n] *
                                               link.table.map.transpose())).sum();
          ctx.restarts.push_back(std::move(r));
        }
      }
    }
    for (int cl : g_.child_links(i)) {
      const Link& link = g_.links[cl];
      if (!vi_[link.lower]) continue;
      const HybridTrajectory& q = vi_[link.lower]->trajectory();
      const Eigen::MatrixXd qinv = stabilize_cov(link.table.noise).inverse();
      for (int n = 0; n < length(i); ++n) {
        const int t = n * link.stride;
        GaussianEvidence ev;
        ev.t = n;
        ev.c = link.table.map;
        ev.y = q.means.col(t) - link.table.offset;
        ev.r = link.table.noise;
        ev.offset = -0.5 * (qinv.cwiseProduct(q.covs[t])).sum();
        ctx.evidence.push_back(std::move(ev));
      }
    }
    return ctx;
  }

  void update_continuous(int i) {
    SldsContext ctx = context_for(i);
    if (!vi_[i]) {
      vi_[i] = std::make_unique<StructuredVi>(slds(g_.layers[i]), cseq_[i], std::move(ctx));
    } else {
      vi_[i]->set_context(std::move(ctx));
    }
    for (int k = 0; k < opts_.vi_iters; ++k) {
      try {
        vi_[i]->iterate();
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kNumerical)
          fail(ErrorKind::kNumerical, "layer " + std::to_string(i) + ": " + e.what());
        throw;
      }
    }
  }

  /// Expected log density of the child's window start under every parent state.
  Eigen::MatrixXd continuous_lambda(int link_index) const {
    const Link& link = g_.links[link_index];
    const HybridTrajectory& q = vi_[link.lower]->trajectory();
    const int tp = length(link.upper);
    const int jp = static_cast<int>(link.table.state_init.size());
    Eigen::MatrixXd lam(jp, tp);
    for (int n = 0; n < tp; ++n) {
      const int t = n * link.stride;
      const GaussianBelief x = q.state(t);
      for (int z = 0; z < jp; ++z)
        lam(z, n) = expected_log_normal(x, link.table.state_init[z]) +
                    q.switch_marginals.col(t).dot(
                        link.table.switch_init[z].probs.array().log().matrix());
    }
    return lam;
  }

  // -- discrete subtree -----------------------------------------------------

  void upward(int i) {
    extra_[i] = Eigen::MatrixXd::Zero(kernels_[i]->joint_size(), length(i));
    for (int cl : g_.child_links(i)) {
      const Link& link = g_.links[cl];
      const int c = link.lower;
      const int tau = link.stride;
      if (is_discrete(g_.layers[c])) {
        upward(c);
        Eigen::MatrixXd ll(kernels_[c]->joint_size(), length(i));
        lam_[cl].resize(kernels_[i]->joint_size(), length(i));
        for (int n = 0; n < length(i); ++n) {
          const DiscreteSequence w = window_of(dseq_[c], n * tau, tau);
          const Eigen::MatrixXd ex = extra_[c].middleCols(n * tau, tau);
          ll.col(n) = initial_state_loglik(*kernels_[c], w, &ex);
          lam_[cl].col(n) = log_mat_t_exp(lmat_[cl], ll.col(n));
        }
        window_ll_[cl] = std::move(ll);
      } else {
        lam_[cl] = vi_[c] ? continuous_lambda(cl)
                          : Eigen::MatrixXd::Zero(kernels_[i]->joint_size(), length(i));
      }
      extra_[i] += lam_[cl];
    }
  }

  void downward(int i) {
    const DiscreteTrajectory& qp = post_.discrete[i];
    for (int cl : g_.child_links(i)) {
      const Link& link = g_.links[cl];
      const int c = link.lower;
      if (!is_discrete(g_.layers[c])) continue;
      const int tau = link.stride;
      const HmmKernel& kc = *kernels_[c];
      const int jc = kc.joint_size();
      const int jp = kernels_[i]->joint_size();
      DiscreteTrajectory out;
      const int nf = kc.num_factors();
      const int len = length(c);
      out.factor_marginals.resize(nf);
      out.factor_pairwise.resize(nf);
      for (int f = 0; f < nf; ++f) {
        out.factor_marginals[f].resize(kc.factor_size(f), len);
        out.factor_pairwise[f].resize(std::max(0, len - 1));
      }
      out.obs_marginals.resize(hmm(g_.layers[c]).obs_column_space().size(), len);
      out.joint_marginals.resize(jc, len);
      out.log_evidence = root_logz_;
      Eigen::MatrixXd stats = Eigen::MatrixXd::Zero(jc, jp);
      for (int n = 0; n < length(i); ++n) {
        Eigen::VectorXd logcav(jp);
        for (int z = 0; z < jp; ++z) {
          const double q = qp.joint_marginals(z, n);
          logcav[z] = q > 0.0 ? std::log(q) - lam_[cl](z, n) : kNegInf;
        }
        normalize_log_weights(logcav);
        const Eigen::VectorXd prior = lmat_[cl] * logcav;
        const DiscreteSequence w = window_of(dseq_[c], n * tau, tau);
        const Eigen::MatrixXd ex = extra_[c].middleCols(n * tau, tau);
        const DiscreteTrajectory wt = forward_backward(kc, w, &ex, &prior);
        const int t0 = n * tau;
        for (int f = 0; f < nf; ++f) {
          out.factor_marginals[f].middleCols(t0, tau) = wt.factor_marginals[f];
          for (int k = 0; k + 1 < tau; ++k) out.factor_pairwise[f][t0 + k] = wt.factor_pairwise[f][k];
          if (t0 > 0)
            out.factor_pairwise[f][t0 - 1] =
                out.factor_marginals[f].col(t0) * out.factor_marginals[f].col(t0 - 1).transpose();
        }
        out.obs_marginals.middleCols(t0, tau) = wt.obs_marginals;
        out.joint_marginals.middleCols(t0, tau) = wt.joint_marginals;

        // joint posterior of (child start, parent state) within this window
        const Eigen::VectorXd& ll = window_ll_[cl].col(n);
        const double mx = ll.maxCoeff();
        const Eigen::VectorXd e = (ll.array() - mx).exp().matrix();
        Eigen::MatrixXd joint = lmat_[cl].array().colwise() * e.array();
        joint = joint.array().rowwise() * logcav.transpose().array();
        const double s = joint.sum();
        if (s > 0.0) stats += joint / s;
      }
      post_.link_stats[cl] = std::move(stats);
      post_.discrete[c] = std::move(out);
      downward(c);
    }
  }

  void discrete_pass() {
    upward(0);
    post_.discrete[0] = forward_backward(*kernels_[0], dseq_[0], &extra_[0], nullptr);
    root_logz_ = post_.discrete[0].log_evidence;
    require(std::isfinite(root_logz_), ErrorKind::kNumerical, "layer 0: non-finite log evidence");
    downward(0);
  }

  // -- objective ------------------------------------------------------------

  double total_elbo() {
    double e = 0.0;
    if (is_discrete(g_.layers[0])) {
      e += root_logz_;
      for (std::size_t k = 0; k < g_.links.size(); ++k) {
        const Link& link = g_.links[k];
        if (link.table.kind != LinkKind::kDiscreteContinuous) continue;
        e -= post_.discrete[link.upper].joint_marginals.cwiseProduct(lam_[k]).sum();
      }
    }
    for (int i = 0; i < g_.size(); ++i) {
      if (!vi_[i]) continue;
      vi_[i]->set_context(context_for(i));
      const double v = vi_[i]->elbo();
      require(std::isfinite(v), ErrorKind::kNumerical,
              "layer " + std::to_string(i) + ": non-finite ELBO");
      e += v;
    }
    for (const Link& link : g_.links) {
      if (link.table.kind != LinkKind::kContinuousContinuous) continue;
      const HybridTrajectory& qp = vi_[link.upper]->trajectory();
      const HybridTrajectory& qc = vi_[link.lower]->trajectory();
      const Eigen::MatrixXd qinv = stabilize_cov(link.table.noise).inverse();
      const double logdet = log_det_spd(link.table.noise);
      const int d = static_cast<int>(link.table.noise.rows());
      for (int n = 0; n < length(link.upper); ++n) {
        const int t = n * link.stride;
        const Eigen::VectorXd r =
            qc.means.col(t) - link.table.map * qp.means.col(n) - link.table.offset;
        e += 0.5 * (d * kLog2Pi + logdet + r.dot(qinv * r) + qinv.cwiseProduct(qc.covs[t]).sum() +
                    qinv.cwiseProduct(link.table.map * qp.covs[n] * link.table.map.transpose())
                        .sum());
      }
    }
    return e;
  }

  const ModelGraph& g_;
  HierarchicalOptions opts_;
  int t_root_ = 0;
  std::vector<DiscreteSequence> dseq_;
  std::vector<SldsSequence> cseq_;
  std::vector<std::unique_ptr<HmmKernel>> kernels_;
  std::vector<Eigen::MatrixXd> extra_;
  std::vector<std::unique_ptr<StructuredVi>> vi_;
  std::vector<Eigen::MatrixXd> lam_;        // per link, parent joint x parent steps
  std::vector<Eigen::MatrixXd> window_ll_;  // per discrete link, child joint x parent steps
  std::vector<Eigen::MatrixXd> lmat_;
  GraphPosterior post_;
  double root_logz_ = 0.0;
};

}  // namespace

GraphPosterior hierarchical_infer(const ModelGraph& graph, const std::vector<LayerData>& data,
                                  int sweeps, const HierarchicalOptions& opts) {
  GraphInference inf(graph, data, opts);
  return inf.run(sweeps);
}

// ---------------------------------------------------------------------------
// Learning

GraphLearnResult vb_learn_graph(const ModelGraph& graph,
                                const std::vector<std::vector<LayerData>>& data, int sweeps) {
  graph.validate();
  require(sweeps >= 1, ErrorKind::kPrecondition, "vb_learn_graph needs sweeps >= 1");
  require(!data.empty(), ErrorKind::kData, "vb_learn_graph needs at least one sequence");
  for (const auto& l : graph.layers)
    require(is_discrete(l), ErrorKind::kConfig, "graph learning supports discrete layers only");

  GraphLearnResult res;
  res.graph = graph;
  HierarchicalOptions opts;
  opts.mode = ParamMode::kExpectedLog;
  for (int s = 0; s < sweeps; ++s) {
    ModelGraph next = res.graph;
    for (auto& l : next.layers) l = reset_to_prior(std::get<HmmLayer>(l));
    for (auto& link : next.links) link.table.child_init = link.table.child_init_prior;

    double elbo = 0.0;
    for (const auto& seqs : data) {
      const GraphPosterior post = hierarchical_infer(res.graph, seqs, 1, opts);
      elbo += post.final_elbo();
      for (int i = 0; i < graph.size(); ++i) {
        HmmLayer& layer = std::get<HmmLayer>(next.layers[i]);
        const int pl = graph.parent_link(i);
        DiscreteSequence seq;
        if (const auto* d = std::get_if<DiscreteSequence>(&seqs[i])) {
          seq = *d;
        } else {
          seq.obs = Eigen::MatrixXi::Constant(post.discrete[i].length(), layer.num_modalities(), -1);
        }
        std::vector<bool> skip;
        if (pl >= 0) {
          skip.assign(seq.length(), false);
          for (int t = 0; t < seq.length(); t += graph.links[pl].stride) skip[t] = true;
        }
        accumulate_counts(layer, post.discrete[i], seq, pl < 0, skip);
      }
      for (std::size_t k = 0; k < graph.links.size(); ++k)
        next.links[k].table.child_init.counts += post.link_stats[k];
    }
    for (const auto& l : res.graph.layers) elbo -= layer_kl(std::get<HmmLayer>(l));
    for (const auto& link : res.graph.links)
      elbo -= dirichlet_kl(link.table.child_init, link.table.child_init_prior);
    require(std::isfinite(elbo), ErrorKind::kNumerical,
            "non-finite ELBO at sweep " + std::to_string(s));
    res.elbo.push_back(elbo);
    res.graph = std::move(next);
  }
  return res;
}

}  // namespace wmb

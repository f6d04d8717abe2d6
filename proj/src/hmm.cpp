#include "wmb/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "wmb/error.hpp"

namespace wmb {

// ---------------------------------------------------------------------------
// JointSpace

JointSpace::JointSpace(std::vector<int> radices) : radices_(std::move(radices)) {
  strides_.resize(radices_.size());
  long long s = 1;
  for (std::size_t d = 0; d < radices_.size(); ++d) {
    require(radices_[d] >= 1, ErrorKind::kShape, "joint space radix must be >= 1");
    strides_[d] = static_cast<int>(s);
    s *= radices_[d];
    require(s <= (1LL << 30), ErrorKind::kShape, "joint space too large");
  }
  size_ = static_cast<int>(s);
}

int JointSpace::encode(const std::vector<int>& digits) const {
  int idx = 0;
  for (std::size_t d = 0; d < radices_.size(); ++d) idx += digits[d] * strides_[d];
  return idx;
}

std::vector<int> JointSpace::decode(int index) const {
  std::vector<int> out(radices_.size());
  for (std::size_t d = 0; d < radices_.size(); ++d) out[d] = digit(index, static_cast<int>(d));
  return out;
}

// ---------------------------------------------------------------------------
// HmmLayer

namespace {

int upper_size(const HmmShape& s, int f, int g) {
  const auto& orders = s.order_states[f];
  return g + 1 < static_cast<int>(orders.size()) ? orders[g + 1] : 1;
}

int trans_configs(const HmmShape& s, int f, int g) {
  const int act = s.controllable[f][g] ? s.num_actions : 1;
  return s.order_states[f][g] * upper_size(s, f, g) * act;
}

Eigen::MatrixXd table_params(const DirichletCounts& c, ParamMode mode) {
  if (mode == ParamMode::kMean) return c.mean();
  return dirichlet_expected_log(c).array().exp().matrix();
}

DirichletCounts from_probs(const Eigen::MatrixXd& probs, double concentration,
                           double floor) {
  require(probs.allFinite() && (probs.array() >= 0.0).all(), ErrorKind::kPrecondition,
          "probability table must be finite and nonnegative");
  return DirichletCounts((probs * concentration).array() + floor);
}

}  // namespace

HmmLayer HmmLayer::make(HmmShape shape, double prior_count) {
  require(!shape.order_states.empty(), ErrorKind::kConfig, "HMM needs >= 1 factor");
  const int nf = static_cast<int>(shape.order_states.size());
  if (shape.controllable.empty())
    for (int f = 0; f < nf; ++f)
      shape.controllable.emplace_back(shape.order_states[f].size(), false);
  if (shape.modality_names.empty())
    for (std::size_t m = 0; m < shape.num_obs.size(); ++m)
      shape.modality_names.push_back("o" + std::to_string(m));

  HmmLayer layer;
  layer.shape = std::move(shape);
  const HmmShape& s = layer.shape;
  require(static_cast<int>(s.controllable.size()) == nf, ErrorKind::kConfig,
          "controllable flags must list every factor");
  require(s.modality_names.size() == s.num_obs.size(), ErrorKind::kConfig,
          "one modality name per observation alphabet");

  layer.trans.resize(nf);
  layer.init.resize(nf);
  for (int f = 0; f < nf; ++f) {
    const int ng = static_cast<int>(s.order_states[f].size());
    require(ng >= 1, ErrorKind::kConfig, "each factor needs >= 1 generalized order");
    require(static_cast<int>(s.controllable[f].size()) == ng, ErrorKind::kConfig,
            "controllable flags must list every order");
    for (int g = 0; g < ng; ++g) {
      require(s.order_states[f][g] >= 1, ErrorKind::kConfig, "order size must be >= 1");
      if (s.controllable[f][g])
        require(s.num_actions >= 1, ErrorKind::kConfig,
                "controllable order declared without an action alphabet");
      layer.trans[f].push_back(
          DirichletCounts::filled(s.order_states[f][g], trans_configs(s, f, g), prior_count));
      layer.init[f].push_back(DirichletCounts::filled(s.order_states[f][g], 1, prior_count));
    }
  }
  const int cols = layer.obs_column_space().size();
  for (int n : s.num_obs) {
    require(n >= 1, ErrorKind::kConfig, "observation alphabet must be >= 1");
    layer.obs.push_back(DirichletCounts::filled(n, cols, prior_count));
  }
  layer.trans_prior = layer.trans;
  layer.init_prior = layer.init;
  layer.obs_prior = layer.obs;
  return layer;
}

bool HmmLayer::is_controllable() const {
  for (const auto& f : shape.controllable)
    for (bool c : f)
      if (c) return true;
  return false;
}

JointSpace HmmLayer::latent_space() const {
  std::vector<int> r;
  for (const auto& f : shape.order_states) r.insert(r.end(), f.begin(), f.end());
  return JointSpace(std::move(r));
}

JointSpace HmmLayer::factor_space(int f) const {
  return JointSpace(shape.order_states[f]);
}

JointSpace HmmLayer::obs_column_space() const {
  std::vector<int> r;
  for (const auto& f : shape.order_states) r.push_back(f[0]);
  return JointSpace(std::move(r));
}

int HmmLayer::trans_config(int f, int g, int prev, int upper_next, int action) const {
  const int k = shape.order_states[f][g];
  const int up = upper_size(shape, f, g);
  const int act = shape.controllable[f][g] ? action : 0;
  return prev + k * (upper_next + up * act);
}

void HmmLayer::set_transition(int f, int g, const Eigen::MatrixXd& probs,
                              double concentration, double floor) {
  require(probs.rows() == trans[f][g].outcomes() && probs.cols() == trans[f][g].configs(),
          ErrorKind::kShape, "set_transition: table shape mismatch");
  trans[f][g] = from_probs(probs, concentration, floor);
}

void HmmLayer::set_initial(int f, int g, const Eigen::VectorXd& probs,
                           double concentration, double floor) {
  require(probs.size() == init[f][g].outcomes(), ErrorKind::kShape,
          "set_initial: size mismatch");
  init[f][g] = from_probs(probs, concentration, floor);
}

void HmmLayer::set_observation(int m, const Eigen::MatrixXd& probs,
                               double concentration, double floor) {
  require(probs.rows() == obs[m].outcomes() && probs.cols() == obs[m].configs(),
          ErrorKind::kShape, "set_observation: table shape mismatch");
  obs[m] = from_probs(probs, concentration, floor);
}

double HmmLayer::total_counts() const {
  double t = 0.0;
  for (const auto& f : trans)
    for (const auto& c : f) t += c.total();
  for (const auto& f : init)
    for (const auto& c : f) t += c.total();
  for (const auto& c : obs) t += c.total();
  return t;
}

int HmmLayer::parameter_count() const {
  int n = 0;
  auto add = [&n](const DirichletCounts& c) { n += (c.outcomes() - 1) * c.configs(); };
  for (const auto& f : trans)
    for (const auto& c : f) add(c);
  for (const auto& f : init)
    for (const auto& c : f) add(c);
  for (const auto& c : obs) add(c);
  return n;
}

void HmmLayer::validate() const {
  const int nf = num_factors();
  require(static_cast<int>(trans.size()) == nf && static_cast<int>(init.size()) == nf,
          ErrorKind::kShape, "HMM tables do not match factor count");
  require(static_cast<int>(obs.size()) == num_modalities(), ErrorKind::kShape,
          "HMM observation tables do not match modality count");
  const int cols = obs_column_space().size();
  for (int f = 0; f < nf; ++f) {
    require(static_cast<int>(trans[f].size()) == num_orders(f), ErrorKind::kShape,
            "HMM transition tables do not match order count");
    for (int g = 0; g < num_orders(f); ++g) {
      require(trans[f][g].outcomes() == order_size(f, g) &&
                  trans[f][g].configs() == trans_configs(shape, f, g),
              ErrorKind::kShape, "HMM transition table has the wrong shape");
      require(init[f][g].outcomes() == order_size(f, g) && init[f][g].configs() == 1,
              ErrorKind::kShape, "HMM initial table has the wrong shape");
    }
  }
  for (int m = 0; m < num_modalities(); ++m)
    require(obs[m].outcomes() == shape.num_obs[m] && obs[m].configs() == cols,
            ErrorKind::kShape, "HMM observation table has the wrong shape");
}

// ---------------------------------------------------------------------------
// HmmKernel

HmmKernel::HmmKernel(const HmmLayer& layer, ParamMode mode) : layer_(&layer) {
  layer.validate();
  const int nf = layer.num_factors();
  for (int f = 0; f < nf; ++f) {
    const JointSpace fs = layer.factor_space(f);
    factor_sizes_.push_back(fs.size());
    order0_sizes_.push_back(layer.order_size(f, 0));
    joint_size_ *= fs.size();
    obs_cols_ *= layer.order_size(f, 0);

    bool controlled = false;
    for (int g = 0; g < layer.num_orders(f); ++g) controlled |= layer.order_controllable(f, g);
    const int variants = controlled ? layer.shape.num_actions : 1;

    std::vector<Eigen::MatrixXd> tables;
    for (int g = 0; g < layer.num_orders(f); ++g)
      tables.push_back(table_params(layer.trans[f][g], mode));

    std::vector<Eigen::MatrixXd> per_action;
    const int ng = layer.num_orders(f);
    for (int a = 0; a < variants; ++a) {
      Eigen::MatrixXd t(fs.size(), fs.size());
      for (int zp = 0; zp < fs.size(); ++zp) {
        for (int zn = 0; zn < fs.size(); ++zn) {
          double p = 1.0;
          for (int g = 0; g < ng && p != 0.0; ++g) {
            const int prev = fs.digit(zp, g);
            const int next = fs.digit(zn, g);
            const int up = g + 1 < ng ? fs.digit(zn, g + 1) : 0;
            p *= tables[g](next, layer.trans_config(f, g, prev, up, a));
          }
          t(zn, zp) = p;
        }
      }
      per_action.push_back(std::move(t));
    }
    trans_.push_back(std::move(per_action));

    Eigen::VectorXd iv(fs.size());
    std::vector<Eigen::MatrixXd> inits;
    for (int g = 0; g < ng; ++g) inits.push_back(table_params(layer.init[f][g], mode));
    for (int z = 0; z < fs.size(); ++z) {
      double p = 1.0;
      for (int g = 0; g < ng; ++g) p *= inits[g](fs.digit(z, g), 0);
      iv[z] = p;
    }
    init_.push_back(std::move(iv));
  }
  for (int m = 0; m < layer.num_modalities(); ++m) {
    obs_.push_back(table_params(layer.obs[m], mode));
    log_obs_.push_back(obs_.back().array().log().matrix());
  }
}

const Eigen::MatrixXd& HmmKernel::factor_transition(int f, int action) const {
  const auto& v = trans_[f];
  if (v.size() == 1) return v[0];
  require(action >= 0 && action < static_cast<int>(v.size()), ErrorKind::kData,
          "action index out of range");
  return v[action];
}

int HmmKernel::obs_column_of_joint(int z) const {
  int col = 0;
  int stride = 1;
  for (std::size_t f = 0; f < factor_sizes_.size(); ++f) {
    const int zf = z % factor_sizes_[f];
    z /= factor_sizes_[f];
    col += (zf % order0_sizes_[f]) * stride;
    stride *= order0_sizes_[f];
  }
  return col;
}

Eigen::VectorXd HmmKernel::initial_joint() const {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(1);
  for (std::size_t f = 0; f < init_.size(); ++f) {
    // factor 0 varies fastest: new = kron(init_f, v)
    Eigen::VectorXd out(v.size() * init_[f].size());
    for (Eigen::Index k = 0; k < init_[f].size(); ++k)
      out.segment(k * v.size(), v.size()) = init_[f][k] * v;
    v = std::move(out);
  }
  return v;
}

Eigen::VectorXd HmmKernel::apply_factors(const Eigen::VectorXd& v,
                                         const std::vector<const Eigen::MatrixXd*>& mats,
                                         bool transpose) const {
  Eigen::VectorXd cur = v;
  int inner = 1;
  for (std::size_t f = 0; f < factor_sizes_.size(); ++f) {
    const int jf = factor_sizes_[f];
    if (mats[f] != nullptr) {
      const int outer = joint_size_ / (inner * jf);
      Eigen::VectorXd next(cur.size());
      for (int o = 0; o < outer; ++o) {
        Eigen::Map<const Eigen::MatrixXd> x(cur.data() + static_cast<Eigen::Index>(o) * inner * jf,
                                            inner, jf);
        Eigen::Map<Eigen::MatrixXd> y(next.data() + static_cast<Eigen::Index>(o) * inner * jf,
                                      inner, jf);
        if (transpose)
          y.noalias() = x * (*mats[f]);
        else
          y.noalias() = x * mats[f]->transpose();
      }
      cur = std::move(next);
    }
    inner *= jf;
  }
  return cur;
}

Eigen::VectorXd HmmKernel::propagate(const Eigen::VectorXd& v, int action) const {
  std::vector<const Eigen::MatrixXd*> mats;
  for (int f = 0; f < num_factors(); ++f) mats.push_back(&factor_transition(f, action));
  return apply_factors(v, mats, false);
}

Eigen::VectorXd HmmKernel::propagate_transpose(const Eigen::VectorXd& v, int action) const {
  std::vector<const Eigen::MatrixXd*> mats;
  for (int f = 0; f < num_factors(); ++f) mats.push_back(&factor_transition(f, action));
  return apply_factors(v, mats, true);
}

Eigen::MatrixXd HmmKernel::dense_transition(int action) const {
  Eigen::MatrixXd t = Eigen::MatrixXd::Ones(1, 1);
  for (int f = 0; f < num_factors(); ++f) {
    const Eigen::MatrixXd& m = factor_transition(f, action);
    Eigen::MatrixXd out(t.rows() * m.rows(), t.cols() * m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        out.block(i * t.rows(), j * t.cols(), t.rows(), t.cols()) = m(i, j) * t;
    t = std::move(out);
  }
  return t;
}

Eigen::VectorXd HmmKernel::obs_column_loglik(const Eigen::Ref<const Eigen::VectorXi>& o) const {
  Eigen::VectorXd ll = Eigen::VectorXd::Zero(obs_cols_);
  for (std::size_t m = 0; m < log_obs_.size(); ++m) {
    const int sym = o[static_cast<Eigen::Index>(m)];
    if (sym < 0) continue;
    ll += log_obs_[m].row(sym).transpose();
  }
  return ll;
}

Eigen::VectorXd HmmKernel::joint_loglik(const Eigen::Ref<const Eigen::VectorXi>& o) const {
  const Eigen::VectorXd cl = obs_column_loglik(o);
  if (joint_size_ == obs_cols_) return cl;  // only order-0 digits present
  Eigen::VectorXd ll(joint_size_);
  for (int z = 0; z < joint_size_; ++z) ll[z] = cl[obs_column_of_joint(z)];
  return ll;
}

// ---------------------------------------------------------------------------
// Inference

CategoricalBelief DiscreteTrajectory::marginal(const HmmLayer& layer, int f, int g,
                                               int t) const {
  const JointSpace fs = layer.factor_space(f);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(fs.radix(g));
  const auto col = factor_marginals[f].col(t);
  for (int z = 0; z < fs.size(); ++z) p[fs.digit(z, g)] += col[z];
  p /= p.sum();
  return CategoricalBelief(std::move(p));
}

void check_sequence(const HmmLayer& layer, const DiscreteSequence& seq) {
  const int t_len = seq.length();
  require(t_len >= 1, ErrorKind::kData, "sequence must contain at least one step");
  require(seq.obs.cols() == layer.num_modalities(), ErrorKind::kShape,
          "sequence modality count does not match the layer");
  for (int t = 0; t < t_len; ++t)
    for (int m = 0; m < layer.num_modalities(); ++m) {
      const int s = seq.obs(t, m);
      require(s >= -1 && s < layer.shape.num_obs[m], ErrorKind::kData,
              "observation symbol " + std::to_string(s) + " outside alphabet of modality " +
                  std::to_string(m) + " at t=" + std::to_string(t));
    }
  if (layer.is_controllable()) {
    const int n = static_cast<int>(seq.actions.size());
    require(n == t_len - 1 || n == t_len, ErrorKind::kShape,
            "controllable layer needs T-1 (or T) actions");
    for (int a : seq.actions)
      require(a >= 0 && a < layer.shape.num_actions, ErrorKind::kData,
              "action index out of range");
  } else {
    require(seq.actions.empty(), ErrorKind::kShape,
            "actions supplied to a layer without controllable orders");
  }
}

namespace {

int action_at(const DiscreteSequence& seq, int t) {
  return seq.actions.empty() ? 0 : seq.actions[t];
}

/// Sum a joint vector down to factor f's coordinates.
Eigen::VectorXd factor_sum(const Eigen::VectorXd& v, const std::vector<int>& sizes, int f) {
  int inner = 1;
  for (int i = 0; i < f; ++i) inner *= sizes[i];
  const int jf = sizes[f];
  const int outer = static_cast<int>(v.size()) / (inner * jf);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(jf);
  for (int o = 0; o < outer; ++o)
    for (int k = 0; k < jf; ++k)
      out[k] += v.segment(static_cast<Eigen::Index>(o) * inner * jf + static_cast<Eigen::Index>(k) * inner,
                          inner)
                    .sum();
  return out;
}

/// S(a, b) = sum over other factors of x(a, rest) * y(b, rest).
Eigen::MatrixXd factor_cross(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                             const std::vector<int>& sizes, int f) {
  int inner = 1;
  for (int i = 0; i < f; ++i) inner *= sizes[i];
  const int jf = sizes[f];
  const int outer = static_cast<int>(x.size()) / (inner * jf);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(jf, jf);
  for (int o = 0; o < outer; ++o) {
    const Eigen::Index off = static_cast<Eigen::Index>(o) * inner * jf;
    Eigen::Map<const Eigen::MatrixXd> xm(x.data() + off, inner, jf);
    Eigen::Map<const Eigen::MatrixXd> ym(y.data() + off, inner, jf);
    s.noalias() += xm.transpose() * ym;
  }
  return s;
}

DiscreteTrajectory exact_forward_backward(const HmmKernel& k, const DiscreteSequence& seq,
                                          const Eigen::MatrixXd* extra,
                                          const Eigen::VectorXd* initial) {
  const int t_len = seq.length();
  const int j = k.joint_size();
  const int nf = k.num_factors();
  const auto& sizes = k.factor_sizes();

  Eigen::MatrixXd log_e(j, t_len);
  for (int t = 0; t < t_len; ++t) {
    log_e.col(t) = k.joint_loglik(seq.obs.row(t).transpose());
    if (extra != nullptr) log_e.col(t) += extra->col(t);
  }
  Eigen::VectorXd shift(t_len);
  Eigen::MatrixXd e(j, t_len);
  for (int t = 0; t < t_len; ++t) {
    shift[t] = log_e.col(t).maxCoeff();
    require(std::isfinite(shift[t]), ErrorKind::kNumerical,
            "observation has zero likelihood under every state at t=" + std::to_string(t));
    e.col(t) = (log_e.col(t).array() - shift[t]).exp().matrix();
  }

  Eigen::MatrixXd alpha(j, t_len);
  Eigen::VectorXd c(t_len);
  double log_z = 0.0;
  Eigen::VectorXd a = (initial != nullptr ? *initial : k.initial_joint()).cwiseProduct(e.col(0));
  for (int t = 0; t < t_len; ++t) {
    if (t > 0) a = k.propagate(alpha.col(t - 1), action_at(seq, t - 1)).cwiseProduct(e.col(t));
    c[t] = a.sum();
    require(c[t] > 0.0 && std::isfinite(c[t]), ErrorKind::kNumerical,
            "forward pass lost all probability mass at t=" + std::to_string(t));
    alpha.col(t) = a / c[t];
    log_z += std::log(c[t]) + shift[t];
  }

  Eigen::MatrixXd beta(j, t_len);
  beta.col(t_len - 1).setOnes();
  for (int t = t_len - 2; t >= 0; --t) {
    const Eigen::VectorXd u = e.col(t + 1).cwiseProduct(beta.col(t + 1)) / c[t + 1];
    beta.col(t) = k.propagate_transpose(u, action_at(seq, t));
  }

  DiscreteTrajectory out;
  out.exact = true;
  out.log_evidence = log_z;
  out.joint_marginals.resize(j, t_len);
  for (int t = 0; t < t_len; ++t) {
    Eigen::VectorXd g = alpha.col(t).cwiseProduct(beta.col(t));
    out.joint_marginals.col(t) = g / g.sum();
  }
  for (int f = 0; f < nf; ++f) {
    Eigen::MatrixXd fm(sizes[f], t_len);
    for (int t = 0; t < t_len; ++t) fm.col(t) = factor_sum(out.joint_marginals.col(t), sizes, f);
    out.factor_marginals.push_back(std::move(fm));
  }
  out.factor_pairwise.assign(nf, {});
  for (int t = 0; t + 1 < t_len; ++t) {
    const int act = action_at(seq, t);
    const Eigen::VectorXd u = e.col(t + 1).cwiseProduct(beta.col(t + 1)) / c[t + 1];
    for (int f = 0; f < nf; ++f) {
      std::vector<const Eigen::MatrixXd*> mats(nf, nullptr);
      for (int g = 0; g < nf; ++g)
        if (g != f) mats[g] = &k.factor_transition(g, act);
      const Eigen::VectorXd w = nf > 1 ? k.apply_factors(u, mats, true) : u;
      const Eigen::VectorXd av = alpha.col(t);
      const Eigen::MatrixXd s = factor_cross(av, w, sizes, f);
      Eigen::MatrixXd xi = k.factor_transition(f, act).cwiseProduct(s.transpose());
      xi /= xi.sum();
      out.factor_pairwise[f].push_back(std::move(xi));
    }
  }
  const int cols = k.layer().obs_column_space().size();
  out.obs_marginals = Eigen::MatrixXd::Zero(cols, t_len);
  for (int z = 0; z < j; ++z) {
    const int col = k.obs_column_of_joint(z);
    out.obs_marginals.row(col) += out.joint_marginals.row(z);
  }
  return out;
}

struct ChainPass {
  Eigen::MatrixXd marginals;             // Jf x T
  std::vector<Eigen::MatrixXd> pairwise; // next x prev
  double log_z = 0.0;
};

/// Single dense chain forward-backward with log emission potentials.
ChainPass chain_pass(const HmmKernel& k, int f, const DiscreteSequence& seq,
                     const Eigen::MatrixXd& log_e) {
  const int t_len = static_cast<int>(log_e.cols());
  const int jf = static_cast<int>(log_e.rows());
  Eigen::MatrixXd e(jf, t_len);
  Eigen::VectorXd shift(t_len);
  for (int t = 0; t < t_len; ++t) {
    shift[t] = log_e.col(t).maxCoeff();
    e.col(t) = (log_e.col(t).array() - shift[t]).exp().matrix();
  }
  Eigen::MatrixXd alpha(jf, t_len);
  Eigen::VectorXd c(t_len);
  ChainPass out;
  Eigen::VectorXd a = k.factor_initial(f).cwiseProduct(e.col(0));
  for (int t = 0; t < t_len; ++t) {
    if (t > 0) a = (k.factor_transition(f, action_at(seq, t - 1)) * alpha.col(t - 1)).cwiseProduct(e.col(t));
    c[t] = a.sum();
    require(c[t] > 0.0 && std::isfinite(c[t]), ErrorKind::kNumerical,
            "mean-field chain lost all mass at t=" + std::to_string(t));
    alpha.col(t) = a / c[t];
    out.log_z += std::log(c[t]) + shift[t];
  }
  Eigen::MatrixXd beta(jf, t_len);
  beta.col(t_len - 1).setOnes();
  for (int t = t_len - 2; t >= 0; --t) {
    const Eigen::VectorXd u = e.col(t + 1).cwiseProduct(beta.col(t + 1)) / c[t + 1];
    beta.col(t) = k.factor_transition(f, action_at(seq, t)).transpose() * u;
  }
  out.marginals.resize(jf, t_len);
  for (int t = 0; t < t_len; ++t) {
    Eigen::VectorXd g = alpha.col(t).cwiseProduct(beta.col(t));
    out.marginals.col(t) = g / g.sum();
  }
  for (int t = 0; t + 1 < t_len; ++t) {
    const Eigen::VectorXd u = e.col(t + 1).cwiseProduct(beta.col(t + 1)) / c[t + 1];
    Eigen::MatrixXd xi = k.factor_transition(f, action_at(seq, t)).array().colwise() *
                         u.array();
    xi = xi.array().rowwise() * alpha.col(t).transpose().array();
    xi /= xi.sum();
    out.pairwise.push_back(std::move(xi));
  }
  return out;
}

/// Structured mean-field over factorial chains (each chain exact).
DiscreteTrajectory mean_field_forward_backward(const HmmKernel& k, const DiscreteSequence& seq,
                                               int sweeps) {
  const HmmLayer& layer = k.layer();
  const int t_len = seq.length();
  const int nf = k.num_factors();
  const JointSpace cs = layer.obs_column_space();
  const int cols = cs.size();

  Eigen::MatrixXd col_ll(cols, t_len);
  for (int t = 0; t < t_len; ++t) col_ll.col(t) = k.obs_column_loglik(seq.obs.row(t).transpose());

  // Order-0 marginals per factor, initialized at the prior chain.
  std::vector<Eigen::MatrixXd> q0(nf);
  std::vector<Eigen::MatrixXd> qf(nf);
  for (int f = 0; f < nf; ++f) {
    const int jf = k.factor_size(f);
    qf[f].resize(jf, t_len);
    Eigen::VectorXd v = k.factor_initial(f);
    v /= v.sum();
    for (int t = 0; t < t_len; ++t) {
      if (t > 0) {
        v = k.factor_transition(f, action_at(seq, t - 1)) * v;
        v /= v.sum();
      }
      qf[f].col(t) = v;
    }
  }
  auto order0 = [&](int f, const Eigen::MatrixXd& m) {
    const int k0 = layer.order_size(f, 0);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(k0, m.cols());
    for (Eigen::Index z = 0; z < m.rows(); ++z) out.row(k.factor_state0(f, static_cast<int>(z))) += m.row(z);
    return out;
  };
  for (int f = 0; f < nf; ++f) q0[f] = order0(f, qf[f]);

  std::vector<double> chain_terms(nf, 0.0);
  std::vector<std::vector<Eigen::MatrixXd>> pairwise(nf);
  for (int sweep = 0; sweep < std::max(1, sweeps); ++sweep) {
    for (int f = 0; f < nf; ++f) {
      const int k0 = layer.order_size(f, 0);
      Eigen::MatrixXd ell0 = Eigen::MatrixXd::Zero(k0, t_len);
      for (int t = 0; t < t_len; ++t) {
        for (int col = 0; col < cols; ++col) {
          double w = 1.0;
          for (int g = 0; g < nf && w != 0.0; ++g)
            if (g != f) w *= q0[g](cs.digit(col, g), t);
          ell0(cs.digit(col, f), t) += w * col_ll(col, t);
        }
      }
      const int jf = k.factor_size(f);
      Eigen::MatrixXd ell(jf, t_len);
      for (int z = 0; z < jf; ++z) ell.row(z) = ell0.row(k.factor_state0(f, z));
      ChainPass pass = chain_pass(k, f, seq, ell);
      chain_terms[f] = pass.log_z - pass.marginals.cwiseProduct(ell).sum();
      qf[f] = std::move(pass.marginals);
      pairwise[f] = std::move(pass.pairwise);
      q0[f] = order0(f, qf[f]);
    }
  }

  DiscreteTrajectory out;
  out.exact = false;
  out.factor_marginals = qf;
  out.factor_pairwise = std::move(pairwise);
  out.obs_marginals.resize(cols, t_len);
  for (int t = 0; t < t_len; ++t)
    for (int col = 0; col < cols; ++col) {
      double w = 1.0;
      for (int g = 0; g < nf; ++g) w *= q0[g](cs.digit(col, g), t);
      out.obs_marginals(col, t) = w;
    }
  double elbo = out.obs_marginals.cwiseProduct(col_ll).sum();
  for (double c : chain_terms) elbo += c;
  out.log_evidence = elbo;
  return out;
}

}  // namespace

DiscreteTrajectory forward_backward(const HmmKernel& kernel, const DiscreteSequence& seq,
                                    const Eigen::MatrixXd* extra_log_potentials,
                                    const Eigen::VectorXd* initial_joint) {
  check_sequence(kernel.layer(), seq);
  if (extra_log_potentials != nullptr)
    require(extra_log_potentials->rows() == kernel.joint_size() &&
                extra_log_potentials->cols() == seq.length(),
            ErrorKind::kShape, "extra potentials must be J x T");
  if (initial_joint != nullptr)
    require(initial_joint->size() == kernel.joint_size(), ErrorKind::kShape,
            "initial joint prior must have J entries");
  return exact_forward_backward(kernel, seq, extra_log_potentials, initial_joint);
}

DiscreteTrajectory forward_backward(const HmmLayer& layer, const DiscreteSequence& seq,
                                    const InferenceOptions& opts) {
  check_sequence(layer, seq);
  const HmmKernel kernel(layer, opts.mode);
  if (kernel.joint_size() <= opts.exact_cap)
    return exact_forward_backward(kernel, seq, nullptr, nullptr);
  return mean_field_forward_backward(kernel, seq, opts.mean_field_sweeps);
}

Eigen::VectorXd initial_state_loglik(const HmmKernel& k, const DiscreteSequence& seq,
                                     const Eigen::MatrixXd* extra) {
  check_sequence(k.layer(), seq);
  const int t_len = seq.length();
  auto log_e = [&](int t) {
    Eigen::VectorXd v = k.joint_loglik(seq.obs.row(t).transpose());
    if (extra != nullptr) v += extra->col(t);
    return v;
  };
  Eigen::VectorXd b = Eigen::VectorXd::Ones(k.joint_size());
  double scale = 0.0;
  for (int t = t_len - 1; t >= 1; --t) {
    const Eigen::VectorXd le = log_e(t);
    const double m = le.maxCoeff();
    require(std::isfinite(m), ErrorKind::kNumerical,
            "observation has zero likelihood under every state at t=" + std::to_string(t));
    Eigen::VectorXd u = (le.array() - m).exp().matrix().cwiseProduct(b);
    b = k.propagate_transpose(u, action_at(seq, t - 1));
    const double n = b.maxCoeff();
    require(n > 0.0, ErrorKind::kNumerical, "backward pass lost all mass");
    b /= n;
    scale += m + std::log(n);
  }
  return (log_e(0).array() + b.array().log() + scale).matrix();
}

ViterbiPath viterbi(const HmmLayer& layer, const DiscreteSequence& seq,
                    const InferenceOptions& opts) {
  check_sequence(layer, seq);
  const HmmKernel k(layer, opts.mode);
  require(k.joint_size() <= opts.exact_cap, ErrorKind::kConfig,
          "viterbi requires an enumerable joint state space");
  const int j = k.joint_size();
  const int t_len = seq.length();
  const int variants = layer.is_controllable() ? layer.shape.num_actions : 1;
  std::vector<Eigen::MatrixXd> log_t;
  for (int a = 0; a < variants; ++a) log_t.push_back(k.dense_transition(a).array().log().matrix());

  Eigen::VectorXd delta = k.initial_joint().array().log().matrix() +
                          k.joint_loglik(seq.obs.row(0).transpose());
  std::vector<std::vector<int>> back(t_len, std::vector<int>(j, 0));
  for (int t = 1; t < t_len; ++t) {
    const Eigen::MatrixXd& lt = log_t[layer.is_controllable() ? seq.actions[t - 1] : 0];
    const Eigen::VectorXd ll = k.joint_loglik(seq.obs.row(t).transpose());
    Eigen::VectorXd next(j);
    for (int zn = 0; zn < j; ++zn) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int zp = 0; zp < j; ++zp) {
        const double v = delta[zp] + lt(zn, zp);
        if (v > best) {
          best = v;
          arg = zp;
        }
      }
      next[zn] = best + ll[zn];
      back[t][zn] = arg;
    }
    delta = std::move(next);
  }
  ViterbiPath path;
  int arg = 0;
  double best = -std::numeric_limits<double>::infinity();
  for (int z = 0; z < j; ++z)
    if (delta[z] > best) {
      best = delta[z];
      arg = z;
    }
  path.log_prob = best;
  path.joint.assign(t_len, 0);
  path.joint[t_len - 1] = arg;
  for (int t = t_len - 1; t > 0; --t) path.joint[t - 1] = back[t][path.joint[t]];
  return path;
}

// ---------------------------------------------------------------------------
// Learning


void accumulate_counts(HmmLayer& layer, const DiscreteTrajectory& traj,
                       const DiscreteSequence& seq, bool include_initial,
                       const std::vector<bool>& skip_transition) {
  const int nf = layer.num_factors();
  const int t_len = seq.length();
  require(traj.length() == t_len && static_cast<int>(traj.factor_marginals.size()) == nf,
          ErrorKind::kShape, "trajectory does not match its sequence or layer");
  for (int f = 0; f < nf; ++f) {
    const JointSpace fs = layer.factor_space(f);
    require(traj.factor_marginals[f].rows() == fs.size(), ErrorKind::kShape,
            "trajectory factor size does not match the layer");
    const int ng = layer.num_orders(f);
    if (include_initial) {
      for (int z = 0; z < fs.size(); ++z) {
        const double w = traj.factor_marginals[f](z, 0);
        if (w == 0.0) continue;
        for (int g = 0; g < ng; ++g) layer.init[f][g].counts(fs.digit(z, g), 0) += w;
      }
    }
    for (int t = 0; t + 1 < t_len; ++t) {
      if (!skip_transition.empty() && skip_transition[t + 1]) continue;
      const int act = seq.actions.empty() ? 0 : seq.actions[t];
      const Eigen::MatrixXd& xi = traj.factor_pairwise[f][t];
      for (int zp = 0; zp < fs.size(); ++zp)
        for (int zn = 0; zn < fs.size(); ++zn) {
          const double w = xi(zn, zp);
          if (w == 0.0) continue;
          for (int g = 0; g < ng; ++g) {
            const int up = g + 1 < ng ? fs.digit(zn, g + 1) : 0;
            layer.trans[f][g].counts(fs.digit(zn, g),
                                     layer.trans_config(f, g, fs.digit(zp, g), up, act)) += w;
          }
        }
    }
  }
  for (int m = 0; m < layer.num_modalities(); ++m)
    for (int t = 0; t < t_len; ++t) {
      const int sym = seq.obs(t, m);
      if (sym < 0) continue;
      layer.obs[m].counts.row(sym) += traj.obs_marginals.col(t).transpose();
    }
}

double layer_kl(const HmmLayer& layer) {
  double kl = 0.0;
  for (int f = 0; f < layer.num_factors(); ++f)
    for (int g = 0; g < layer.num_orders(f); ++g) {
      kl += dirichlet_kl(layer.trans[f][g], layer.trans_prior[f][g]);
      kl += dirichlet_kl(layer.init[f][g], layer.init_prior[f][g]);
    }
  for (int m = 0; m < layer.num_modalities(); ++m)
    kl += dirichlet_kl(layer.obs[m], layer.obs_prior[m]);
  return kl;
}

HmmLayer reset_to_prior(const HmmLayer& layer) {
  HmmLayer out = layer;
  out.trans = layer.trans_prior;
  out.init = layer.init_prior;
  out.obs = layer.obs_prior;
  return out;
}

HmmLayer perturb_counts(const HmmLayer& layer, Rng& rng, double magnitude) {
  HmmLayer out = layer;
  auto bump = [&](DirichletCounts& c) {
    for (Eigen::Index j = 0; j < c.counts.cols(); ++j)
      for (Eigen::Index i = 0; i < c.counts.rows(); ++i) c.counts(i, j) += magnitude * rng.uniform();
  };
  for (auto& f : out.trans)
    for (auto& c : f) bump(c);
  for (auto& c : out.obs) bump(c);
  return out;
}

HmmLayer vb_update(const HmmLayer& layer, const std::vector<DiscreteTrajectory>& trajectories,
                   const std::vector<DiscreteSequence>& data) {
  require(trajectories.size() == data.size(), ErrorKind::kShape,
          "vb_update: one trajectory per sequence required");
  HmmLayer out = layer;
  for (std::size_t n = 0; n < data.size(); ++n) {
    check_sequence(layer, data[n]);
    accumulate_counts(out, trajectories[n], data[n], true);
  }
  return out;
}

double vb_elbo(const HmmLayer& layer, const std::vector<DiscreteSequence>& data,
               const InferenceOptions& opts) {
  InferenceOptions vb = opts;
  vb.mode = ParamMode::kExpectedLog;
  double elbo = -layer_kl(layer);
  for (const auto& seq : data) elbo += forward_backward(layer, seq, vb).log_evidence;
  return elbo;
}

HmmLearnResult vb_learn(const HmmLayer& layer, const std::vector<DiscreteSequence>& data,
                        int sweeps, const InferenceOptions& opts) {
  require(sweeps >= 1, ErrorKind::kPrecondition, "vb_learn needs sweeps >= 1");
  require(!data.empty(), ErrorKind::kData, "vb_learn needs at least one sequence");
  InferenceOptions vb = opts;
  vb.mode = ParamMode::kExpectedLog;
  HmmLearnResult res{layer, {}};
  for (int s = 0; s < sweeps; ++s) {
    std::vector<DiscreteTrajectory> trajs;
    double elbo = -layer_kl(res.layer);
    for (const auto& seq : data) {
      trajs.push_back(forward_backward(res.layer, seq, vb));
      elbo += trajs.back().log_evidence;
    }
    require(std::isfinite(elbo), ErrorKind::kNumerical,
            "non-finite ELBO at sweep " + std::to_string(s));
    res.elbo.push_back(elbo);
    res.layer = vb_update(reset_to_prior(res.layer), trajs, data);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sampling

int ActionPolicy::action(int t, Rng& rng) const {
  if (!fixed.empty()) {
    require(t < static_cast<int>(fixed.size()), ErrorKind::kConfig,
            "action sequence shorter than the horizon");
    return fixed[t];
  }
  return sampler(t, rng);
}

int sample_initial_joint(const HmmLayer& layer, Rng& rng) {
  const JointSpace ls = layer.latent_space();
  std::vector<int> digits;
  for (int f = 0; f < layer.num_factors(); ++f)
    for (int g = 0; g < layer.num_orders(f); ++g)
      digits.push_back(rng.categorical(layer.init[f][g].counts.col(0)));
  return ls.encode(digits);
}

int sample_next_joint(const HmmLayer& layer, int joint, int action, Rng& rng) {
  const JointSpace ls = layer.latent_space();
  std::vector<int> cur = ls.decode(joint);
  std::vector<int> next(cur.size());
  int base = 0;
  for (int f = 0; f < layer.num_factors(); ++f) {
    const int ng = layer.num_orders(f);
    for (int g = ng - 1; g >= 0; --g) {
      const int up = g + 1 < ng ? next[base + g + 1] : 0;
      const int cfg = layer.trans_config(f, g, cur[base + g], up, action);
      next[base + g] = rng.categorical(layer.trans[f][g].counts.col(cfg));
    }
    base += ng;
  }
  return ls.encode(next);
}

Eigen::VectorXi sample_observation(const HmmLayer& layer, int joint, Rng& rng) {
  const JointSpace ls = layer.latent_space();
  const JointSpace cs = layer.obs_column_space();
  const std::vector<int> digits = ls.decode(joint);
  std::vector<int> s0;
  int base = 0;
  for (int f = 0; f < layer.num_factors(); ++f) {
    s0.push_back(digits[base]);
    base += layer.num_orders(f);
  }
  const int col = cs.encode(s0);
  Eigen::VectorXi o(layer.num_modalities());
  for (int m = 0; m < layer.num_modalities(); ++m) o[m] = rng.categorical(layer.obs[m].counts.col(col));
  return o;
}

RolloutSample generalized_rollout(const HmmLayer& layer, int horizon,
                                  const ActionPolicy& policy, Rng& rng) {
  require(horizon >= 1, ErrorKind::kPrecondition, "rollout horizon must be >= 1");
  layer.validate();
  if (layer.is_controllable())
    require(!policy.empty(), ErrorKind::kConfig, "controllable layer requires a policy");
  else
    require(policy.empty(), ErrorKind::kConfig, "policy supplied to an uncontrolled layer");

  RolloutSample out;
  out.obs.resize(horizon, layer.num_modalities());
  int z = sample_initial_joint(layer, rng);
  for (int t = 0; t < horizon; ++t) {
    if (t > 0) {
      int a = 0;
      if (layer.is_controllable()) {
        a = policy.action(t - 1, rng);
        require(a >= 0 && a < layer.shape.num_actions, ErrorKind::kConfig,
                "policy produced an out-of-range action");
        out.actions.push_back(a);
      }
      z = sample_next_joint(layer, z, a, rng);
    }
    out.joint.push_back(z);
    out.obs.row(t) = sample_observation(layer, z, rng).transpose();
  }
  return out;
}

RolloutSample generalized_rollout(const HmmLayer& layer, int horizon,
                                  const ActionPolicy& policy, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "hmm:rollout");
  return generalized_rollout(layer, horizon, policy, rng);
}

// ---------------------------------------------------------------------------

Quantization quantize(const std::vector<double>& values, int levels) {
  require(levels >= 2, ErrorKind::kConfig, "quantize needs levels >= 2");
  Quantization q;
  if (values.empty()) return q;
  for (double v : values)
    require(std::isfinite(v), ErrorKind::kData, "quantize: non-finite input value");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  if (range == 0.0) {
    q.centers = {lo};
    q.codes.assign(values.size(), 0);
    return q;
  }
  q.bin_width = range / levels;
  for (int i = 0; i < levels; ++i) q.centers.push_back(lo + (i + 0.5) * q.bin_width);
  q.codes.reserve(values.size());
  for (double v : values) {
    const int c = static_cast<int>(std::floor((v - lo) / q.bin_width));
    q.codes.push_back(std::clamp(c, 0, levels - 1));
  }
  return q;
}

}  // namespace wmb

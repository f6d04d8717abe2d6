#include "wmb/slds.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "wmb/error.hpp"

namespace wmb {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Inverse of a model covariance (jitter applied, as everywhere else).
Eigen::MatrixXd inverse_spd(const Eigen::MatrixXd& a, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(stabilize_cov(a));
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical, what);
  return llt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
}

/// log|A| of a posterior covariance, without jitter.
double logdet_posterior(const Eigen::MatrixXd& a) {
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (a + a.transpose()));
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "posterior covariance not positive-definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double softmax_lse(const Eigen::VectorXd& v, Eigen::VectorXd* probs) {
  const double m = v.maxCoeff();
  Eigen::VectorXd e = (v.array() - m).exp().matrix();
  const double s = e.sum();
  if (probs != nullptr) *probs = e / s;
  return m + std::log(s);
}

/// Bohning curvature H = (I - 11^T / K) / 2.
Eigen::MatrixXd bohning_curvature(int k) {
  return 0.5 * (Eigen::MatrixXd::Identity(k, k) - Eigen::MatrixXd::Constant(k, k, 1.0 / k));
}

/// Upper bound on E[lse(base_i + W x)] for x ~ N(m, S), expanded at psi.
double bohning_bound(const Eigen::VectorXd& psi, const Eigen::VectorXd& eta_mean,
                     const Eigen::MatrixXd& h, const Eigen::MatrixXd& w_s_wt) {
  Eigen::VectorXd g;
  const double lse = softmax_lse(psi, &g);
  const Eigen::VectorXd r = eta_mean - psi;
  return lse + r.dot(g) + 0.5 * r.dot(h * r) + 0.5 * (h.cwiseProduct(w_s_wt)).sum();
}

/// E log N(y; C x + c, R) for x ~ N(m, S), given R's inverse and log det.
double expected_gauss(const Eigen::VectorXd& resid_mean, const Eigen::MatrixXd& resid_cov,
                      const Eigen::MatrixXd& r_inv, double r_logdet) {
  const double n = static_cast<double>(resid_mean.size());
  return -0.5 * (n * kLog2Pi + r_logdet + resid_mean.dot(r_inv * resid_mean) +
                 (r_inv.cwiseProduct(resid_cov)).sum());
}

struct ChainSmooth {
  Eigen::MatrixXd marginals;
  std::vector<Eigen::MatrixXd> pairwise;
};

/// Exact posterior of a chain with unnormalized log potentials.
ChainSmooth chain_smooth(const Eigen::VectorXd& log_init,
                         const std::vector<Eigen::MatrixXd>& log_pair,
                         const Eigen::MatrixXd& log_unary) {
  const int k = static_cast<int>(log_unary.rows());
  const int t_len = static_cast<int>(log_unary.cols());
  Eigen::MatrixXd alpha(k, t_len);
  Eigen::VectorXd a = log_init + log_unary.col(0);
  normalize_log_weights(a);
  alpha.col(0) = a;
  std::vector<Eigen::MatrixXd> pot(t_len);
  std::vector<double> shift(t_len, 0.0);
  for (int t = 1; t < t_len; ++t) {
    Eigen::MatrixXd lp = log_pair[t];
    lp.colwise() += log_unary.col(t);
    shift[t] = lp.maxCoeff();
    pot[t] = (lp.array() - shift[t]).exp().matrix();
    Eigen::VectorXd v = pot[t] * alpha.col(t - 1);
    const double s = v.sum();
    require(s > 0.0 && std::isfinite(s), ErrorKind::kNumerical,
            "switch chain lost all mass at t=" + std::to_string(t));
    alpha.col(t) = v / s;
  }
  ChainSmooth out;
  out.marginals.resize(k, t_len);
  out.pairwise.assign(t_len, Eigen::MatrixXd::Zero(k, k));
  Eigen::VectorXd beta = Eigen::VectorXd::Ones(k);
  out.marginals.col(t_len - 1) = alpha.col(t_len - 1);
  for (int t = t_len - 1; t >= 1; --t) {
    Eigen::MatrixXd xi = pot[t].array().colwise() * beta.array();
    xi = xi.array().rowwise() * alpha.col(t - 1).transpose().array();
    xi /= xi.sum();
    out.pairwise[t] = xi;
    Eigen::VectorXd nb = pot[t].transpose() * beta;
    beta = nb / nb.maxCoeff();
    Eigen::VectorXd g = alpha.col(t - 1).cwiseProduct(beta);
    out.marginals.col(t - 1) = g / g.sum();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Layer

double RegressionPrior::log_density(const Eigen::MatrixXd& a, const Eigen::MatrixXd& sigma) const {
  const int d = static_cast<int>(mean.rows());
  const int p = static_cast<int>(mean.cols());
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "regression noise is not positive-definite");
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const Eigen::MatrixXd diff = a - mean;
  const Eigen::MatrixXd inner = scatter + diff * precision * diff.transpose();
  return -0.5 * (dof + d + 1 + p) * logdet - 0.5 * llt.solve(inner).trace();
}

SldsLayer SldsLayer::make(int modes, int state_dim, int obs_dim, int control_dim) {
  require(modes >= 1 && state_dim >= 1 && obs_dim >= 1 && control_dim >= 0,
          ErrorKind::kConfig, "invalid SLDS dimensions");
  SldsLayer l;
  l.num_modes = modes;
  l.state_dim = state_dim;
  l.obs_dim = obs_dim;
  l.control_dim = control_dim;
  for (int k = 0; k < modes; ++k) {
    l.dynamics.push_back(Eigen::MatrixXd::Identity(state_dim, state_dim));
    l.bias.push_back(Eigen::VectorXd::Zero(state_dim));
    l.control.push_back(Eigen::MatrixXd::Zero(state_dim, control_dim));
    l.noise.push_back(Eigen::MatrixXd::Identity(state_dim, state_dim));
  }
  l.base_logits = Eigen::MatrixXd::Zero(modes, modes);
  l.recurrence = Eigen::MatrixXd::Zero(modes, state_dim);
  l.emission = Eigen::MatrixXd::Identity(obs_dim, state_dim);
  l.obs_noise = Eigen::MatrixXd::Identity(obs_dim, obs_dim);
  l.switch_init = CategoricalBelief::uniform(modes);
  l.state_init = GaussianBelief(Eigen::VectorXd::Zero(state_dim),
                                Eigen::MatrixXd::Identity(state_dim, state_dim));
  l.reset_prior();
  return l;
}

Eigen::MatrixXd SldsLayer::regression(int k) const {
  Eigen::MatrixXd m(state_dim, regressor_dim());
  m << dynamics[k], control[k], bias[k];
  return m;
}

void SldsLayer::set_regression(int k, const Eigen::MatrixXd& m) {
  dynamics[k] = m.leftCols(state_dim);
  control[k] = m.middleCols(state_dim, control_dim);
  bias[k] = m.col(state_dim + control_dim);
}

void SldsLayer::reset_prior(double precision, double scatter) {
  dynamics_prior.clear();
  const int p = regressor_dim();
  for (int k = 0; k < num_modes; ++k) {
    RegressionPrior pr;
    pr.mean = regression(k);
    pr.precision = precision * Eigen::MatrixXd::Identity(p, p);
    pr.dof = state_dim + 2.0;
    pr.scatter = scatter * Eigen::MatrixXd::Identity(state_dim, state_dim);
    dynamics_prior.push_back(std::move(pr));
  }
}

int SldsLayer::parameter_count() const {
  const int d = state_dim;
  return num_modes * (d * regressor_dim() + d * (d + 1) / 2) + num_modes * num_modes +
         num_modes * d;
}

void SldsLayer::validate() const {
  const int k = num_modes, d = state_dim;
  require(k >= 1 && d >= 1 && obs_dim >= 1 && control_dim >= 0, ErrorKind::kShape,
          "invalid SLDS dimensions");
  require(static_cast<int>(dynamics.size()) == k && static_cast<int>(bias.size()) == k &&
              static_cast<int>(control.size()) == k && static_cast<int>(noise.size()) == k &&
              static_cast<int>(dynamics_prior.size()) == k,
          ErrorKind::kShape, "SLDS needs one dynamics block per mode");
  for (int j = 0; j < k; ++j) {
    require(dynamics[j].rows() == d && dynamics[j].cols() == d && bias[j].size() == d &&
                control[j].rows() == d && control[j].cols() == control_dim &&
                noise[j].rows() == d && noise[j].cols() == d,
            ErrorKind::kShape, "SLDS mode block has the wrong shape");
    require(dynamics_prior[j].mean.rows() == d && dynamics_prior[j].mean.cols() == regressor_dim(),
            ErrorKind::kShape, "SLDS regression prior has the wrong shape");
    Eigen::LLT<Eigen::MatrixXd> llt(noise[j]);
    require(llt.info() == Eigen::Success, ErrorKind::kPrecondition,
            "SLDS mode noise must be positive-definite");
  }
  require(base_logits.rows() == k && base_logits.cols() == k && recurrence.rows() == k &&
              recurrence.cols() == d,
          ErrorKind::kShape, "SLDS recurrence has the wrong shape");
  require(emission.rows() == obs_dim && emission.cols() == d && obs_noise.rows() == obs_dim &&
              obs_noise.cols() == obs_dim,
          ErrorKind::kShape, "SLDS emission has the wrong shape");
  Eigen::LLT<Eigen::MatrixXd> r(obs_noise);
  require(r.info() == Eigen::Success, ErrorKind::kPrecondition,
          "observation noise must be positive-definite");
  require(switch_init.size() == k && state_init.dim() == d, ErrorKind::kShape,
          "SLDS initial beliefs have the wrong shape");
}

Eigen::MatrixXd recurrence_logits(const SldsLayer& layer, const Eigen::VectorXd& prev_state) {
  require(prev_state.size() == layer.state_dim, ErrorKind::kShape,
          "recurrence_logits: state dimension mismatch");
  Eigen::MatrixXd l = layer.base_logits;
  l.colwise() += layer.recurrence * prev_state;
  return l;
}

void check_sequence(const SldsLayer& layer, const SldsSequence& seq) {
  require(seq.length() >= 1, ErrorKind::kData, "sequence must contain at least one step");
  require(seq.obs.cols() == layer.obs_dim, ErrorKind::kShape,
          "observation dimension does not match the layer");
  for (Eigen::Index i = 0; i < seq.obs.size(); ++i) {
    const double v = seq.obs.data()[i];
    require(std::isnan(v) || std::isfinite(v), ErrorKind::kData, "infinite observation value");
  }
  if (layer.control_dim > 0) {
    require(seq.controls.cols() == layer.control_dim &&
                (seq.controls.rows() == seq.length() - 1 || seq.controls.rows() == seq.length()),
            ErrorKind::kShape, "controlled layer needs T-1 (or T) control rows");
    require(seq.controls.allFinite(), ErrorKind::kData, "non-finite control input");
  } else {
    require(seq.controls.size() == 0, ErrorKind::kShape,
            "controls supplied to a passive layer");
  }
}

// ---------------------------------------------------------------------------
// Simulation

int sample_switch(const SldsLayer& layer, int prev_mode, const Eigen::VectorXd& prev_state,
                  Rng& rng) {
  Eigen::VectorXd l = layer.base_logits.col(prev_mode) + layer.recurrence * prev_state;
  l = (l.array() - l.maxCoeff()).exp().matrix();
  return rng.categorical(l);
}

Eigen::VectorXd sample_state(const SldsLayer& layer, int mode, const Eigen::VectorXd& prev_state,
                             const Eigen::VectorXd& control, Rng& rng) {
  Eigen::VectorXd mean = layer.dynamics[mode] * prev_state + layer.bias[mode];
  if (layer.control_dim > 0) mean += layer.control[mode] * control;
  return rng.gaussian(mean, layer.noise[mode]);
}

Eigen::VectorXd sample_emission(const SldsLayer& layer, const Eigen::VectorXd& state, Rng& rng) {
  return rng.gaussian(layer.emission * state, layer.obs_noise);
}

SldsSample simulate(const SldsLayer& layer, int horizon, const Eigen::MatrixXd& controls,
                    Rng& rng) {
  require(horizon >= 1, ErrorKind::kPrecondition, "simulate horizon must be >= 1");
  layer.validate();
  if (layer.control_dim > 0)
    require(controls.rows() >= horizon - 1 && controls.cols() == layer.control_dim,
            ErrorKind::kConfig, "controlled layer requires one control row per step");
  SldsSample out;
  out.states.resize(horizon, layer.state_dim);
  out.obs.resize(horizon, layer.obs_dim);
  int s = rng.categorical(layer.switch_init.probs);
  Eigen::VectorXd x = rng.gaussian(layer.state_init.mean, layer.state_init.cov);
  for (int t = 0; t < horizon; ++t) {
    if (t > 0) {
      s = sample_switch(layer, s, x, rng);
      const Eigen::VectorXd u = layer.control_dim > 0
                                    ? Eigen::VectorXd(controls.row(t - 1).transpose())
                                    : Eigen::VectorXd();
      x = sample_state(layer, s, x, u, rng);
    }
    out.modes.push_back(s);
    out.states.row(t) = x.transpose();
    out.obs.row(t) = sample_emission(layer, x, rng).transpose();
  }
  return out;
}

SldsSample simulate(const SldsLayer& layer, int horizon, const Eigen::MatrixXd& controls,
                    std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "slds:simulate");
  return simulate(layer, horizon, controls, rng);
}

// ---------------------------------------------------------------------------
// Kalman smoothing

namespace {

std::vector<int> observed_dims(const Eigen::MatrixXd& obs, int t) {
  std::vector<int> idx;
  for (Eigen::Index j = 0; j < obs.cols(); ++j)
    if (!std::isnan(obs(t, j))) idx.push_back(static_cast<int>(j));
  return idx;
}

}  // namespace

KalmanResult kalman_smooth(const SldsLayer& layer, const SldsSequence& seq,
                           const std::vector<int>& modes) {
  layer.validate();
  check_sequence(layer, seq);
  const int t_len = seq.length();
  const int d = layer.state_dim;
  require(static_cast<int>(modes.size()) == t_len, ErrorKind::kShape,
          "kalman_smooth needs one mode per step");
  for (int m : modes)
    require(m >= 0 && m < layer.num_modes, ErrorKind::kPrecondition, "mode index out of range");

  KalmanResult res;
  std::vector<Eigen::VectorXd> pred_m(t_len);
  std::vector<Eigen::MatrixXd> pred_p(t_len);
  Eigen::VectorXd m = layer.state_init.mean;
  Eigen::MatrixXd p = stabilize_cov(layer.state_init.cov);
  for (int t = 0; t < t_len; ++t) {
    if (t > 0) {
      const int k = modes[t];
      const Eigen::MatrixXd& a = layer.dynamics[k];
      m = a * m + layer.bias[k];
      if (layer.control_dim > 0) m += layer.control[k] * seq.controls.row(t - 1).transpose();
      p = a * p * a.transpose() + stabilize_cov(layer.noise[k]);
      p = 0.5 * (p + p.transpose());
    }
    pred_m[t] = m;
    pred_p[t] = p;
    const std::vector<int> o = observed_dims(seq.obs, t);
    if (!o.empty()) {
      const int n = static_cast<int>(o.size());
      Eigen::MatrixXd c(n, d), r(n, n);
      Eigen::VectorXd y(n);
      for (int i = 0; i < n; ++i) {
        c.row(i) = layer.emission.row(o[i]);
        y[i] = seq.obs(t, o[i]);
        for (int j = 0; j < n; ++j) r(i, j) = layer.obs_noise(o[i], o[j]);
      }
      r = stabilize_cov(r);
      Eigen::MatrixXd s = c * p * c.transpose() + r;
      s = 0.5 * (s + s.transpose());
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
              "innovation covariance not positive-definite at t=" + std::to_string(t));
      const Eigen::VectorXd v = y - c * m;
      const Eigen::MatrixXd gain = llt.solve(c * p).transpose();
      const Eigen::MatrixXd l = llt.matrixL();
      res.log_likelihood += -0.5 * (n * kLog2Pi + 2.0 * l.diagonal().array().log().sum() +
                                    v.dot(llt.solve(v)));
      m = m + gain * v;
      const Eigen::MatrixXd ikc = Eigen::MatrixXd::Identity(d, d) - gain * c;
      p = ikc * p * ikc.transpose() + gain * r * gain.transpose();
    }
    p = 0.5 * (p + p.transpose());
    res.filtered.emplace_back(m, p);
  }

  res.smoothed = res.filtered;
  res.cross.assign(t_len, Eigen::MatrixXd::Zero(d, d));
  for (int t = t_len - 2; t >= 0; --t) {
    const Eigen::MatrixXd& a = layer.dynamics[modes[t + 1]];
    Eigen::LLT<Eigen::MatrixXd> llt(pred_p[t + 1]);
    require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
            "predicted covariance not positive-definite at t=" + std::to_string(t + 1));
    const Eigen::MatrixXd gain = llt.solve(a * res.filtered[t].cov).transpose();
    const GaussianBelief& next = res.smoothed[t + 1];
    Eigen::VectorXd ms = res.filtered[t].mean + gain * (next.mean - pred_m[t + 1]);
    Eigen::MatrixXd ps = res.filtered[t].cov + gain * (next.cov - pred_p[t + 1]) * gain.transpose();
    ps = 0.5 * (ps + ps.transpose());
    res.cross[t + 1] = next.cov * gain.transpose();
    res.smoothed[t] = GaussianBelief(std::move(ms), std::move(ps));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Structured VI

std::vector<int> HybridTrajectory::map_modes() const {
  std::vector<int> out(switch_marginals.cols());
  for (Eigen::Index t = 0; t < switch_marginals.cols(); ++t) {
    Eigen::Index arg = 0;
    switch_marginals.col(t).maxCoeff(&arg);
    out[t] = static_cast<int>(arg);
  }
  return out;
}

StructuredVi::StructuredVi(const SldsLayer& layer, const SldsSequence& seq, SldsContext ctx)
    : layer_(&layer), seq_(&seq) {
  layer.validate();
  check_sequence(layer, seq);
  set_context(std::move(ctx));
  for (int k = 0; k < layer.num_modes; ++k) {
    noise_llt_.emplace_back(stabilize_cov(layer.noise[k]));
    require(noise_llt_.back().info() == Eigen::Success, ErrorKind::kNumerical,
            "mode noise is not positive-definite");
    noise_logdet_.push_back(log_det_spd(layer.noise[k]));
  }
  init_uniform();
  update_states();
  update_expansion();
}

StructuredVi::StructuredVi(const SldsLayer& layer, const SldsSequence& seq, SldsContext ctx,
                           const HybridTrajectory& warm)
    : layer_(&layer), seq_(&seq) {
  layer.validate();
  check_sequence(layer, seq);
  set_context(std::move(ctx));
  for (int k = 0; k < layer.num_modes; ++k) {
    noise_llt_.emplace_back(stabilize_cov(layer.noise[k]));
    noise_logdet_.push_back(log_det_spd(layer.noise[k]));
  }
  require(warm.length() == seq.length() && warm.switch_marginals.rows() == layer.num_modes &&
              warm.means.rows() == layer.state_dim,
          ErrorKind::kShape, "warm-start posterior does not match the sequence");
  traj_ = warm;
  traj_.elbo.clear();
}

void StructuredVi::set_context(SldsContext ctx) {
  ctx_ = std::move(ctx);
  restart_of_.assign(seq_->length(), -1);
  for (std::size_t r = 0; r < ctx_.restarts.size(); ++r) {
    const Restart& rs = ctx_.restarts[r];
    require(rs.t >= 0 && rs.t < seq_->length(), ErrorKind::kShape, "restart time out of range");
    require(rs.weights.size() == rs.priors.size() && !rs.priors.empty(), ErrorKind::kShape,
            "restart needs one weight per prior");
    require(rs.switch_log_prior.size() == layer_->num_modes, ErrorKind::kShape,
            "restart switch prior has the wrong size");
    restart_of_[rs.t] = static_cast<int>(r);
  }
  for (const auto& e : ctx_.evidence)
    require(e.t >= 0 && e.t < seq_->length() && e.c.cols() == layer_->state_dim &&
                e.c.rows() == e.y.size() && e.r.rows() == e.y.size(),
            ErrorKind::kShape, "evidence term has the wrong shape");
}

Eigen::VectorXd StructuredVi::control_at(int t) const {
  if (layer_->control_dim == 0) return Eigen::VectorXd::Zero(0);
  return seq_->controls.row(t).transpose();
}

void StructuredVi::init_uniform() {
  const int k = layer_->num_modes, t_len = seq_->length(), d = layer_->state_dim;
  traj_.switch_marginals = Eigen::MatrixXd::Constant(k, t_len, 1.0 / k);
  traj_.switch_pairwise.assign(t_len, Eigen::MatrixXd::Constant(k, k, 1.0 / (k * k)));
  traj_.switch_pairwise[0].setZero();
  traj_.means = Eigen::MatrixXd::Zero(d, t_len);
  traj_.covs.assign(t_len, Eigen::MatrixXd::Identity(d, d));
  traj_.cross.assign(t_len, Eigen::MatrixXd::Zero(d, d));
  traj_.psi.assign(t_len, layer_->base_logits);
}

void StructuredVi::update_switches() {
  const SldsLayer& l = *layer_;
  const int k = l.num_modes, t_len = seq_->length();
  const Eigen::MatrixXd h = bohning_curvature(k);
  const auto& q = traj_;

  Eigen::VectorXd log_init;
  if (is_restart(0))
    log_init = ctx_.restarts[restart_of_[0]].switch_log_prior;
  else
    log_init = l.switch_init.probs.array().log().matrix();

  std::vector<Eigen::MatrixXd> log_pair(t_len);
  Eigen::MatrixXd unary = Eigen::MatrixXd::Zero(k, t_len);
  for (int t = 1; t < t_len; ++t) {
    if (is_restart(t)) {
      log_pair[t] = ctx_.restarts[restart_of_[t]].switch_log_prior.replicate(1, k);
      continue;
    }
    const Eigen::VectorXd& mp = q.means.col(t - 1);
    const Eigen::MatrixXd wswt = l.recurrence * q.covs[t - 1] * l.recurrence.transpose();
    const Eigen::VectorXd wm = l.recurrence * mp;
    Eigen::MatrixXd lp = l.base_logits;
    lp.colwise() += wm;
    for (int i = 0; i < k; ++i) {
      const Eigen::VectorXd eta = l.base_logits.col(i) + wm;
      lp.col(i).array() -= bohning_bound(q.psi[t].col(i), eta, h, wswt);
    }
    log_pair[t] = std::move(lp);
    const Eigen::VectorXd u = t > 0 ? control_at(t - 1) : Eigen::VectorXd();
    for (int j = 0; j < k; ++j) {
      const Eigen::MatrixXd& a = l.dynamics[j];
      Eigen::VectorXd c = l.bias[j];
      if (l.control_dim > 0) c += l.control[j] * u;
      const Eigen::VectorXd mu = q.means.col(t) - a * mp - c;
      const Eigen::MatrixXd cov = q.covs[t] - a * q.cross[t].transpose() -
                                  q.cross[t] * a.transpose() + a * q.covs[t - 1] * a.transpose();
      const Eigen::MatrixXd sinv = noise_llt_[j].solve(Eigen::MatrixXd::Identity(l.state_dim, l.state_dim));
      unary(j, t) = expected_gauss(mu, cov, sinv, noise_logdet_[j]);
    }
  }
  ChainSmooth cs = chain_smooth(log_init, log_pair, unary);
  traj_.switch_marginals = std::move(cs.marginals);
  traj_.switch_pairwise = std::move(cs.pairwise);
}

void StructuredVi::update_states() {
  const SldsLayer& l = *layer_;
  const int k = l.num_modes, d = l.state_dim, t_len = seq_->length();
  const Eigen::MatrixXd hcurv = bohning_curvature(k);
  const Eigen::MatrixXd& w = l.recurrence;
  const Eigen::MatrixXd whw = w.transpose() * hcurv * w;
  auto& q = traj_;

  std::vector<Eigen::MatrixXd> jd(t_len, Eigen::MatrixXd::Zero(d, d));
  std::vector<Eigen::MatrixXd> jo(t_len, Eigen::MatrixXd::Zero(d, d));  // J_{t,t-1}
  std::vector<Eigen::VectorXd> hv(t_len, Eigen::VectorXd::Zero(d));

  auto add_prior = [&](int t, const GaussianBelief& g, double weight) {
    const Eigen::MatrixXd pinv = inverse_spd(g.cov, "initial covariance not positive-definite");
    jd[t] += weight * pinv;
    hv[t] += weight * pinv * g.mean;
  };
  std::vector<Eigen::MatrixXd> sinv;
  for (int j = 0; j < k; ++j)
    sinv.push_back(noise_llt_[j].solve(Eigen::MatrixXd::Identity(d, d)));

  for (int t = 0; t < t_len; ++t) {
    if (is_restart(t)) {
      const Restart& r = ctx_.restarts[restart_of_[t]];
      for (std::size_t i = 0; i < r.priors.size(); ++i) add_prior(t, r.priors[i], r.weights[i]);
    } else if (t == 0) {
      add_prior(0, l.state_init, 1.0);
    } else {
      const Eigen::VectorXd u = control_at(t - 1);
      for (int j = 0; j < k; ++j) {
        const double g = q.switch_marginals(j, t);
        if (g == 0.0) continue;
        const Eigen::MatrixXd& a = l.dynamics[j];
        Eigen::VectorXd c = l.bias[j];
        if (l.control_dim > 0) c += l.control[j] * u;
        const Eigen::MatrixXd pa = sinv[j] * a;
        jd[t] += g * sinv[j];
        jd[t - 1] += g * a.transpose() * pa;
        jo[t] -= g * pa;
        hv[t] += g * sinv[j] * c;
        hv[t - 1] -= g * pa.transpose() * c;
      }
      if (k > 1) {
        const Eigen::MatrixXd& xi = q.switch_pairwise[t];
        hv[t - 1] += w.transpose() * xi.rowwise().sum();
        const Eigen::VectorXd prev = xi.colwise().sum().transpose();
        for (int i = 0; i < k; ++i) {
          if (prev[i] == 0.0) continue;
          Eigen::VectorXd g;
          softmax_lse(q.psi[t].col(i), &g);
          const Eigen::VectorXd dvec = l.base_logits.col(i) - q.psi[t].col(i);
          jd[t - 1] += prev[i] * whw;
          hv[t - 1] -= prev[i] * w.transpose() * (g + hcurv * dvec);
        }
      }
    }
    const std::vector<int> o = observed_dims(seq_->obs, t);
    if (!o.empty()) {
      const int n = static_cast<int>(o.size());
      Eigen::MatrixXd c(n, d), r(n, n);
      Eigen::VectorXd y(n);
      for (int i = 0; i < n; ++i) {
        c.row(i) = l.emission.row(o[i]);
        y[i] = seq_->obs(t, o[i]);
        for (int j = 0; j < n; ++j) r(i, j) = l.obs_noise(o[i], o[j]);
      }
      const Eigen::MatrixXd rinv = inverse_spd(r, "observation noise not positive-definite");
      jd[t] += c.transpose() * rinv * c;
      hv[t] += c.transpose() * rinv * y;
    }
  }
  for (const auto& e : ctx_.evidence) {
    const Eigen::MatrixXd rinv = inverse_spd(e.r, "evidence noise not positive-definite");
    jd[e.t] += e.c.transpose() * rinv * e.c;
    hv[e.t] += e.c.transpose() * rinv * e.y;
  }

  // Block-tridiagonal solve by forward elimination and back substitution.
  std::vector<Eigen::LLT<Eigen::MatrixXd>> dl(t_len);
  std::vector<Eigen::VectorXd> ht(t_len);
  for (int t = 0; t < t_len; ++t) {
    Eigen::MatrixXd dt = jd[t];
    ht[t] = hv[t];
    if (t > 0) {
      dt -= jo[t] * dl[t - 1].solve(jo[t].transpose());
      ht[t] -= jo[t] * dl[t - 1].solve(ht[t - 1]);
    }
    dl[t].compute(0.5 * (dt + dt.transpose()));
    require(dl[t].info() == Eigen::Success, ErrorKind::kNumerical,
            "state precision not positive-definite at t=" + std::to_string(t));
  }
  q.means.resize(d, t_len);
  q.covs.assign(t_len, Eigen::MatrixXd::Zero(d, d));
  q.cross.assign(t_len, Eigen::MatrixXd::Zero(d, d));
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  q.means.col(t_len - 1) = dl[t_len - 1].solve(ht[t_len - 1]);
  q.covs[t_len - 1] = dl[t_len - 1].solve(eye);
  for (int t = t_len - 2; t >= 0; --t) {
    const Eigen::MatrixXd g = dl[t].solve(jo[t + 1].transpose());
    q.means.col(t) = dl[t].solve(ht[t]) - g * q.means.col(t + 1);
    Eigen::MatrixXd s = dl[t].solve(eye) + g * q.covs[t + 1] * g.transpose();
    q.covs[t] = 0.5 * (s + s.transpose());
    q.cross[t + 1] = -q.covs[t + 1] * g.transpose();
  }
}

void StructuredVi::update_expansion() {
  const SldsLayer& l = *layer_;
  for (int t = 1; t < seq_->length(); ++t) {
    if (is_restart(t)) continue;
    Eigen::MatrixXd psi = l.base_logits;
    psi.colwise() += l.recurrence * traj_.means.col(t - 1);
    traj_.psi[t] = std::move(psi);
  }
}

double expected_log_normal(const GaussianBelief& q, const GaussianBelief& prior) {
  require(q.dim() == prior.dim(), ErrorKind::kShape, "expected_log_normal dimension mismatch");
  const Eigen::MatrixXd pinv = inverse_spd(prior.cov, "prior covariance not positive-definite");
  return expected_gauss(q.mean - prior.mean, q.cov, pinv, log_det_spd(prior.cov));
}

double StructuredVi::elbo() const {
  const SldsLayer& l = *layer_;
  const int k = l.num_modes, d = l.state_dim, t_len = seq_->length();
  const auto& q = traj_;
  const Eigen::MatrixXd hcurv = bohning_curvature(k);
  double e = 0.0;

  // discrete chain: expected log potentials and entropy
  const Eigen::VectorXd g0 = q.switch_marginals.col(0);
  const Eigen::VectorXd log_init = is_restart(0)
                                       ? ctx_.restarts[restart_of_[0]].switch_log_prior
                                       : Eigen::VectorXd(l.switch_init.probs.array().log().matrix());
  for (int j = 0; j < k; ++j)
    if (g0[j] > 0.0) e += g0[j] * (log_init[j] - std::log(g0[j]));
  for (int t = 1; t < t_len; ++t) {
    const Eigen::MatrixXd& xi = q.switch_pairwise[t];
    const Eigen::VectorXd prev = q.switch_marginals.col(t - 1);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        if (xi(j, i) > 0.0) e -= xi(j, i) * (std::log(xi(j, i)) - std::log(prev[i]));
    if (is_restart(t)) {
      e += xi.rowwise().sum().dot(ctx_.restarts[restart_of_[t]].switch_log_prior);
      continue;
    }
    if (k > 1) {
      const Eigen::VectorXd wm = l.recurrence * q.means.col(t - 1);
      const Eigen::MatrixXd wswt = l.recurrence * q.covs[t - 1] * l.recurrence.transpose();
      e += xi.cwiseProduct(l.base_logits).sum() + xi.rowwise().sum().dot(wm);
      for (int i = 0; i < k; ++i) {
        const double pi = xi.col(i).sum();
        if (pi == 0.0) continue;
        e -= pi * bohning_bound(q.psi[t].col(i), l.base_logits.col(i) + wm, hcurv, wswt);
      }
    }
  }

  // continuous chain
  auto prior_term = [&](int t, const GaussianBelief& g) {
    const Eigen::MatrixXd pinv = inverse_spd(g.cov, "initial covariance not positive-definite");
    return expected_gauss(q.means.col(t) - g.mean, q.covs[t], pinv, log_det_spd(g.cov));
  };
  for (int t = 0; t < t_len; ++t) {
    if (is_restart(t)) {
      const Restart& r = ctx_.restarts[restart_of_[t]];
      for (std::size_t i = 0; i < r.priors.size(); ++i)
        e += r.weights[i] * prior_term(t, r.priors[i]);
      e += r.offset;
    } else if (t == 0) {
      e += prior_term(0, l.state_init);
    } else {
      const Eigen::VectorXd u = control_at(t - 1);
      for (int j = 0; j < k; ++j) {
        const double g = q.switch_marginals(j, t);
        if (g == 0.0) continue;
        const Eigen::MatrixXd& a = l.dynamics[j];
        Eigen::VectorXd c = l.bias[j];
        if (l.control_dim > 0) c += l.control[j] * u;
        const Eigen::VectorXd mu = q.means.col(t) - a * q.means.col(t - 1) - c;
        const Eigen::MatrixXd cov = q.covs[t] - a * q.cross[t].transpose() -
                                    q.cross[t] * a.transpose() + a * q.covs[t - 1] * a.transpose();
        e += g * expected_gauss(mu, cov, noise_llt_[j].solve(Eigen::MatrixXd::Identity(d, d)),
                                noise_logdet_[j]);
      }
    }
    const std::vector<int> o = observed_dims(seq_->obs, t);
    if (!o.empty()) {
      const int n = static_cast<int>(o.size());
      Eigen::MatrixXd c(n, d), r(n, n);
      Eigen::VectorXd y(n);
      for (int i = 0; i < n; ++i) {
        c.row(i) = l.emission.row(o[i]);
        y[i] = seq_->obs(t, o[i]);
        for (int j = 0; j < n; ++j) r(i, j) = l.obs_noise(o[i], o[j]);
      }
      e += expected_gauss(y - c * q.means.col(t), c * q.covs[t] * c.transpose(),
                          inverse_spd(r, "observation noise not positive-definite"), log_det_spd(r));
    }
  }
  for (const auto& ev : ctx_.evidence)
    e += expected_gauss(ev.y - ev.c * q.means.col(ev.t), ev.c * q.covs[ev.t] * ev.c.transpose(),
                        inverse_spd(ev.r, "evidence noise not positive-definite"),
                        log_det_spd(ev.r)) +
         ev.offset;

  // entropy of the Gauss-Markov chain from marginals and adjacent pairs
  const double unit = 0.5 * (1.0 + kLog2Pi);
  e += d * unit + 0.5 * logdet_posterior(q.covs[0]);
  for (int t = 1; t < t_len; ++t) {
    Eigen::MatrixXd joint(2 * d, 2 * d);
    joint << q.covs[t], q.cross[t], q.cross[t].transpose(), q.covs[t - 1];
    e += d * unit + 0.5 * (logdet_posterior(joint) - logdet_posterior(q.covs[t - 1]));
  }
  return e;
}

void StructuredVi::iterate() {
  update_switches();
  update_states();
  update_expansion();
  const double e = elbo();
  require(std::isfinite(e), ErrorKind::kNumerical,
          "non-finite ELBO at iteration " + std::to_string(traj_.elbo.size()));
  traj_.elbo.push_back(e);
}

HybridTrajectory structured_vi(const SldsLayer& layer, const SldsSequence& seq, int iters,
                               const SldsContext& ctx) {
  require(iters >= 1, ErrorKind::kPrecondition, "structured_vi needs iters >= 1");
  StructuredVi vi(layer, seq, ctx);
  for (int i = 0; i < iters; ++i) vi.iterate();
  return vi.trajectory();
}

// ---------------------------------------------------------------------------
// Learning

std::vector<RegressionStats> regression_stats(const SldsLayer& layer, const SldsSequence& seq,
                                              const HybridTrajectory& q,
                                              const std::vector<int>& restarts, double weight) {
  const int d = layer.state_dim, p = layer.regressor_dim(), u_dim = layer.control_dim;
  std::vector<RegressionStats> out(layer.num_modes);
  for (auto& s : out) {
    s.zz = Eigen::MatrixXd::Zero(p, p);
    s.xz = Eigen::MatrixXd::Zero(d, p);
    s.xx = Eigen::MatrixXd::Zero(d, d);
  }
  std::vector<bool> skip(seq.length(), false);
  for (int t : restarts) skip[t] = true;
  for (int t = 1; t < seq.length(); ++t) {
    if (skip[t]) continue;
    Eigen::VectorXd z(p);
    z.head(d) = q.means.col(t - 1);
    if (u_dim > 0) z.segment(d, u_dim) = seq.controls.row(t - 1).transpose();
    z[p - 1] = 1.0;
    Eigen::MatrixXd ezz = z * z.transpose();
    ezz.topLeftCorner(d, d) += q.covs[t - 1];
    Eigen::MatrixXd exz = q.means.col(t) * z.transpose();
    exz.leftCols(d) += q.cross[t];
    const Eigen::MatrixXd exx = q.covs[t] + q.means.col(t) * q.means.col(t).transpose();
    for (int k = 0; k < layer.num_modes; ++k) {
      const double g = weight * q.switch_marginals(k, t);
      if (g == 0.0) continue;
      out[k].zz += g * ezz;
      out[k].xz += g * exz;
      out[k].xx += g * exx;
      out[k].count += g;
    }
  }
  return out;
}

void regression_map(const RegressionPrior& prior, const RegressionStats& s, Eigen::MatrixXd& m_out,
                     Eigen::MatrixXd& sigma_out) {
  const int d = static_cast<int>(prior.mean.rows());
  const int p = static_cast<int>(prior.mean.cols());
  const Eigen::MatrixXd lam = prior.precision + s.zz;
  Eigen::LLT<Eigen::MatrixXd> llt(lam);
  require(llt.info() == Eigen::Success, ErrorKind::kNumerical,
          "regression precision not positive-definite");
  const Eigen::MatrixXd rhs = prior.mean * prior.precision + s.xz;
  m_out = llt.solve(rhs.transpose()).transpose();
  Eigen::MatrixXd psi = prior.scatter + s.xx + prior.mean * prior.precision * prior.mean.transpose() -
                        m_out * lam * m_out.transpose();
  psi = 0.5 * (psi + psi.transpose());
  sigma_out = stabilize_cov(psi / (prior.dof + s.count + d + 1 + p));
}

namespace {

struct RecurrenceTerm {
  Eigen::MatrixXd xi;    // next x prev
  Eigen::VectorXd prev;  // marginal of the previous mode
  Eigen::VectorXd m;     // E x_{t-1}
  Eigen::MatrixXd s;     // Cov x_{t-1}
  Eigen::MatrixXd psi;   // K x K
  double weight = 1.0;
};

double recurrence_objective(const std::vector<RecurrenceTerm>& terms, const Eigen::MatrixXd& base,
                            const Eigen::MatrixXd& w, Eigen::MatrixXd* g_base, Eigen::MatrixXd* g_w) {
  const int k = static_cast<int>(base.rows());
  const Eigen::MatrixXd h = bohning_curvature(k);
  double f = 0.0;
  if (g_base != nullptr) {
    g_base->setZero(base.rows(), base.cols());
    g_w->setZero(w.rows(), w.cols());
  }
  for (const auto& r : terms) {
    const Eigen::VectorXd wm = w * r.m;
    const Eigen::MatrixXd wswt = w * r.s * w.transpose();
    const Eigen::VectorXd next = r.xi.rowwise().sum();
    f += r.weight * (r.xi.cwiseProduct(base).sum() + next.dot(wm));
    if (g_base != nullptr) {
      *g_base += r.weight * r.xi;
      *g_w += r.weight * next * r.m.transpose();
    }
    for (int i = 0; i < k; ++i) {
      if (r.prev[i] == 0.0) continue;
      const Eigen::VectorXd eta = base.col(i) + wm;
      f -= r.weight * r.prev[i] * bohning_bound(r.psi.col(i), eta, h, wswt);
      if (g_base != nullptr) {
        Eigen::VectorXd g;
        softmax_lse(r.psi.col(i), &g);
        const Eigen::VectorXd ev = g + h * (eta - r.psi.col(i));
        g_base->col(i) -= r.weight * r.prev[i] * ev;
        *g_w -= r.weight * r.prev[i] * (ev * r.m.transpose() + h * w * r.s);
      }
    }
  }
  return f;
}

}  // namespace

SldsLearnResult vb_learn(const SldsLayer& layer, const std::vector<SldsSequence>& data, int sweeps,
                         const SldsLearnOptions& opts, const std::vector<double>& weights) {
  require(sweeps >= 1, ErrorKind::kPrecondition, "vb_learn needs sweeps >= 1");
  require(!data.empty(), ErrorKind::kData, "vb_learn needs at least one sequence");
  require(weights.empty() || weights.size() == data.size(), ErrorKind::kShape,
          "one weight per sequence required");
  require(opts.vi_iters >= 1, ErrorKind::kConfig, "vi_iters must be >= 1");
  auto weight_of = [&](std::size_t n) { return weights.empty() ? 1.0 : weights[n]; };

  SldsLearnResult res;
  res.layer = layer;
  res.layer.validate();
  SldsLayer& cur = res.layer;
  std::vector<HybridTrajectory> post;
  for (const auto& seq : data) post.push_back(StructuredVi(cur, seq).trajectory());

  for (int sweep = 0; sweep < sweeps; ++sweep) {
    // E-step, warm-started from the previous posteriors
    double total = 0.0;
    for (std::size_t n = 0; n < data.size(); ++n) {
      StructuredVi vi(cur, data[n], {}, post[n]);
      for (int i = 0; i < opts.vi_iters; ++i) vi.iterate();
      post[n] = vi.trajectory();
      total += weight_of(n) * post[n].final_elbo();
    }
    for (int k = 0; k < cur.num_modes; ++k)
      total += cur.dynamics_prior[k].log_density(cur.regression(k), cur.noise[k]);
    require(std::isfinite(total), ErrorKind::kNumerical,
            "non-finite ELBO at sweep " + std::to_string(sweep));
    res.elbo.push_back(total);

    // M-step: regression per mode
    std::vector<RegressionStats> stats;
    for (std::size_t n = 0; n < data.size(); ++n) {
      auto s = regression_stats(cur, data[n], post[n], {}, weight_of(n));
      if (stats.empty()) {
        stats = std::move(s);
      } else {
        for (int k = 0; k < cur.num_modes; ++k) {
          stats[k].zz += s[k].zz;
          stats[k].xz += s[k].xz;
          stats[k].xx += s[k].xx;
          stats[k].count += s[k].count;
        }
      }
    }
    for (int k = 0; k < cur.num_modes; ++k) {
      Eigen::MatrixXd m, sigma;
      regression_map(cur.dynamics_prior[k], stats[k], m, sigma);
      cur.set_regression(k, m);
      cur.noise[k] = sigma;
    }

    // M-step: recurrence by gradient ascent on the bound (step rejected if it decreases)
    if (opts.learn_recurrence && cur.num_modes > 1) {
      std::vector<RecurrenceTerm> terms;
      double count = 0.0;
      for (std::size_t n = 0; n < data.size(); ++n)
        for (int t = 1; t < data[n].length(); ++t) {
          RecurrenceTerm r;
          r.xi = post[n].switch_pairwise[t];
          r.prev = post[n].switch_marginals.col(t - 1);
          r.m = post[n].means.col(t - 1);
          r.s = post[n].covs[t - 1];
          r.psi = post[n].psi[t];
          r.weight = weight_of(n);
          count += r.weight;
          terms.push_back(std::move(r));
        }
      if (count > 0.0) {
        Eigen::MatrixXd gb, gw;
        double f = recurrence_objective(terms, cur.base_logits, cur.recurrence, &gb, &gw) / count;
        for (int step = 0; step < opts.recurrence_steps; ++step) {
          const Eigen::MatrixXd nb = cur.base_logits + opts.recurrence_step * gb / count;
          const Eigen::MatrixXd nw = cur.recurrence + opts.recurrence_step * gw / count;
          Eigen::MatrixXd ngb, ngw;
          const double nf = recurrence_objective(terms, nb, nw, &ngb, &ngw) / count;
          if (!(nf >= f)) break;
          cur.base_logits = nb;
          cur.recurrence = nw;
          gb = std::move(ngb);
          gw = std::move(ngw);
          f = nf;
        }
      }
    }
  }
  res.posteriors = std::move(post);
  return res;
}

}  // namespace wmb

#pragma once

#include <cmath>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "wmb/hmm.hpp"
#include "wmb/planning.hpp"

namespace oracle {

/// KL(Dir(a) || Dir(b)) from the textbook formula.
inline double dir_kl(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double a0 = a.sum(), b0 = b.sum();
  double kl = std::lgamma(a0) - std::lgamma(b0);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    kl += std::lgamma(b[i]) - std::lgamma(a[i]) + (a[i] - b[i]) * (digamma(a[i]) - digamma(a0));
  return kl;
}

inline double one_count(const wmb::DirichletCounts& c, int outcome, int col) {
  Eigen::VectorXd a = c.counts.col(col);
  Eigen::VectorXd post = a;
  post[outcome] += 1.0;
  return dir_kl(post, a);
}

struct BranchTerms {
  double preference = 0.0, state_ig = 0.0, param_ig = 0.0;
};

/// Enumerate every latent path and every joint outcome at every step.
inline BranchTerms branch_enumeration(const wmb::HmmLayer& layer, const Eigen::VectorXd& belief,
                                      const std::vector<int>& policy, const wmb::Preferences& prefs,
                                      bool param_ig) {
  using namespace wmb;
  const JointSpace lat = layer.latent_space();
  const JointSpace cols = layer.obs_column_space();
  const int nf = layer.num_factors(), nm = layer.num_modalities();
  // digit position of (f, g) in the latent space
  std::vector<std::vector<int>> pos(nf);
  int d = 0;
  for (int f = 0; f < nf; ++f)
    for (int g = 0; g < layer.num_orders(f); ++g) pos[f].push_back(d++);

  auto col_of = [&](const std::vector<int>& z) {
    std::vector<int> c;
    for (int f = 0; f < nf; ++f) c.push_back(z[pos[f][0]]);
    return cols.encode(c);
  };
  auto trans_prob = [&](const std::vector<int>& zp, const std::vector<int>& zn, int a) {
    double p = 1.0;
    for (int f = 0; f < nf; ++f)
      for (int g = 0; g < layer.num_orders(f); ++g) {
        const int up = g + 1 < layer.num_orders(f) ? zn[pos[f][g + 1]] : 0;
        p *= layer.trans[f][g].mean()(zn[pos[f][g]], layer.trans_config(f, g, zp[pos[f][g]], up, a));
      }
    return p;
  };
  auto trans_kl = [&](const std::vector<int>& zp, const std::vector<int>& zn, int a) {
    double s = 0.0;
    for (int f = 0; f < nf; ++f)
      for (int g = 0; g < layer.num_orders(f); ++g) {
        const int up = g + 1 < layer.num_orders(f) ? zn[pos[f][g + 1]] : 0;
        s += one_count(layer.trans[f][g], zn[pos[f][g]], layer.trans_config(f, g, zp[pos[f][g]], up, a));
      }
    return s;
  };
  std::vector<int> radices;
  for (int m = 0; m < nm; ++m) radices.push_back(layer.shape.num_obs[m]);
  const JointSpace outcomes(radices);

  const int h = static_cast<int>(policy.size()), n = lat.size();
  // step tables p(z_tau, o_tau) and p(z_{tau-1}, z_tau)
  std::vector<std::map<std::pair<int, int>, double>> zo(h), pair(h);
  for_each_path(n, h + 1, [&](const std::vector<int>& path) {
    double p = belief[path[0]];
    for (int t = 0; t < h && p > 0.0; ++t) p *= trans_prob(lat.decode(path[t]), lat.decode(path[t + 1]), policy[t]);
    if (p == 0.0) return;
    for (int t = 0; t < h; ++t) {
      pair[t][{path[t], path[t + 1]}] += p;
      const int c = col_of(lat.decode(path[t + 1]));
      for (int o = 0; o < outcomes.size(); ++o) {
        double po = p;
        for (int m = 0; m < nm; ++m) po *= layer.obs[m].mean()(outcomes.digit(o, m), c);
        zo[t][{path[t + 1], o}] += po;
      }
    }
  });

  BranchTerms out;
  for (int t = 0; t < h; ++t) {
    std::map<int, double> pz, po;
    for (const auto& [k, v] : zo[t]) {
      pz[k.first] += v;
      po[k.second] += v;
    }
    for (const auto& [k, v] : zo[t]) {
      if (v <= 0.0) continue;
      out.state_ig += v * std::log(v / (pz[k.first] * po[k.second]));
      const std::vector<int> dig = outcomes.decode(k.second);
      for (int m = 0; m < nm; ++m) {
        if (!prefs.log_pref.empty() && prefs.log_pref[m].size() > 0) out.preference -= v * prefs.log_pref[m][dig[m]];
        if (param_ig) out.param_ig += v * one_count(layer.obs[m], dig[m], col_of(lat.decode(k.first)));
      }
    }
    if (param_ig)
      for (const auto& [k, v] : pair[t]) out.param_ig += v * trans_kl(lat.decode(k.first), lat.decode(k.second), policy[t]);
  }
  return out;
}

}  // namespace oracle

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "sdss/dataset.hpp"
#include "sdss/error.hpp"
#include "sdss/policy.hpp"
#include "sdss/surrogates.hpp"

namespace sdss {

struct PropensityFloor {
  double floor = 1e-4;
  bool apply = true;
};

namespace detail {

/// Effective log-propensity under the floor; counts floored terms.
inline double floored_log_pi(double log_pi, const PropensityFloor& f, std::size_t& floored) {
  if (f.floor <= 0.0) return log_pi;
  const double lf = std::log(f.floor);
  if (log_pi >= lf) return log_pi;
  if (!f.apply) throw NumericFailure("weight overflow: propensity below floor with flooring disabled");
  ++floored;
  return lf;
}

}  // namespace detail

/// The SDSS training objective: per-trajectory term
///   L_i = (sum_t y_it + shift_t) * prod_t Gamma_t(g_t(H_it); A_it) / prod_t pi_it
/// and its sample mean over a set of rows. Features, weights and actions are cached at
/// construction so minibatch passes only run the policy and the surrogate.
class Objective {
 public:
  Objective(const Dataset& ds, const Policy& policy, std::vector<Surrogate> phi, PropensityFloor floor = {})
      : policy_(&policy), phi_(std::move(phi)), n_(ds.size()), T_(ds.stages()) {
    detail::require(!ds.empty(), "Objective: empty dataset");
    detail::require(policy.stages() == T_, "Objective: policy and dataset disagree on the number of stages");
    if (phi_.size() == 1 && T_ > 1) phi_.assign(T_, phi_.front());
    detail::require(static_cast<int>(phi_.size()) == T_, "Objective: need one surrogate per stage");
    for (int t = 0; t < T_; ++t) {
      detail::require(ds.stage(t).k == policy.features().spec()[t].k &&
                          ds.stage(t).cov_dim == policy.features().spec()[t].cov_dim,
                      "Objective: policy feature layout does not match the dataset");
    }
    feats_.resize(T_);
    dims_.resize(T_);
    actions_.resize(T_);
    for (int t = 0; t < T_; ++t) {
      dims_[t] = policy.features().dim(t);
      feats_[t].resize(n_ * dims_[t]);
      actions_[t].resize(n_);
      for (std::size_t i = 0; i < n_; ++i) {
        policy.features().encode(ds, t, i, {feats_[t].data() + i * dims_[t], dims_[t]});
        actions_[t][i] = ds.action(t, i);
      }
    }
    weight_.resize(n_);
    const auto& shift = ds.reward_shift();
    std::size_t floored = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      double y = 0.0, lp = 0.0;
      for (int t = 0; t < T_; ++t) {
        y += ds.reward(t, i) + shift[t];
        lp += detail::floored_log_pi(ds.log_propensity(t, i), floor, floored);
      }
      weight_[i] = y * std::exp(-lp);
      if (!std::isfinite(weight_[i])) throw NumericFailure("weight overflow: non-finite IPW weight");
    }
    floored_fraction_ = static_cast<double>(floored) / static_cast<double>(n_ * T_);
  }

  std::size_t size() const { return n_; }
  std::size_t dim() const { return policy_->size(); }
  double floored_fraction() const { return floored_fraction_; }
  double weight(std::size_t i) const { return weight_[i]; }

  /// L_i; adds dL_i/dtheta * scale into `grad` when non-empty. Dropout is drawn from
  /// `rng` when given (training passes).
  double traj_value(std::span<const double> theta, std::size_t i, std::span<double> grad, double scale = 1.0,
                    Rng* rng = nullptr) const {
    struct StageWork {
      Policy::Cache cache;
      std::vector<double> g, dg;
      double gamma = 0.0;
    };
    thread_local std::vector<StageWork> work;
    work.resize(T_);
    const bool want = !grad.empty();
    for (int t = 0; t < T_; ++t) {
      auto& w = work[t];
      const int h = policy_->heads(t);
      w.g.resize(h);
      w.dg.resize(h);
      std::span<const double> x(feats_[t].data() + i * dims_[t], dims_[t]);
      policy_->forward(theta, t, x, w.g, want ? &w.cache : nullptr, rng != nullptr, rng);
      w.gamma = phi_[t].gamma(w.g, actions_[t][i], want ? std::span<double>(w.dg) : std::span<double>{});
    }
    double prod = 1.0;
    for (int t = 0; t < T_; ++t) prod *= work[t].gamma;
    const double value = weight_[i] * prod;
    if (!want) return value;
    // prefix/suffix products: exact even when a single Gamma factor is zero
    double pre = 1.0;
    std::vector<double> suf(T_ + 1, 1.0);
    for (int t = T_; t-- > 0;) suf[t] = suf[t + 1] * work[t].gamma;
    std::vector<double> up;
    for (int t = 0; t < T_; ++t) {
      const double c = scale * weight_[i] * pre * suf[t + 1];
      if (c != 0.0) {
        up.assign(work[t].dg.begin(), work[t].dg.end());
        for (auto& u : up) u *= c;
        policy_->backward(theta, work[t].cache, up, grad);
      }
      pre *= work[t].gamma;
    }
    return value;
  }

  /// Mean of L_i over `rows` (all rows when empty); `grad` receives the gradient of the mean.
  double value(std::span<const double> theta, std::span<const std::size_t> rows, std::span<double> grad = {},
               Rng* rng = nullptr) const {
    if (!grad.empty()) {
      detail::require(grad.size() == dim(), "Objective: gradient buffer has wrong size");
      std::fill(grad.begin(), grad.end(), 0.0);
    }
    const std::size_t m = rows.empty() ? n_ : rows.size();
    const double scale = 1.0 / static_cast<double>(m);
    double s = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t i = rows.empty() ? r : rows[r];
      s += traj_value(theta, i, grad, scale, rng);
    }
    return s * scale;
  }

  double value(std::span<const double> theta) const { return value(theta, std::span<const std::size_t>{}); }

 private:
  const Policy* policy_;
  std::vector<Surrogate> phi_;
  std::size_t n_;
  int T_;
  std::vector<std::vector<double>> feats_;
  std::vector<std::size_t> dims_;
  std::vector<std::vector<int>> actions_;
  std::vector<double> weight_;
  double floored_fraction_ = 0.0;
};

/// Surrogate value of the policy at theta on the full dataset.
inline double surrogate_value_hat(const Dataset& ds, const Policy& policy, std::span<const double> theta,
                                  const Surrogate& phi, PropensityFloor floor = {}) {
  return Objective(ds, policy, {phi}, floor).value(theta);
}

/// IPW value of a decision rule on unshifted rewards:
///   P_n[ prod_t 1{a_t = d_t(h_t)} / pi_t * sum_t y_t ].
inline ValueEstimate ipw_value_hat(const Dataset& ds, const DecisionRule& rule, PropensityFloor floor = {}) {
  detail::require(!ds.empty(), "ipw_value_hat: empty dataset");
  std::vector<double> contrib(ds.size(), 0.0);
  std::vector<double> hist;
  std::size_t floored = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bool match = true;
    double lp = 0.0;
    for (int t = 0; t < ds.stages(); ++t) {
      lp += detail::floored_log_pi(ds.log_propensity(t, i), floor, floored);
      if (!match) continue;
      ds.raw_history(t, i, hist);
      if (rule(t, hist) != ds.action(t, i)) match = false;
    }
    if (match) contrib[i] = std::exp(-lp) * ds.total_reward(i);
  }
  auto v = summarize(contrib, ValueEstimate::Method::IPW);
  v.floored_fraction = static_cast<double>(floored) / static_cast<double>(ds.size() * ds.stages());
  return v;
}

}  // namespace sdss

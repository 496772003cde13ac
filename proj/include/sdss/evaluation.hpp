#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sdss/dataset.hpp"
#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/objective.hpp"
#include "sdss/policy.hpp"
#include "sdss/qlearning.hpp"

namespace sdss {

// ---------------------------------------------------------------------------
// Multinomial-logit propensity model

/// Stage-t multinomial logit with treatment k_t as the reference category. Features are
/// the unstandardized history encoding plus an intercept.
struct PropensityModel {
  FeatureMap features;
  int stage = 0;
  int k = 2;
  Eigen::MatrixXd coef;  // (k-1) x (d+1), intercept in column 0
  double clip = 0.0;     // lower bound applied to returned probabilities
  int iterations = 0;
  bool converged = false;
  bool separation_warning = false;
  std::vector<double> loglik_path;

  std::vector<double> log_probs_features(std::span<const double> x) const {
    std::vector<double> z(k, 0.0);
    for (int a = 0; a < k - 1; ++a) {
      double s = coef(a, 0);
      for (std::size_t j = 0; j < x.size(); ++j) s += coef(a, static_cast<Eigen::Index>(j) + 1) * x[j];
      z[a] = s;
    }
    const double m = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - m);
    lse = m + std::log(lse);
    for (auto& v : z) v -= lse;
    return z;
  }

  std::vector<double> probs_features(std::span<const double> x) const {
    auto lp = log_probs_features(x);
    for (auto& v : lp) v = std::max(std::exp(v), clip);
    return lp;
  }

  double probability(const Dataset& ds, std::size_t i, int a) const {
    std::vector<double> x(features.dim(stage));
    features.encode(ds, stage, i, x);
    return probs_features(x)[a - 1];
  }
};

namespace detail {

inline double mlogit_loglik(const Eigen::MatrixXd& X, const std::vector<int>& y, const Eigen::MatrixXd& B, int k) {
  double ll = 0.0;
  const Eigen::MatrixXd Z = X * B.transpose();  // n x (k-1)
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double m = 0.0;
    for (int a = 0; a < k - 1; ++a) m = std::max(m, Z(i, a));
    double s = std::exp(-m);
    for (int a = 0; a < k - 1; ++a) s += std::exp(Z(i, a) - m);
    const double lse = m + std::log(s);
    ll += (y[i] == k ? 0.0 : Z(i, y[i] - 1)) - lse;
  }
  return ll;
}

}  // namespace detail

/// Maximum likelihood by damped Newton: each step is halved until the log-likelihood
/// does not decrease. Stops when the gradient norm drops below `tol`.
inline PropensityModel fit_propensity_multinomial(const Dataset& ds, int stage, int max_iter = 100,
                                                  double tol = 1e-8, double clip = 0.0) {
  detail::require(!ds.empty(), "fit_propensity_multinomial: empty dataset");
  detail::require(stage >= 0 && stage < ds.stages(), "fit_propensity_multinomial: stage out of range");
  const int k = ds.stage(stage).k;
  {
    std::vector<int> seen(k, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) seen[ds.action(stage, i) - 1] = 1;
    for (int a = 0; a < k; ++a)
      if (!seen[a]) throw InvalidArgument("fit_propensity_multinomial: treatment " + std::to_string(a + 1) + " never observed");
  }
  PropensityModel m;
  m.features = FeatureMap(ds.spec(), false);
  m.stage = stage;
  m.k = k;
  m.clip = clip;
  const std::size_t d = m.features.dim(stage);
  const Eigen::Index n = static_cast<Eigen::Index>(ds.size());
  const Eigen::Index p = static_cast<Eigen::Index>(d) + 1;
  Eigen::MatrixXd X(n, p);
  std::vector<int> y(ds.size());
  std::vector<double> x(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    m.features.encode(ds, stage, static_cast<std::size_t>(i), x);
    X(i, 0) = 1.0;
    for (std::size_t j = 0; j < d; ++j) X(i, static_cast<Eigen::Index>(j) + 1) = x[j];
    y[i] = ds.action(stage, static_cast<std::size_t>(i));
  }
  const int q = k - 1;
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(q, p);
  double ll = detail::mlogit_loglik(X, y, B, k);
  m.loglik_path.push_back(ll);
  const Eigen::Index P = q * p;
  for (int it = 0; it < max_iter; ++it) {
    // gradient and Hessian of the log-likelihood in the (class-major) flattened coefficients
    Eigen::VectorXd g = Eigen::VectorXd::Zero(P);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(P, P);
    const Eigen::MatrixXd Z = X * B.transpose();
    std::vector<double> pr(q);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = 0.0;
      for (int a = 0; a < q; ++a) mx = std::max(mx, Z(i, a));
      double s = std::exp(-mx);
      for (int a = 0; a < q; ++a) s += (pr[a] = std::exp(Z(i, a) - mx));
      for (int a = 0; a < q; ++a) pr[a] /= s;
      const auto xi = X.row(i);
      for (int a = 0; a < q; ++a) {
        const double r = (y[i] == a + 1 ? 1.0 : 0.0) - pr[a];
        g.segment(a * p, p) += r * xi.transpose();
        for (int b = 0; b < q; ++b) {
          const double w = pr[a] * ((a == b ? 1.0 : 0.0) - pr[b]);
          H.block(a * p, b * p, p, p).noalias() -= w * xi.transpose() * xi;
        }
      }
    }
    m.iterations = it;
    if (g.norm() < tol) {
      m.converged = true;
      break;
    }
    Eigen::MatrixXd negH = -H;
    negH.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = negH.ldlt().solve(g);
    double t = 1.0;
    bool accepted = false;
    Eigen::MatrixXd Bn;
    double lln = ll;
    for (int half = 0; half < 40; ++half) {
      Bn = B;
      for (int a = 0; a < q; ++a) Bn.row(a) += t * step.segment(a * p, p).transpose();
      lln = detail::mlogit_loglik(X, y, Bn, k);
      if (std::isfinite(lln) && lln >= ll) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
    const bool stalled = (lln - ll) < 1e-14 * (1.0 + std::abs(ll));
    B = Bn;
    ll = lln;
    m.loglik_path.push_back(ll);
    if (stalled) {
      m.converged = true;
      break;
    }
    m.iterations = it + 1;
  }
  // fitted probabilities pinned within e^-30 of 0 or 1 mean separation, not convergence
  if ((X * B.transpose()).cwiseAbs().maxCoeff() > 30.0) {
    m.separation_warning = true;
    m.converged = false;
  }
  m.coef = B;
  return m;
}

// ---------------------------------------------------------------------------
// AIPW (two stages)

/// Outcome-model nuisances: q2(h_2, a) and q1d(h_1, a), both on raw histories.
struct NuisanceQ {
  std::function<double(std::span<const double>, int)> q1d;
  std::function<double(std::span<const double>, int)> q2;

  static NuisanceQ zero() {
    auto z = [](std::span<const double>, int) { return 0.0; };
    return {z, z};
  }
};

/// Ridge fits: Q2 regresses y_2 on (h_2, a_2); Q1^d regresses y_1 + Q2(h_2, d_2(h_2)) on
/// (h_1, a_1). Treatment intercepts are not penalized.
inline NuisanceQ fit_q_nuisance(const Dataset& ds, const DecisionRule& rule, double lambda = 1e-6,
                                bool interactions = true, bool quadratic = false) {
  detail::require(ds.stages() == 2, "fit_q_nuisance: two-stage data required");
  detail::require(!ds.empty(), "fit_q_nuisance: empty dataset");
  FeatureMap fm(ds.spec(), true);
  fm.fit(ds);
  LinearQ q2(fm, 1, interactions, quadratic, false);
  std::vector<double> target(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) target[i] = ds.reward(1, i);
  q2.fit(ds, target, lambda);
  std::vector<double> h;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.raw_history(1, i, h);
    target[i] = ds.reward(0, i) + q2.predict(ds, i, rule(1, h));
  }
  LinearQ q1(fm, 0, interactions, quadratic, false);
  q1.fit(ds, target, lambda);
  NuisanceQ out;
  out.q2 = [q2](std::span<const double> raw, int a) { return q2.predict_raw(raw, a); };
  out.q1d = [q1](std::span<const double> raw, int a) { return q1.predict_raw(raw, a); };
  return out;
}

/// Propensities for AIPW: the recorded behavior probabilities or fitted models.
struct PropensitySource {
  std::vector<PropensityModel> models;  // empty: use the dataset's recorded pi

  static PropensitySource truth() { return {}; }
};

/// Two-stage AIPW:
///   P_n[Q1d(h1, d1)] + P_n[1{a1=d1}/pi1 (y1 - Q1d(h1, a1) + Q2(h2, d2))]
///   + P_n[1{a1=d1} 1{a2=d2}/(pi1 pi2) (y2 - Q2(h2, a2))]
/// with the standard error from the empirical variance of the row contributions.
inline ValueEstimate aipw_value(const Dataset& ds, const DecisionRule& rule, const NuisanceQ& q,
                                const PropensitySource& props = {}, PropensityFloor floor = {}) {
  detail::require(ds.stages() == 2, "aipw_value: two-stage data required");
  detail::require(!ds.empty(), "aipw_value: empty dataset");
  detail::require(props.models.empty() || props.models.size() == 2, "aipw_value: need one propensity model per stage");
  std::vector<double> contrib(ds.size());
  std::vector<double> h1, h2;
  std::size_t floored = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.raw_history(0, i, h1);
    ds.raw_history(1, i, h2);
    const int a1 = ds.action(0, i), a2 = ds.action(1, i);
    const int d1 = rule(0, h1), d2 = rule(1, h2);
    double lp1, lp2;
    if (props.models.empty()) {
      lp1 = ds.log_propensity(0, i);
      lp2 = ds.log_propensity(1, i);
    } else {
      lp1 = std::log(props.models[0].probability(ds, i, a1));
      lp2 = std::log(props.models[1].probability(ds, i, a2));
    }
    lp1 = detail::floored_log_pi(lp1, floor, floored);
    lp2 = detail::floored_log_pi(lp2, floor, floored);
    double c = q.q1d(h1, d1);
    if (a1 == d1) {
      const double q2d = q.q2(h2, d2);
      c += std::exp(-lp1) * (ds.reward(0, i) - q.q1d(h1, a1) + q2d);
      if (a2 == d2) c += std::exp(-lp1 - lp2) * (ds.reward(1, i) - q.q2(h2, a2));
    }
    contrib[i] = c;
  }
  auto v = summarize(contrib, ValueEstimate::Method::AIPW);
  v.floored_fraction = static_cast<double>(floored) / static_cast<double>(2 * ds.size());
  return v;
}

}  // namespace sdss

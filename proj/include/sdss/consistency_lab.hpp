#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "sdss/dataset.hpp"
#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/objective.hpp"
#include "sdss/policy.hpp"
#include "sdss/surrogates.hpp"

namespace sdss {

/// Two-stage problem without covariates: Y_1 = 0 and E[Y_2 | A_1 = i, A_2 = j] = m[i][j].
struct TwoStageFiniteEnv {
  std::vector<std::vector<double>> m;

  explicit TwoStageFiniteEnv(std::vector<std::vector<double>> mat) : m(std::move(mat)) {
    detail::require(m.size() >= 2, "TwoStageFiniteEnv: need k1 >= 2");
    const std::size_t k2 = m.front().size();
    detail::require(k2 >= 2, "TwoStageFiniteEnv: need k2 >= 2");
    for (const auto& row : m) {
      detail::require(row.size() == k2, "TwoStageFiniteEnv: ragged outcome matrix");
      for (double v : row) detail::require(v > 0.0, "TwoStageFiniteEnv: outcome matrix entries must be positive");
    }
  }
  int k1() const { return static_cast<int>(m.size()); }
  int k2() const { return static_cast<int>(m.front().size()); }

  /// Optimal first-stage treatment: pred over i of max_j m[i][j].
  int d1_star() const {
    std::vector<double> q(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) q[i] = *std::max_element(m[i].begin(), m[i].end());
    return pred(q);
  }
};

/// Indices (1-based) within `tol` of the maximum.
inline std::vector<int> argmax_set(std::span<const double> x, double tol) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] >= mx - tol) out.push_back(static_cast<int>(i) + 1);
  return out;
}

// ---------------------------------------------------------------------------
// Sum-zero two-stage hinge surrogate

struct HingeResult {
  std::vector<double> f1;          // (x1, x2, -x1-x2)
  std::vector<std::vector<double>> f2;  // per first-stage treatment, sum-zero
  std::vector<int> argmax;         // tie set of f1
  int d1_tilde = 0;                // pred(f1)
  int d1_star = 0;
  double risk = 0.0;               // minimized surrogate risk
  std::vector<double> round_risk;  // incumbent after the coarse pass and each refinement
};

namespace detail {

/// Risk contribution of first-stage treatment a1 given f1 and f2(a1) = (y, -y).
inline double hinge_stage_risk(const TwoStageFiniteEnv& env, const std::vector<double>& f1, int a1, double y) {
  const double f2[2] = {y, -y};
  double r = 0.0;
  for (int a2 = 0; a2 < 2; ++a2) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      if (i == a1) continue;
      for (int j = 0; j < 2; ++j) {
        if (j == a2) continue;
        s += std::max({1.0 + f1[i], 1.0 + f2[j], 0.0});
      }
    }
    r += env.m[a1][a2] * s;
  }
  return r;
}

/// Exact minimum over y: the stage risk is convex piecewise linear in y, so a kink or
/// the origin attains it.
inline double hinge_inner_min(const TwoStageFiniteEnv& env, const std::vector<double>& f1, int a1, double* y_best) {
  double cands[10];
  int c = 0;
  cands[c++] = 0.0;
  cands[c++] = 1.0;
  cands[c++] = -1.0;
  for (int i = 0; i < 3; ++i) {
    if (i == a1) continue;
    cands[c++] = f1[i];
    cands[c++] = -f1[i];
  }
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  for (int q = 0; q < c; ++q) {
    const double v = hinge_stage_risk(env, f1, a1, cands[q]);
    if (v < best - 1e-15 || (std::abs(v - best) <= 1e-15 && std::abs(cands[q]) < std::abs(arg))) {
      best = std::min(best, v);
      arg = cands[q];
    }
  }
  if (y_best) *y_best = arg;
  return best;
}

inline double hinge_risk(const TwoStageFiniteEnv& env, double x1, double x2) {
  const std::vector<double> f1{x1, x2, -x1 - x2};
  double r = 0.0;
  for (int a1 = 0; a1 < 3; ++a1) r += hinge_inner_min(env, f1, a1, nullptr);
  return r;
}

}  // namespace detail

/// Minimizes the sum-zero two-stage hinge risk for k1 = 3, k2 = 2. The second-stage
/// scores are profiled out exactly; the two free first-stage coordinates are searched on
/// a grid over [-range, range] refined around the incumbent.
inline HingeResult hinge_solution(const TwoStageFiniteEnv& env, double range = 3.0, int points = 61,
                                  int rounds = 4) {
  detail::require(env.k1() == 3 && env.k2() == 2, "hinge_solution: requires k1 = 3 and k2 = 2");
  detail::require(points >= 3, "hinge_solution: need at least 3 grid points");
  points |= 1;
  HingeResult res;
  double cx = 0.0, cy = 0.0, half = range;
  double best = std::numeric_limits<double>::infinity();
  double bx = 0.0, by = 0.0;
  for (int round = 0; round <= rounds; ++round) {
    const double step = 2.0 * half / (points - 1);
    for (int i = 0; i < points; ++i) {
      for (int j = 0; j < points; ++j) {
        const double x = cx - half + i * step, y = cy - half + j * step;
        const double v = detail::hinge_risk(env, x, y);
        // prefer the smaller-norm point among exact ties so flat optima are reported canonically
        if (v < best - 1e-12 || (std::abs(v - best) <= 1e-12 && x * x + y * y < bx * bx + by * by)) {
          best = std::min(best, v);
          bx = x;
          by = y;
        }
      }
    }
    res.round_risk.push_back(best);
    cx = bx;
    cy = by;
    half = 2.0 * step;
  }
  auto clean = [](double v) { return std::abs(v) < 1e-12 ? 0.0 : v; };
  res.f1 = {clean(bx), clean(by), clean(-bx - by)};
  res.f2.resize(3);
  for (int a1 = 0; a1 < 3; ++a1) {
    double y = 0.0;
    detail::hinge_inner_min(env, res.f1, a1, &y);
    res.f2[a1] = {y, -y};
  }
  res.risk = best;
  res.argmax = argmax_set(res.f1, 1e-6);
  res.d1_tilde = pred(res.f1);
  res.d1_star = env.d1_star();
  return res;
}

/// The three outcome matrices of the hinge example.
inline std::vector<TwoStageFiniteEnv> hinge_settings() {
  return {TwoStageFiniteEnv({{5, 1}, {3, 4}, {4, 4}}), TwoStageFiniteEnv({{5, 7}, {3, 4}, {4, 4}}),
          TwoStageFiniteEnv({{1, 2}, {80, 1}, {3, 3}})};
}

// ---------------------------------------------------------------------------
// Two-stage exponential surrogate

struct ExpLossReport {
  int d1_star = 0;
  int d1_tilde_closed_form = 0;
  int d1_tilde_numeric = 0;
  std::vector<int> d2_tilde_closed_form;  // per first-stage treatment
  std::vector<int> d2_tilde_numeric;
  std::vector<double> f1;  // numeric minimizer, f1_1 pinned to 0
  double risk = 0.0;
  bool agree_numeric_closed = false;
  bool consistent = false;  // d1_tilde == d1_star
};

namespace detail {

struct ExpProblem {
  const TwoStageFiniteEnv& env;
  int k1, k2;
  std::size_t dim() const { return static_cast<std::size_t>((k1 - 1) + k1 * (k2 - 1)); }
  double f1(const std::vector<double>& z, int i) const { return i == 0 ? 0.0 : z[i - 1]; }
  double f2(const std::vector<double>& z, int a, int j) const {
    return j == 0 ? 0.0 : z[(k1 - 1) + a * (k2 - 1) + (j - 1)];
  }
  // risk = sum_{a1,a2} m * (sum_i e^{f1_i - f1_a1}) (sum_j e^{f2_j - f2_a2})
  double eval(const std::vector<double>& z, std::vector<double>* g) const {
    if (g) g->assign(dim(), 0.0);
    double total = 0.0;
    std::vector<double> e1(k1), e2(k2);
    double s1 = 0.0;
    for (int i = 0; i < k1; ++i) s1 += (e1[i] = std::exp(f1(z, i)));
    for (int a = 0; a < k1; ++a) {
      double s2 = 0.0;
      for (int j = 0; j < k2; ++j) s2 += (e2[j] = std::exp(f2(z, a, j)));
      for (int b = 0; b < k2; ++b) {
        const double w = env.m[a][b] * std::exp(-f1(z, a) - f2(z, a, b));
        const double term = w * s1 * s2;
        total += term;
        if (!g) continue;
        // d/d f1_i: w s2 (e1_i) - [i == a] term ; d/d f2_j: w s1 e2_j - [j == b] term
        for (int i = 1; i < k1; ++i) (*g)[i - 1] += w * s2 * e1[i] - (i == a ? term : 0.0);
        for (int j = 1; j < k2; ++j) (*g)[(k1 - 1) + a * (k2 - 1) + (j - 1)] += w * s1 * e2[j] - (j == b ? term : 0.0);
      }
    }
    return total;
  }
};

}  // namespace detail

/// Closed form of the exp-surrogate minimizer (Y_1 = 0):
/// d1 = pred_i (sum_j sqrt(m_ij))^2 and d2(i) = pred_j m_ij, checked against gradient
/// descent with random restarts.
inline ExpLossReport exp_loss_demo(const TwoStageFiniteEnv& env, int restarts = 10, std::uint64_t seed = 7) {
  ExpLossReport rep;
  const int k1 = env.k1(), k2 = env.k2();
  rep.d1_star = env.d1_star();
  std::vector<double> u(k1);
  for (int i = 0; i < k1; ++i) {
    double s = 0.0;
    for (double v : env.m[i]) s += std::sqrt(v);
    u[i] = s * s;
    rep.d2_tilde_closed_form.push_back(pred(env.m[i]));
  }
  rep.d1_tilde_closed_form = pred(u);

  detail::ExpProblem prob{env, k1, k2};
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> best_z;
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    std::vector<double> z(prob.dim()), g, zn;
    for (auto& v : z) v = nd(rng);
    double f = prob.eval(z, &g);
    double step = 1.0;
    for (int it = 0; it < 20000; ++it) {
      double gn2 = 0.0;
      for (double v : g) gn2 += v * v;
      if (std::sqrt(gn2) < 1e-11 * std::max(1.0, f)) break;
      // Armijo backtracking
      bool moved = false;
      for (int bt = 0; bt < 60; ++bt) {
        zn = z;
        for (std::size_t q = 0; q < z.size(); ++q) zn[q] -= step * g[q];
        const double fn = prob.eval(zn, nullptr);
        if (fn <= f - 1e-4 * step * gn2) {
          z.swap(zn);
          f = prob.eval(z, &g);
          moved = true;
          step *= 2.0;
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    if (f < best) {
      best = f;
      best_z = z;
    }
  }
  rep.risk = best;
  rep.f1.resize(k1);
  for (int i = 0; i < k1; ++i) rep.f1[i] = prob.f1(best_z, i);
  // the exp weight favours larger scores, so the induced rule is pred of the scores;
  // near-ties within 1e-6 are treated as exact ties
  rep.d1_tilde_numeric = argmax_set(rep.f1, 1e-6).back();
  for (int a = 0; a < k1; ++a) {
    std::vector<double> s(k2);
    for (int j = 0; j < k2; ++j) s[j] = prob.f2(best_z, a, j);
    rep.d2_tilde_numeric.push_back(argmax_set(s, 1e-6).back());
  }
  rep.agree_numeric_closed =
      rep.d1_tilde_numeric == rep.d1_tilde_closed_form && rep.d2_tilde_numeric == rep.d2_tilde_closed_form;
  rep.consistent = rep.d1_tilde_closed_form == rep.d1_star;
  return rep;
}

// ---------------------------------------------------------------------------
// Toy surface of the single-stage relative objective

struct SurfacePoint {
  double x = 0.0;
  double y = 0.0;
  double value = 0.0;
  double log10_grad_norm = 0.0;
};

/// Linear score model of the toy problem: g(H) = (x H, y H), no intercept, raw H.
inline Policy toy_policy() { return linear_policy({{3, 1}}, false, false); }

inline double toy_value(double x, double y, const Tau& tau, double* grad_norm = nullptr) {
  static const Dataset toy = toy_dataset();
  const Policy pol = toy_policy();
  const Objective obj(toy, pol, {Surrogate::product(tau)});
  const std::vector<double> theta{x, y};
  std::vector<double> g(2);
  const double v = obj.value(theta, {}, grad_norm ? std::span<double>(g) : std::span<double>{});
  if (grad_norm) *grad_norm = std::hypot(g[0], g[1]);
  return v;
}

inline std::vector<SurfacePoint> toy_surface(double x_lo, double x_hi, double y_lo, double y_hi, int steps,
                                             const Tau& tau) {
  detail::require(steps >= 2, "toy_surface: steps must be >= 2");
  const Dataset toy = toy_dataset();
  const Policy pol = toy_policy();
  const Objective obj(toy, pol, {Surrogate::product(tau)});
  std::vector<SurfacePoint> out;
  out.reserve(static_cast<std::size_t>(steps) * steps);
  std::vector<double> theta(2), g(2);
  for (int i = 0; i < steps; ++i) {
    for (int j = 0; j < steps; ++j) {
      theta[0] = x_lo + (x_hi - x_lo) * i / (steps - 1);
      theta[1] = y_lo + (y_hi - y_lo) * j / (steps - 1);
      const double v = obj.value(theta, {}, g);
      const double gn = std::hypot(g[0], g[1]);
      out.push_back({theta[0], theta[1], v, gn > 0 ? std::log10(gn) : -std::numeric_limits<double>::infinity()});
    }
  }
  return out;
}

inline void write_surface_csv(const std::vector<SurfacePoint>& s, std::ostream& os) {
  os << "x,y,value,log10_grad_norm\n";
  for (const auto& p : s)
    os << format_double(p.x) << ',' << format_double(p.y) << ',' << format_double(p.value) << ','
       << format_double(p.log10_grad_norm) << '\n';
}

}  // namespace sdss

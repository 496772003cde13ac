#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sdss/dataset.hpp"
#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/policy.hpp"

namespace sdss {

/// Ridge solve of (X^T X + lambda D) beta = X^T y, where D is the identity with zeros at
/// the `unpenalized` columns. With lambda = 0 a rank-deficient design is reported instead
/// of silently returning a minimum-norm answer.
inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                                   std::span<const Eigen::Index> unpenalized = {}) {
  detail::require(lambda >= 0.0, "ridge: lambda must be >= 0");
  detail::require(X.rows() == y.size() && X.rows() > 0, "ridge: design and response disagree");
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < X.cols()) throw NumericFailure("ridge: singular normal equations (numerical rank deficiency)");
    return qr.solve(y);
  }
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += lambda;
  for (auto c : unpenalized) A(c, c) -= lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw NumericFailure("ridge: factorization failed");
  return ldlt.solve(X.transpose() * y);
}

/// Linear regression of a stage outcome on (history features, treatment). With
/// interactions each treatment gets its own intercept and slope block; without them
/// treatments only shift the intercept.
class LinearQ {
 public:
  LinearQ() = default;
  /// `penalize_intercepts = false` leaves the per-treatment intercepts out of the ridge
  /// penalty, so a huge lambda shrinks predictions to the per-treatment means instead of 0.
  LinearQ(FeatureMap features, int stage, bool interactions, bool quadratic, bool penalize_intercepts = true)
      : features_(std::move(features)),
        stage_(stage),
        interactions_(interactions),
        quadratic_(quadratic),
        penalize_intercepts_(penalize_intercepts) {
    k_ = features_.spec()[stage].k;
    base_ = features_.dim(stage) * (quadratic_ ? 2 : 1);
  }

  std::size_t design_dim() const { return interactions_ ? static_cast<std::size_t>(k_) * (base_ + 1) : k_ + base_; }
  int k() const { return k_; }
  int stage() const { return stage_; }
  const std::vector<double>& coef() const { return coef_; }

  void design_row(std::span<const double> x, int a, std::span<double> row) const {
    std::fill(row.begin(), row.end(), 0.0);
    auto put_base = [&](std::size_t off) {
      for (std::size_t j = 0; j < x.size(); ++j) {
        row[off + j] = x[j];
        if (quadratic_) row[off + x.size() + j] = x[j] * x[j];
      }
    };
    if (interactions_) {
      const std::size_t off = static_cast<std::size_t>(a - 1) * (base_ + 1);
      row[off] = 1.0;
      put_base(off + 1);
    } else {
      row[a - 1] = 1.0;
      put_base(k_);
    }
  }

  void fit(const Dataset& ds, std::span<const double> target, double lambda) {
    detail::require(!ds.empty() && target.size() == ds.size(), "LinearQ::fit: target length must match dataset");
    const std::size_t p = design_dim();
    Eigen::MatrixXd X(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(p));
    Eigen::VectorXd y(static_cast<Eigen::Index>(ds.size()));
    std::vector<double> x(features_.dim(stage_)), row(p);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      features_.encode(ds, stage_, i, x);
      design_row(x, ds.action(stage_, i), row);
      for (std::size_t j = 0; j < p; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
      y(static_cast<Eigen::Index>(i)) = target[i];
    }
    std::vector<Eigen::Index> unpenalized;
    if (!penalize_intercepts_)
      for (int a = 0; a < k_; ++a)
        unpenalized.push_back(interactions_ ? static_cast<Eigen::Index>(a) * static_cast<Eigen::Index>(base_ + 1) : a);
    const Eigen::VectorXd b = ridge_solve(X, y, lambda, unpenalized);
    coef_.assign(b.data(), b.data() + b.size());
  }

  double predict_features(std::span<const double> x, int a) const {
    double row_buf[64];
    std::vector<double> heap;
    const std::size_t p = design_dim();
    double* row = row_buf;
    if (p > 64) {
      heap.resize(p);
      row = heap.data();
    }
    design_row(x, a, {row, p});
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += coef_[j] * row[j];
    return s;
  }

  double predict(const Dataset& ds, std::size_t i, int a) const {
    std::vector<double> x(features_.dim(stage_));
    features_.encode(ds, stage_, i, x);
    return predict_features(x, a);
  }

  double predict_raw(std::span<const double> raw, int a) const {
    std::vector<double> x(features_.dim(stage_));
    features_.encode_raw(stage_, raw, x);
    return predict_features(x, a);
  }

  std::vector<double> values_raw(std::span<const double> raw) const {
    std::vector<double> x(features_.dim(stage_)), q(k_);
    features_.encode_raw(stage_, raw, x);
    for (int a = 1; a <= k_; ++a) q[a - 1] = predict_features(x, a);
    return q;
  }

  nlohmann::json to_json() const {
    return {{"stage", stage_ + 1},
            {"k", k_},
            {"interactions", interactions_},
            {"quadratic", quadratic_},
            {"coef", coef_},
            {"features", features_.to_json()}};
  }

 private:
  FeatureMap features_;
  int stage_ = 0;
  int k_ = 2;
  bool interactions_ = true;
  bool quadratic_ = false;
  bool penalize_intercepts_ = true;
  std::size_t base_ = 0;
  std::vector<double> coef_;
};

struct QModel {
  std::vector<LinearQ> stages;
  double lambda = 1e-6;

  int decide(int t, std::span<const double> raw) const { return pred(stages.at(t).values_raw(raw)); }
  DecisionRule rule() const {
    return [m = *this](int t, std::span<const double> raw) { return m.decide(t, raw); };
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["lambda"] = lambda;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : stages) j["stages"].push_back(s.to_json());
    return j;
  }
};

/// Backward-recursive linear Q-learning. Pseudo-outcomes use max over treatments of the
/// next stage's fitted values; the induced rule takes pred of the fitted values.
inline QModel qlearn_linear_fit(const Dataset& ds, bool interactions, double lambda = 1e-6, bool quadratic = false) {
  detail::require(!ds.empty(), "qlearn_linear_fit: empty dataset");
  FeatureMap fm(ds.spec(), true);
  fm.fit(ds);
  QModel m;
  m.lambda = lambda;
  const int T = ds.stages();
  m.stages.resize(T);
  std::vector<double> target(ds.size());
  std::vector<double> future(ds.size(), 0.0);
  std::vector<double> x;
  for (int t = T; t-- > 0;) {
    for (std::size_t i = 0; i < ds.size(); ++i) target[i] = ds.reward(t, i) + future[i];
    LinearQ q(fm, t, interactions, quadratic);
    q.fit(ds, target, lambda);
    x.resize(fm.dim(t));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      fm.encode(ds, t, i, x);
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 1; a <= ds.stage(t).k; ++a) best = std::max(best, q.predict_features(x, a));
      future[i] = best;
    }
    m.stages[t] = std::move(q);
  }
  return m;
}

}  // namespace sdss

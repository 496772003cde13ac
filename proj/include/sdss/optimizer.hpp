#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdss/dataset.hpp"
#include "sdss/error.hpp"
#include "sdss/objective.hpp"
#include "sdss/policy.hpp"
#include "sdss/rng.hpp"
#include "sdss/surrogates.hpp"

namespace sdss {

struct OptimConfig {
  double lr0 = 0.07;
  double reduce_factor = 0.8;  // R_F
  int r_eval = 2;
  int patience = 10;
  int n_restart = 3;
  double d1 = 0.9;
  double d2 = 0.999;
  std::size_t n_mini = 1000;
  double kappa = 0.8;
  double eps = 1e-8;
  double delta_imp = 0.0;
  int n_epoch = 400;  // optimizer iterations, one minibatch each
  int max_restarts = 3;
  double split = 0.8;  // training fraction; 1 means validate on the training rows
  double weight_decay = 1e-3;
  InitScheme init = InitScheme::He;
  double reward_shift_c = 0.1;  // negative disables the automatic location shift
  PropensityFloor floor{};
  std::uint64_t seed = 1;

  void validate() const {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    detail::require(in(lr0, 1e-3, 0.2), "OptimConfig: lr0 must lie in [1e-3, 0.2]");
    detail::require(in(reduce_factor, 0.5, 0.8), "OptimConfig: reduce_factor must lie in [0.5, 0.8]");
    detail::require(r_eval >= 2 && r_eval <= 4, "OptimConfig: r_eval must be 2, 3 or 4");
    detail::require(patience >= 1, "OptimConfig: patience must be >= 1");
    detail::require(n_restart >= 3 && n_restart <= 10, "OptimConfig: n_restart must lie in 3..10");
    detail::require(d1 > 0.0 && d1 < 1.0 && d2 > 0.0 && d2 < 1.0, "OptimConfig: ADAM decay rates must lie in (0, 1)");
    detail::require(n_mini >= 1, "OptimConfig: n_mini must be >= 1");
    detail::require(in(kappa, 0.1, 0.8), "OptimConfig: kappa must lie in [0.1, 0.8]");
    detail::require(eps > 0.0, "OptimConfig: eps must be positive");
    detail::require(in(delta_imp, 0.0, 1e-3), "OptimConfig: delta_imp must lie in [0, 0.001]");
    detail::require(n_epoch >= 0, "OptimConfig: n_epoch must be >= 0");
    detail::require(max_restarts >= 0, "OptimConfig: max_restarts must be >= 0");
    detail::require(split > 0.0 && split <= 1.0, "OptimConfig: split must lie in (0, 1]");
    detail::require(weight_decay >= 0.0, "OptimConfig: weight_decay must be >= 0");
    detail::require(floor.floor >= 0.0 && floor.floor < 1.0, "OptimConfig: propensity floor must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"lr0", lr0},
            {"reduce_factor", reduce_factor},
            {"r_eval", r_eval},
            {"patience", patience},
            {"n_restart", n_restart},
            {"d1", d1},
            {"d2", d2},
            {"n_mini", n_mini},
            {"kappa", kappa},
            {"eps", eps},
            {"delta_imp", delta_imp},
            {"n_epoch", n_epoch},
            {"max_restarts", max_restarts},
            {"split", split},
            {"weight_decay", weight_decay},
            {"init", init == InitScheme::He ? "he" : "xavier"},
            {"reward_shift_c", reward_shift_c},
            {"propensity_floor", floor.floor},
            {"apply_floor", floor.apply},
            {"seed", seed}};
  }

  /// Unknown keys are rejected so typos do not silently fall back to defaults.
  static OptimConfig from_json(const nlohmann::json& j) { return from_json(j, OptimConfig{}); }
  static OptimConfig from_json(const nlohmann::json& j, const OptimConfig& base) {
    OptimConfig c = base;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "lr0") c.lr0 = v.get<double>();
      else if (k == "reduce_factor" || k == "R_F") c.reduce_factor = v.get<double>();
      else if (k == "r_eval") c.r_eval = v.get<int>();
      else if (k == "patience" || k == "N_patience") c.patience = v.get<int>();
      else if (k == "n_restart" || k == "N_restart") c.n_restart = v.get<int>();
      else if (k == "d1" || k == "D1") c.d1 = v.get<double>();
      else if (k == "d2" || k == "D2") c.d2 = v.get<double>();
      else if (k == "n_mini") c.n_mini = v.get<std::size_t>();
      else if (k == "kappa") c.kappa = v.get<double>();
      else if (k == "eps" || k == "eps_num") c.eps = v.get<double>();
      else if (k == "delta_imp") c.delta_imp = v.get<double>();
      else if (k == "n_epoch" || k == "N_epoch") c.n_epoch = v.get<int>();
      else if (k == "max_restarts") c.max_restarts = v.get<int>();
      else if (k == "split") c.split = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "init") {
        const auto s = v.get<std::string>();
        detail::require(s == "he" || s == "xavier", "OptimConfig: init must be he or xavier");
        c.init = s == "he" ? InitScheme::He : InitScheme::Xavier;
      } else if (k == "reward_shift_c") c.reward_shift_c = v.get<double>();
      else if (k == "propensity_floor") c.floor.floor = v.get<double>();
      else if (k == "apply_floor") c.floor.apply = v.get<bool>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw InvalidArgument("OptimConfig: unknown key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

/// Parses either a JSON object or `key = value` lines ('#' starts a comment) into JSON.
inline nlohmann::json parse_kv_config(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return nlohmann::json::parse(text);
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto l = s.find_first_not_of(" \t\r");
      const auto r = s.find_last_not_of(" \t\r");
      return l == std::string::npos ? std::string() : s.substr(l, r - l + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"') {
      j[key] = val.substr(1, val.size() - 2);
      continue;
    }
    try {
      j[key] = nlohmann::json::parse(val);
    } catch (const nlohmann::json::exception&) {
      j[key] = val;
    }
  }
  return j;
}

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv_config(ss.str());
}

// ---------------------------------------------------------------------------
// SDSS-OPTIM state machine

struct AdamState {
  std::vector<double> mom1, mom2;
  long step = 0;  // bias-correction counter; restarts with the moments
  double lr = 0.0;
  int reductions = 0;  // plateau reductions since the last restart
  int R1 = 0;
  int R2 = 0;
  bool ema_set = false;
  double ema = std::numeric_limits<double>::infinity();
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> theta_best;
  bool has_best = false;
  int restarts = 0;
};

/// One ADAM step on `theta`. `grad` is the loss gradient; it is modified in place
/// (weight decay added, then clipped to unit norm).
inline void adam_update(AdamState& s, std::span<double> grad, std::span<double> theta, const OptimConfig& cfg) {
  detail::require(grad.size() == theta.size(), "adam_update: gradient and parameters differ in length");
  if (s.mom1.size() != theta.size()) {
    s.mom1.assign(theta.size(), 0.0);
    s.mom2.assign(theta.size(), 0.0);
  }
  double norm2 = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      std::ostringstream os;
      os << "adam_update: non-finite gradient at coordinate " << i << " (step " << s.step + 1 << ", lr " << s.lr
         << ")";
      throw NumericFailure(os.str());
    }
    grad[i] += cfg.weight_decay * theta[i];
    norm2 += grad[i] * grad[i];
  }
  const double scale = 1.0 / std::max(1.0, std::sqrt(norm2));
  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.d1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.d2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i] * scale;
    grad[i] = g;
    s.mom1[i] = cfg.d1 * s.mom1[i] + (1.0 - cfg.d1) * g;
    s.mom2[i] = cfg.d2 * s.mom2[i] + (1.0 - cfg.d2) * g * g;
    const double m = s.mom1[i] / bc1;
    const double v = s.mom2[i] / bc2;
    theta[i] -= s.lr * m / (std::sqrt(v) + cfg.eps);
  }
}

struct EvalOutcome {
  bool improved = false;
  bool reduced = false;
  bool restarted = false;
};

/// Drives the parameter vector through training steps and validation events exactly as
/// the SDSS-OPTIM pseudo-code: EMA-smoothed validation loss, plateau reductions of the
/// learning rate, random re-initialization after repeated plateaus.
class SdssOptimizer {
 public:
  using Reinit = std::function<void(std::span<double> theta, Rng& rng)>;

  SdssOptimizer(OptimConfig cfg, std::vector<double> theta0, Reinit reinit, std::uint64_t seed)
      : cfg_(std::move(cfg)), theta_(std::move(theta0)), reinit_(std::move(reinit)), rng_(make_rng(seed)) {
    cfg_.validate();
    state_.lr = cfg_.lr0;
    state_.mom1.assign(theta_.size(), 0.0);
    state_.mom2.assign(theta_.size(), 0.0);
    state_.theta_best = theta_;
  }

  const AdamState& state() const { return state_; }
  std::span<const double> theta() const { return theta_; }
  std::span<double> theta_mut() { return theta_; }
  const OptimConfig& config() const { return cfg_; }

  /// `grad` is the gradient of the loss (the negative surrogate value).
  void train_step(std::span<double> grad) { adam_update(state_, grad, theta_, cfg_); }

  EvalOutcome validation_step(double val_loss) {
    EvalOutcome out;
    if (!state_.ema_set) {
      state_.ema = val_loss;  // EMA starts "unset"; the first evaluation defines it
      state_.ema_set = true;
    } else {
      state_.ema = cfg_.kappa * val_loss + (1.0 - cfg_.kappa) * state_.ema;
    }
    if (state_.ema < state_.best_val - cfg_.delta_imp) {
      state_.best_val = state_.ema;
      state_.theta_best = theta_;
      state_.has_best = true;
      state_.R1 = state_.R2 = 0;
      out.improved = true;
      return out;
    }
    ++state_.R2;
    if (state_.R2 >= cfg_.patience) {
      ++state_.reductions;
      state_.lr = cfg_.lr0 * std::pow(cfg_.reduce_factor, state_.reductions);
      state_.R2 = 0;
      ++state_.R1;
      out.reduced = true;
    }
    if (state_.R1 >= cfg_.n_restart) {
      if (state_.restarts < cfg_.max_restarts) {
        reinit_(theta_, rng_);
        std::fill(state_.mom1.begin(), state_.mom1.end(), 0.0);
        std::fill(state_.mom2.begin(), state_.mom2.end(), 0.0);
        state_.step = 0;
        state_.lr = cfg_.lr0;
        state_.reductions = 0;
        ++state_.restarts;
        out.restarted = true;
      }
      state_.R1 = state_.R2 = 0;
    }
    return out;
  }

 private:
  OptimConfig cfg_;
  std::vector<double> theta_;
  Reinit reinit_;
  Rng rng_;
  AdamState state_;
};

// ---------------------------------------------------------------------------
// Full fit

struct TraceRow {
  int r = 0;
  double loss_train = 0.0;
  double loss_val = 0.0;
  double ema = 0.0;
  double lr = 0.0;
  int restarts = 0;
};

struct FitResult {
  Policy policy;  // carries the fitted feature standardization
  std::vector<double> theta_best;
  std::vector<double> theta_init;
  std::vector<TraceRow> trace;
  int restarts = 0;
  double best_val = std::numeric_limits<double>::infinity();
  double wall_seconds = 0.0;
  std::vector<double> reward_shift;
  std::size_t n_train = 0;
  std::size_t n_val = 0;

  DecisionRule rule() const { return policy_rule(policy, theta_best); }
};

inline void write_trace_csv(const std::vector<TraceRow>& trace, std::ostream& os) {
  os << "r,loss_train,loss_val,ema,lr,restarts\n";
  for (const auto& t : trace)
    os << t.r << ',' << format_double(t.loss_train) << ',' << format_double(t.loss_val) << ','
       << format_double(t.ema) << ',' << format_double(t.lr) << ',' << t.restarts << '\n';
}

/// Splits rows into (train, validation) with a seeded shuffle.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(std::size_t n, double frac,
                                                                                Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (frac >= 1.0) return {idx, idx};
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n > 1 ? n - 1 : 1);
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + n_train);
  std::vector<std::size_t> va(idx.begin() + n_train, idx.end());
  if (va.empty()) va = tr;
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {tr, va};
}

/// SDSS: learn all stages jointly by minimizing the negative surrogate value with
/// SDSS-OPTIM. `theta0` overrides the random initial point when non-empty.
inline FitResult sdss_fit(const Dataset& data, Policy policy, std::vector<Surrogate> phi, const OptimConfig& cfg,
                          std::vector<double> theta0 = {}) {
  cfg.validate();
  detail::require(!data.empty(), "sdss_fit: empty dataset");
  const auto t_start = std::chrono::steady_clock::now();

  Dataset ds = data;
  const bool has_shift =
      std::any_of(ds.reward_shift().begin(), ds.reward_shift().end(), [](double v) { return v != 0.0; });
  if (!has_shift && cfg.reward_shift_c >= 0.0) ds.set_reward_shift(default_reward_shift(ds, cfg.reward_shift_c));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double y = 0.0;
    for (int t = 0; t < ds.stages(); ++t) y += ds.reward(t, i) + ds.reward_shift()[t];
    if (!(y > 0.0)) throw InvalidArgument("sdss_fit: shifted rewards must be positive");
  }

  Rng split_rng = make_rng(child_seed(cfg.seed, 0));
  auto [tr_rows, va_rows] = split_rows(ds.size(), cfg.split, split_rng);
  const Dataset train = ds.subset(tr_rows);
  const Dataset val = cfg.split >= 1.0 ? train : ds.subset(va_rows);

  policy.features().fit(train);
  FitResult res;
  res.reward_shift = ds.reward_shift();
  res.n_train = train.size();
  res.n_val = val.size();
  if (theta0.empty()) theta0 = policy.init(cfg.init, child_seed(cfg.seed, 1));
  detail::require(theta0.size() == policy.size(), "sdss_fit: initial parameter vector has wrong length");
  res.theta_init = theta0;

  const Objective obj_train(train, policy, phi, cfg.floor);
  const Objective obj_val(val, policy, phi, cfg.floor);
  const InitScheme scheme = cfg.init;
  SdssOptimizer opt(
      cfg, theta0, [&policy, scheme](std::span<double> th, Rng& rng) { policy.reinit(th, scheme, rng); },
      child_seed(cfg.seed, 2));

  bool dropout = false;
  for (const auto& a : policy.arch()) dropout = dropout || (a.mlp && a.dropout > 0.0);
  Rng batch_rng = make_rng(child_seed(cfg.seed, 3));
  Rng drop_rng = make_rng(child_seed(cfg.seed, 4));

  const std::size_t n_tr = train.size();
  const std::size_t bs = std::min(cfg.n_mini, n_tr);
  std::vector<std::size_t> perm(n_tr);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t cursor = n_tr;  // forces a shuffle before the first batch
  std::vector<std::size_t> batch(bs);
  std::vector<double> grad(policy.size());
  bool any_finite_val = false;
  double last_train_loss = std::numeric_limits<double>::quiet_NaN();

  for (int r = 1; r <= cfg.n_epoch; ++r) {
    // epoch-cycled sampling without replacement, reshuffled per cycle
    for (std::size_t b = 0; b < bs; ++b) {
      if (cursor == n_tr) {
        std::shuffle(perm.begin(), perm.end(), batch_rng);
        cursor = 0;
      }
      batch[b] = perm[cursor++];
    }
    const double v = obj_train.value(opt.theta(), batch, grad, dropout ? &drop_rng : nullptr);
    last_train_loss = -v;
    for (auto& g : grad) g = -g;
    opt.train_step(grad);

    if (r % cfg.r_eval == 0) {
      const double val_loss = -obj_val.value(opt.theta());
      if (std::isfinite(val_loss)) {
        any_finite_val = true;
        opt.validation_step(val_loss);
      }
      const auto& s = opt.state();
      res.trace.push_back({r, last_train_loss, val_loss, s.ema, s.lr, s.restarts});
    }
  }
  if (cfg.n_epoch >= cfg.r_eval && !any_finite_val)
    throw NumericFailure("sdss_fit: every validation loss was non-finite");

  const auto& s = opt.state();
  res.theta_best = s.has_best ? s.theta_best : theta0;
  res.best_val = s.best_val;
  res.restarts = s.restarts;
  res.policy = std::move(policy);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

inline FitResult sdss_fit(const Dataset& data, Policy policy, const Surrogate& phi, const OptimConfig& cfg,
                          std::vector<double> theta0 = {}) {
  return sdss_fit(data, std::move(policy), std::vector<Surrogate>{phi}, cfg, std::move(theta0));
}

}  // namespace sdss

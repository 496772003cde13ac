#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/rng.hpp"

namespace sdss {

/// Shape of one decision point: number of treatments and covariate dimension.
struct StageSpec {
  int k = 2;
  int cov_dim = 0;
};

/// Trajectories stored column-wise per stage so minibatches are cheap index gathers.
///
/// Stages are 0-based in the C++ API; treatments are 1-based (1..k_t). Propensities
/// are stored on the log scale because generative models with wide covariates
/// (Scheme 2 with large p) produce probabilities far below the double range.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<StageSpec> spec, std::size_t n) : spec_(std::move(spec)), n_(n) {
    detail::require(!spec_.empty(), "Dataset: need at least one stage");
    for (const auto& s : spec_) {
      detail::require(s.k >= 2, "Dataset: every stage needs k >= 2");
      detail::require(s.cov_dim >= 0, "Dataset: negative covariate dimension");
    }
    cols_.resize(spec_.size());
    for (std::size_t t = 0; t < spec_.size(); ++t) {
      auto& c = cols_[t];
      c.obs.assign(n_ * static_cast<std::size_t>(spec_[t].cov_dim), 0.0);
      c.action.assign(n_, 1);
      c.reward.assign(n_, 0.0);
      c.log_pi.assign(n_, 0.0);
    }
    reward_shift_.assign(spec_.size(), 0.0);
  }

  std::size_t size() const { return n_; }
  bool empty() const { return n_ == 0; }
  int stages() const { return static_cast<int>(spec_.size()); }
  const std::vector<StageSpec>& spec() const { return spec_; }
  const StageSpec& stage(int t) const { return spec_.at(static_cast<std::size_t>(t)); }

  std::span<const double> obs(int t, std::size_t i) const {
    const auto d = static_cast<std::size_t>(spec_[t].cov_dim);
    return {cols_[t].obs.data() + i * d, d};
  }
  std::span<double> obs_mut(int t, std::size_t i) {
    const auto d = static_cast<std::size_t>(spec_[t].cov_dim);
    return {cols_[t].obs.data() + i * d, d};
  }
  int action(int t, std::size_t i) const { return cols_[t].action[i]; }
  double reward(int t, std::size_t i) const { return cols_[t].reward[i]; }
  double log_propensity(int t, std::size_t i) const { return cols_[t].log_pi[i]; }
  double propensity(int t, std::size_t i) const { return std::exp(cols_[t].log_pi[i]); }

  void set_action(int t, std::size_t i, int a) {
    detail::require(a >= 1 && a <= spec_[t].k, "Dataset: action out of range");
    cols_[t].action[i] = a;
  }
  void set_reward(int t, std::size_t i, double y) { cols_[t].reward[i] = y; }
  void set_propensity(int t, std::size_t i, double pi) {
    detail::require(pi > 0.0 && pi <= 1.0, "Dataset: propensity must lie in (0, 1]");
    cols_[t].log_pi[i] = std::log(pi);
  }
  void set_log_propensity(int t, std::size_t i, double log_pi) {
    detail::require(log_pi <= 0.0 && std::isfinite(log_pi), "Dataset: log-propensity must be finite and <= 0");
    cols_[t].log_pi[i] = log_pi;
  }

  const std::vector<double>& reward_shift() const { return reward_shift_; }
  void set_reward_shift(std::vector<double> shift) {
    detail::require(shift.size() == spec_.size(), "Dataset: reward shift needs one entry per stage");
    reward_shift_ = std::move(shift);
  }

  /// Length of the raw history (o_1, a_1, y_1, ..., o_t) at stage t.
  std::size_t raw_history_dim(int t) const {
    std::size_t d = 0;
    for (int s = 0; s < t; ++s) d += static_cast<std::size_t>(spec_[s].cov_dim) + 2;
    return d + static_cast<std::size_t>(spec_[t].cov_dim);
  }

  void raw_history(int t, std::size_t i, std::vector<double>& out) const {
    out.clear();
    for (int s = 0; s < t; ++s) {
      auto o = obs(s, i);
      out.insert(out.end(), o.begin(), o.end());
      out.push_back(static_cast<double>(action(s, i)));
      out.push_back(reward(s, i));
    }
    auto o = obs(t, i);
    out.insert(out.end(), o.begin(), o.end());
  }

  std::vector<double> raw_history(int t, std::size_t i) const {
    std::vector<double> out;
    raw_history(t, i, out);
    return out;
  }

  double total_reward(std::size_t i) const {
    double s = 0.0;
    for (int t = 0; t < stages(); ++t) s += reward(t, i);
    return s;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out(spec_, rows.size());
    out.reward_shift_ = reward_shift_;
    for (int t = 0; t < stages(); ++t) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t i = rows[r];
        detail::require(i < n_, "Dataset::subset: row out of range");
        auto src = obs(t, i);
        std::copy(src.begin(), src.end(), out.obs_mut(t, r).begin());
        out.cols_[t].action[r] = cols_[t].action[i];
        out.cols_[t].reward[r] = cols_[t].reward[i];
        out.cols_[t].log_pi[r] = cols_[t].log_pi[i];
      }
    }
    return out;
  }

  bool operator==(const Dataset& o) const {
    if (n_ != o.n_ || spec_.size() != o.spec_.size() || reward_shift_ != o.reward_shift_) return false;
    for (std::size_t t = 0; t < spec_.size(); ++t) {
      if (spec_[t].k != o.spec_[t].k || spec_[t].cov_dim != o.spec_[t].cov_dim) return false;
      const auto& a = cols_[t];
      const auto& b = o.cols_[t];
      if (a.obs != b.obs || a.action != b.action || a.reward != b.reward || a.log_pi != b.log_pi) return false;
    }
    return true;
  }

 private:
  struct Columns {
    std::vector<double> obs;
    std::vector<int> action;
    std::vector<double> reward;
    std::vector<double> log_pi;
  };

  std::vector<StageSpec> spec_;
  std::size_t n_ = 0;
  std::vector<Columns> cols_;
  std::vector<double> reward_shift_;
};

// ---------------------------------------------------------------------------
// Synthetic environments

enum class EnvKind { Scheme1, Scheme2, Toy7, Custom };

struct EnvSpec {
  EnvKind kind = EnvKind::Scheme1;
  double omega = 10.0;  // Scheme 1 complexity
  int p = 50;           // Scheme 2 covariate dimension

  static EnvSpec scheme1(double omega) { return {EnvKind::Scheme1, omega, 0}; }
  static EnvSpec scheme2(int p) { return {EnvKind::Scheme2, 0.0, p}; }
  static EnvSpec toy() { return {EnvKind::Toy7, 0.0, 0}; }
};

inline std::vector<StageSpec> env_stage_specs(const EnvSpec& env) {
  switch (env.kind) {
    case EnvKind::Scheme1: return {{3, 3}, {3, 1}};
    case EnvKind::Scheme2: return {{3, env.p}, {3, 0}};
    case EnvKind::Toy7: return {{3, 1}};
    case EnvKind::Custom: break;
  }
  throw NotAvailable("env_stage_specs: custom environments have no fixed layout");
}

struct ValueEstimate {
  enum class Method { MC, IPW, AIPW };
  Method method = Method::MC;
  double estimate = 0.0;
  double se = std::numeric_limits<double>::quiet_NaN();  // NaN when n < 2
  std::size_t n = 0;
  double floored_fraction = 0.0;

  bool degenerate() const { return !std::isfinite(se); }
};

inline const char* to_string(ValueEstimate::Method m) {
  switch (m) {
    case ValueEstimate::Method::MC: return "mc";
    case ValueEstimate::Method::IPW: return "ipw";
    case ValueEstimate::Method::AIPW: return "aipw";
  }
  return "?";
}

inline nlohmann::json to_json(const ValueEstimate& v) {
  nlohmann::json j;
  j["method"] = to_string(v.method);
  j["estimate"] = v.estimate;
  j["se"] = std::isfinite(v.se) ? nlohmann::json(v.se) : nlohmann::json(nullptr);
  j["n"] = v.n;
  j["floored_fraction"] = v.floored_fraction;
  return j;
}

/// Mean and standard error of a sample; se is NaN for fewer than two values.
inline ValueEstimate summarize(std::span<const double> values, ValueEstimate::Method m) {
  ValueEstimate out;
  out.method = m;
  out.n = values.size();
  if (values.empty()) throw InvalidArgument("summarize: empty sample");
  // Welford for stability with large rewards.
  double mean = 0.0, m2 = 0.0;
  std::size_t k = 0;
  for (double v : values) {
    ++k;
    const double d = v - mean;
    mean += d / static_cast<double>(k);
    m2 += d * (v - mean);
  }
  out.estimate = mean;
  if (values.size() >= 2) {
    const double var = m2 / static_cast<double>(values.size() - 1);
    out.se = std::sqrt(var / static_cast<double>(values.size()));
  }
  return out;
}

namespace detail {

inline constexpr std::array<double, 3> kScheme2Delta1{2.5, 2.7, 2.6};
inline constexpr std::array<double, 3> kScheme2Delta2{2.6, 2.5, 2.7};
inline constexpr std::array<double, 3> kScheme2Eps1{2.1, 2.0, 2.2};
inline constexpr std::array<double, 3> kScheme2Eps2{2.2, 2.1, 2.3};

inline std::array<double, 3> scheme2_stage_means(int t, double u) {
  std::array<double, 3> v{};
  const double s = std::sin(u), c = std::cos(u);
  for (int i = 0; i < 3; ++i) {
    if (t == 0) {
      const double a = kScheme2Delta1[i] * s;
      v[i] = a * a + kScheme2Eps1[i] * c;
    } else {
      const double a = kScheme2Delta2[i] * c;
      v[i] = a * a + kScheme2Eps2[i] * s;
    }
  }
  return v;
}

/// log-softmax over three logits.
inline std::array<double, 3> log_softmax3(const std::array<double, 3>& z) {
  const double m = std::max({z[0], z[1], z[2]});
  const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m) + std::exp(z[2] - m));
  return {z[0] - lse, z[1] - lse, z[2] - lse};
}

inline int sample_from_log_probs(const std::array<double, 3>& lp, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    acc += std::exp(lp[i]);
    if (u < acc) return i + 1;
  }
  return 3;
}

}  // namespace detail

/// Closed-form optimal treatment for the simulation schemes. Ties resolve toward the
/// larger treatment index.
inline int oracle_assign(const EnvSpec& env, int stage, std::span<const double> history) {
  switch (env.kind) {
    case EnvKind::Scheme1: {
      if (stage == 0) {
        detail::require(history.size() >= 3, "oracle_assign: Scheme 1 stage-1 history needs 3 covariates");
        const double s = history[0] + history[1] + history[2];
        const std::array<double, 3> q{s, 2 * s, 3 * s};
        return pred(q);
      }
      detail::require(stage == 1 && history.size() == 6, "oracle_assign: bad Scheme 1 stage-2 history");
      const std::array<double, 3> q{history[0] * history[0], history[1] * history[1], history[2] * history[2]};
      return pred(q);
    }
    case EnvKind::Scheme2: {
      detail::require(stage == 0 || stage == 1, "oracle_assign: Scheme 2 has two stages");
      detail::require(history.size() >= static_cast<std::size_t>(env.p), "oracle_assign: Scheme 2 history too short");
      double u = 0.0;
      for (int j = 0; j < env.p; ++j) u += history[j];
      return pred(detail::scheme2_stage_means(stage, u));
    }
    default: break;
  }
  throw NotAvailable("oracle_assign: no closed-form optimal policy for this environment");
}

inline DecisionRule oracle_rule(const EnvSpec& env) {
  return [env](int t, std::span<const double> h) { return oracle_assign(env, t, h); };
}

/// Uniform random treatment choice; stateful, so not safe to share across threads.
inline DecisionRule uniform_random_rule(std::vector<int> ks, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(make_rng(seed));
  return [ks = std::move(ks), rng](int t, std::span<const double>) {
    std::uniform_int_distribution<int> d(1, ks.at(static_cast<std::size_t>(t)));
    return d(*rng);
  };
}

namespace detail {

/// Draws n trajectories from the environment. Without `policy` treatments follow the
/// behavior policy; with it the behavior draw is still consumed (so covariate
/// streams line up across policies for a fixed seed) but overridden, and the
/// recorded propensity is the behavior probability of the chosen treatment.
inline Dataset simulate(const EnvSpec& env, std::size_t n, std::uint64_t seed, const DecisionRule* policy) {
  detail::require(n >= 1, "simulate: n must be >= 1");
  Dataset ds(env_stage_specs(env), n);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> norm(0.0, 1.0);
  std::uniform_int_distribution<int> arm(1, 3);
  std::vector<double> hist;

  auto choose = [&](int t, std::size_t i, int behavior) {
    if (!policy) return behavior;
    ds.raw_history(t, i, hist);
    const int a = (*policy)(t, hist);
    if (a < 1 || a > ds.stage(t).k) throw InvalidArgument("simulate: policy returned an invalid treatment");
    return a;
  };

  switch (env.kind) {
    case EnvKind::Scheme1: {
      detail::require(env.omega > 0.0, "gen_scheme1: omega must be positive");
      const double sd = std::sqrt(10.0);
      const double log_third = std::log(1.0 / 3.0);
      for (std::size_t i = 0; i < n; ++i) {
        auto o1 = ds.obs_mut(0, i);
        for (auto& x : o1) x = sd * norm(rng);
        const int a1 = choose(0, i, arm(rng));
        const double e1 = norm(rng);
        ds.set_action(0, i, a1);
        ds.set_log_propensity(0, i, log_third);
        ds.set_reward(0, i, a1 * (o1[0] + o1[1] + o1[2]) + 3.0 + e1);

        ds.obs_mut(1, i)[0] = norm(rng);
        const int a2 = choose(1, i, arm(rng));
        const double e2 = norm(rng);
        const double xa = o1[a2 - 1];
        ds.set_action(1, i, a2);
        ds.set_log_propensity(1, i, log_third);
        ds.set_reward(1, i, env.omega * xa * xa + ds.obs(1, i)[0] + 3.0 + e2);
      }
      break;
    }
    case EnvKind::Scheme2: {
      detail::require(env.p >= 1, "gen_scheme2: p must be >= 1");
      std::vector<double> h1(static_cast<std::size_t>(env.p));
      for (std::size_t i = 0; i < n; ++i) {
        auto o1 = ds.obs_mut(0, i);
        double u = 0.0;
        for (auto& x : o1) {
          x = norm(rng);
          u += x;
        }
        const int d1 = oracle_assign(env, 0, o1);
        std::array<double, 3> z1{};
        for (int a = 1; a <= 3; ++a) z1[a - 1] = (a == d1 ? u : -u);
        const auto lp1 = log_softmax3(z1);
        const int a1 = choose(0, i, sample_from_log_probs(lp1, rng));
        const auto m1 = scheme2_stage_means(0, u);
        const double y1 = m1[a1 - 1] + norm(rng);
        ds.set_action(0, i, a1);
        ds.set_log_propensity(0, i, lp1[a1 - 1]);
        ds.set_reward(0, i, y1);

        const int d2 = oracle_assign(env, 1, o1);
        std::array<double, 3> z2{};
        for (int a = 1; a <= 3; ++a) z2[a - 1] = (a == d2 ? u : -u) + 0.5 * a1 + 0.5 * y1;
        const auto lp2 = log_softmax3(z2);
        const int a2 = choose(1, i, sample_from_log_probs(lp2, rng));
        const auto m2 = scheme2_stage_means(1, u);
        ds.set_action(1, i, a2);
        ds.set_log_propensity(1, i, lp2[a2 - 1]);
        ds.set_reward(1, i, m2[a2 - 1] + norm(rng));
      }
      break;
    }
    default:
      throw NotAvailable("simulate: environment cannot be sampled");
  }
  return ds;
}

}  // namespace detail

inline Dataset gen_scheme1(std::size_t n, double omega, std::uint64_t seed) {
  detail::require(n >= 1, "gen_scheme1: n must be >= 1");
  detail::require(omega > 0.0, "gen_scheme1: omega must be positive");
  return detail::simulate(EnvSpec::scheme1(omega), n, seed, nullptr);
}

inline Dataset gen_scheme2(std::size_t n, int p, std::uint64_t seed) {
  detail::require(n >= 1, "gen_scheme2: n must be >= 1");
  detail::require(p >= 1, "gen_scheme2: p must be >= 1");
  return detail::simulate(EnvSpec::scheme2(p), n, seed, nullptr);
}

/// The seven (H, A, Y) rows of the single-stage toy problem; pi = 1/3 throughout.
inline Dataset toy_dataset() {
  constexpr std::array<double, 7> h{2, 1, -1, 0.5, -0.5, -1, 0.5};
  constexpr std::array<int, 7> a{1, 2, 3, 1, 2, 2, 3};
  constexpr std::array<double, 7> y{0.33, 0.67, 0.67, 0.33, 0.23, 1.00, 0.13};
  Dataset ds({{3, 1}}, 7);
  for (std::size_t i = 0; i < 7; ++i) {
    ds.obs_mut(0, i)[0] = h[i];
    ds.set_action(0, i, a[i]);
    ds.set_reward(0, i, y[i]);
    ds.set_propensity(0, i, 1.0 / 3.0);
  }
  return ds;
}

inline Dataset generate(const EnvSpec& env, std::size_t n, std::uint64_t seed) {
  switch (env.kind) {
    case EnvKind::Scheme1: return gen_scheme1(n, env.omega, seed);
    case EnvKind::Scheme2: return gen_scheme2(n, env.p, seed);
    case EnvKind::Toy7: return toy_dataset();
    case EnvKind::Custom: break;
  }
  throw NotAvailable("generate: custom environments are loaded from CSV");
}

/// Monte-Carlo value of `policy`: fresh trajectories with treatments forced to the
/// policy's choices; returns the mean total reward and its standard error.
inline ValueEstimate mc_policy_value(const EnvSpec& env, const DecisionRule& policy, std::size_t n_eval,
                                     std::uint64_t seed) {
  detail::require(n_eval >= 1, "mc_policy_value: n_eval must be >= 1");
  const Dataset ds = detail::simulate(env, n_eval, seed, &policy);
  std::vector<double> totals(n_eval);
  for (std::size_t i = 0; i < n_eval; ++i) totals[i] = ds.total_reward(i);
  return summarize(totals, ValueEstimate::Method::MC);
}

/// Default training shift: each stage is lifted so its smallest reward is at least c.
inline std::vector<double> default_reward_shift(const Dataset& ds, double c = 0.1) {
  std::vector<double> shift(static_cast<std::size_t>(ds.stages()), 0.0);
  for (int t = 0; t < ds.stages(); ++t) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ds.size(); ++i) lo = std::min(lo, ds.reward(t, i));
    shift[t] = std::max(0.0, c - lo);
  }
  return shift;
}

// ---------------------------------------------------------------------------
// CSV trajectory format + JSON manifest

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline nlohmann::json manifest_json(const Dataset& ds) {
  nlohmann::json j;
  j["n"] = ds.size();
  j["stages"] = nlohmann::json::array();
  for (const auto& s : ds.spec()) j["stages"].push_back({{"k", s.k}, {"cov_dim", s.cov_dim}});
  j["reward_shift"] = ds.reward_shift();
  return j;
}

inline void write_csv(const Dataset& ds, std::ostream& os) {
  bool first = true;
  auto col = [&](const std::string& name) {
    if (!first) os << ',';
    os << name;
    first = false;
  };
  for (int t = 0; t < ds.stages(); ++t) {
    const auto s = std::to_string(t + 1);
    for (int j = 0; j < ds.stage(t).cov_dim; ++j) col("o" + s + "_" + std::to_string(j + 1));
    col("a" + s);
    col("y" + s);
    col("pi" + s);
  }
  os << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    first = true;
    for (int t = 0; t < ds.stages(); ++t) {
      for (double v : ds.obs(t, i)) col(format_double(v));
      col(std::to_string(ds.action(t, i)));
      col(format_double(ds.reward(t, i)));
      col(format_double(ds.propensity(t, i)));
    }
    os << '\n';
  }
}

inline Dataset read_csv(std::istream& is, const nlohmann::json& manifest) {
  std::vector<StageSpec> spec;
  for (const auto& s : manifest.at("stages")) spec.push_back({s.at("k").get<int>(), s.at("cov_dim").get<int>()});
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("read_csv: missing header");
  std::size_t expected = 0;
  for (const auto& s : spec) expected += static_cast<std::size_t>(s.cov_dim) + 3;
  {
    std::size_t cols = 1 + static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    if (cols != expected) throw InvalidArgument("read_csv: header does not match manifest stages");
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != expected) throw InvalidArgument("read_csv: row has wrong number of columns");
    rows.push_back(std::move(row));
  }
  Dataset ds(spec, rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::size_t c = 0;
    for (int t = 0; t < ds.stages(); ++t) {
      for (auto& o : ds.obs_mut(t, i)) o = rows[i][c++];
      const double a = rows[i][c++];
      if (a != std::floor(a)) throw InvalidArgument("read_csv: non-integer action");
      ds.set_action(t, i, static_cast<int>(a));
      ds.set_reward(t, i, rows[i][c++]);
      ds.set_propensity(t, i, rows[i][c++]);
    }
  }
  if (manifest.contains("reward_shift")) ds.set_reward_shift(manifest["reward_shift"].get<std::vector<double>>());
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& csv_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw InvalidArgument("save_dataset: cannot open " + csv_path);
  write_csv(ds, csv);
  std::ofstream man(csv_path + ".json");
  man << manifest_json(ds).dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& csv_path) {
  std::ifstream man(csv_path + ".json");
  if (!man) throw InvalidArgument("load_dataset: missing manifest " + csv_path + ".json");
  const auto j = nlohmann::json::parse(man);
  std::ifstream csv(csv_path);
  if (!csv) throw InvalidArgument("load_dataset: cannot open " + csv_path);
  return read_csv(csv, j);
}

}  // namespace sdss

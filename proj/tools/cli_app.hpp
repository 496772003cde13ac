#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdss/sdss.hpp"

#ifndef SDSS_VERSION
#define SDSS_VERSION "0.1.0"
#endif

namespace sdss::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Collects what a run produced; written as manifest.json next to the outputs.
class RunManifest {
 public:
  RunManifest(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {
    fs::create_directories(dir_);
    start_ = std::chrono::steady_clock::now();
  }

  json& config() { return config_; }
  json& seeds() { return seeds_; }
  json& results() { return results_; }
  fs::path path(const std::string& name) const { return dir_ / name; }
  void add(const fs::path& p) { artifacts_.push_back(p.string()); }

  void write() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::ostringstream ts;
    ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
    const auto mpath = dir_ / "manifest.json";
    artifacts_.push_back(mpath.string());
    json j{{"command", command_},
           {"config", config_},
           {"seeds", seeds_},
           {"artifacts", artifacts_},
           {"version", SDSS_VERSION},
           {"wall_clock", ts.str()},
           {"elapsed_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()}};
    if (!results_.is_null()) j["results"] = results_;
    std::ofstream(mpath) << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path dir_;
  json config_ = json::object();
  json seeds_ = json::object();
  json results_;
  std::vector<std::string> artifacts_;
  std::chrono::steady_clock::time_point start_;
};

inline unsigned thread_cap() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* e = std::getenv("SDSS_THREADS")) {
    const int v = std::atoi(e);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return n;
}

inline TauFamily parse_tau(const std::string& s) {
  if (s == "tanh") return TauFamily::Tanh;
  if (s == "algebraic") return TauFamily::AlgebraicRatio;
  if (s == "abs") return TauFamily::AbsRatio;
  if (s == "arctan") return TauFamily::Arctan;
  if (s == "logistic") return TauFamily::LogisticCdf;
  throw InvalidArgument("unknown tau family '" + s + "'");
}

inline KernelFamily parse_kernel(const std::string& s) {
  if (s == "gumbel") return KernelFamily::Gumbel;
  if (s == "logistic") return KernelFamily::Logistic;
  if (s == "gaussian") return KernelFamily::Gaussian;
  throw InvalidArgument("unknown kernel '" + s + "'");
}

inline EnvSpec parse_env(const std::string& name, double omega, int p) {
  if (name == "scheme1") return EnvSpec::scheme1(omega);
  if (name == "scheme2") return EnvSpec::scheme2(p);
  if (name == "toy") return EnvSpec::toy();
  throw InvalidArgument("unknown environment '" + name + "'");
}

/// Surrogate and architecture choices; config keys use the same names as the flags.
struct ModelChoice {
  std::string surrogate = "product";
  std::string tau = "tanh";
  std::string kernel = "gumbel";
  double C = 2.0;
  double slope = 1.0;
  std::string policy = "linear";
  int depth = 2;
  int width = 16;
  std::string activation = "relu";
  double dropout = 0.0;

  /// Removes the keys it owns from `j` so the rest can go to OptimConfig.
  void take(json& j) {
    auto grab = [&](const char* key, auto& field) {
      if (j.contains(key)) {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
        j.erase(key);
      }
    };
    grab("surrogate", surrogate);
    grab("tau", tau);
    grab("kernel", kernel);
    grab("C", C);
    grab("slope", slope);
    grab("policy", policy);
    grab("depth", depth);
    grab("width", width);
    grab("activation", activation);
    grab("dropout", dropout);
  }

  Surrogate make_surrogate() const {
    if (surrogate == "product") return Surrogate::product(Tau::make(parse_tau(tau), C, slope));
    if (surrogate == "kernel") return Surrogate::kernel(Kernel::make(parse_kernel(kernel)), C);
    throw InvalidArgument("unknown surrogate '" + surrogate + "'");
  }

  Policy make_policy(const std::vector<StageSpec>& spec) const {
    if (policy == "linear") return linear_policy(spec);
    if (policy != "mlp") throw InvalidArgument("unknown policy '" + policy + "'");
    detail::require(activation == "relu" || activation == "elu", "activation must be relu or elu");
    const auto act = activation == "relu" ? Activation::ReLU : Activation::ELU;
    return Policy(FeatureMap(spec, true), std::vector<StageArch>(spec.size(), StageArch::make_mlp(depth, width, act, dropout)),
                  true);
  }

  json to_json() const {
    return {{"surrogate", surrogate}, {"tau", tau},     {"kernel", kernel}, {"C", C},
            {"slope", slope},         {"policy", policy}, {"depth", depth},   {"width", width},
            {"activation", activation}, {"dropout", dropout}};
  }
};

inline std::string strip_suffix(std::string s, const std::string& suf) {
  if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) s.resize(s.size() - suf.size());
  return s;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string env;
  std::size_t n = 1000;
  double omega = 10.0;
  int p = 2;
  std::uint64_t seed = 1;
  std::string out = "sdss-run";
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& os) {
  const auto env = parse_env(a.env, a.omega, a.p);
  RunManifest m("simulate", a.out);
  m.config() = {{"env", a.env}, {"n", a.n}, {"omega", a.omega}, {"p", a.p}};
  m.seeds()["data"] = a.seed;
  const Dataset ds = env.kind == EnvKind::Toy7 ? toy_dataset() : generate(env, a.n, a.seed);
  const auto csv = m.path("data.csv");
  save_dataset(ds, csv.string());
  m.add(csv);
  m.add(csv.string() + ".json");
  m.write();
  os << "wrote " << ds.size() << " rows to " << csv.string() << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out = "sdss-run";
  std::uint64_t seed = 1;
  ModelChoice model;
};

inline int cmd_train(TrainArgs a, const CLI::App& sub, std::ostream& os) {
  json cfg_json = a.config.empty() ? json::object() : load_config_file(a.config);
  ModelChoice from_file;
  from_file.take(cfg_json);
  // explicit flags win over the config file
  auto pick = [&](const char* flag, auto& field, const auto& file_value) {
    if (sub.count(flag) == 0) field = file_value;
  };
  pick("--surrogate", a.model.surrogate, from_file.surrogate);
  pick("--tau", a.model.tau, from_file.tau);
  pick("--kernel", a.model.kernel, from_file.kernel);
  pick("--C", a.model.C, from_file.C);
  pick("--slope", a.model.slope, from_file.slope);
  pick("--policy", a.model.policy, from_file.policy);
  pick("--depth", a.model.depth, from_file.depth);
  pick("--width", a.model.width, from_file.width);
  pick("--activation", a.model.activation, from_file.activation);
  pick("--dropout", a.model.dropout, from_file.dropout);
  OptimConfig cfg = OptimConfig::from_json(cfg_json);
  if (sub.count("--seed")) cfg.seed = a.seed;

  const Dataset ds = load_dataset(a.data);
  const Surrogate phi = a.model.make_surrogate();
  const Policy pol = a.model.make_policy(ds.spec());

  RunManifest m("train", a.out);
  m.config() = {{"data", a.data}, {"model", a.model.to_json()}, {"optim", cfg.to_json()}};
  m.seeds()["fit"] = cfg.seed;
  const auto fit = sdss_fit(ds, pol, phi, cfg);
  const auto prefix = m.path("policy").string();
  save_checkpoint(prefix, fit.policy, fit.theta_best, {{"best_val", fit.best_val}, {"restarts", fit.restarts}});
  m.add(prefix + ".json");
  m.add(prefix + ".bin");
  const auto trace = m.path("trace.csv");
  {
    std::ofstream f(trace);
    write_trace_csv(fit.trace, f);
  }
  m.add(trace);
  m.results() = {{"best_val", fit.best_val}, {"restarts", fit.restarts}, {"wall_seconds", fit.wall_seconds}};
  m.write();
  os << "trained " << a.model.policy << " policy; best validation loss " << fit.best_val << "; checkpoint "
     << prefix << ".json\n";
  return 0;
}

struct EvaluateArgs {
  std::string data;
  std::string env;
  std::string policy_file;
  std::string rule;  // oracle | random, alternative to a checkpoint
  std::string method = "mc";
  std::size_t n_eval = 100000;
  double omega = 10.0;
  int p = 2;
  std::uint64_t seed = 2;
  double floor = 1e-4;
  std::string out = "sdss-run";
};

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& os) {
  detail::require(a.policy_file.empty() != a.rule.empty(), "evaluate: give exactly one of --policy-file or --rule");
  DecisionRule rule;
  std::vector<int> ks;
  std::optional<EnvSpec> env;
  if (!a.env.empty()) env = parse_env(a.env, a.omega, a.p);
  if (!a.policy_file.empty()) {
    const auto ck = load_checkpoint(strip_suffix(a.policy_file, ".json"));
    rule = policy_rule(ck.policy, ck.theta);
  } else if (a.rule == "oracle") {
    detail::require(env.has_value(), "evaluate: --rule oracle needs --env");
    rule = oracle_rule(*env);
  } else if (a.rule == "random") {
    std::vector<StageSpec> spec = env ? env_stage_specs(*env) : load_dataset(a.data).spec();
    for (const auto& s : spec) ks.push_back(s.k);
    rule = uniform_random_rule(ks, child_seed(a.seed, 99));
  } else {
    throw InvalidArgument("evaluate: --rule must be oracle or random");
  }

  RunManifest m("evaluate", a.out);
  m.config() = {{"method", a.method}, {"data", a.data}, {"env", a.env}, {"policy_file", a.policy_file},
                {"rule", a.rule},     {"n_eval", a.n_eval}, {"omega", a.omega}, {"p", a.p}, {"floor", a.floor}};
  ValueEstimate v;
  if (a.method == "mc") {
    detail::require(env.has_value(), "evaluate: --method mc needs --env");
    m.seeds()["mc"] = a.seed;
    v = mc_policy_value(*env, rule, a.n_eval, a.seed);
  } else if (a.method == "ipw" || a.method == "aipw") {
    detail::require(!a.data.empty(), "evaluate: --method " + a.method + " needs --data");
    const Dataset ds = load_dataset(a.data);
    const PropensityFloor fl{a.floor, true};
    v = a.method == "ipw" ? ipw_value_hat(ds, rule, fl) : aipw_value(ds, rule, fit_q_nuisance(ds, rule), {}, fl);
  } else {
    throw InvalidArgument("evaluate: unknown method '" + a.method + "'");
  }
  const auto vpath = m.path("value.json");
  std::ofstream(vpath) << to_json(v).dump(2) << '\n';
  m.add(vpath);
  m.results() = to_json(v);
  m.write();
  os << a.method << " estimate " << v.estimate << " (se " << v.se << ", n " << v.n << ")\n";
  return 0;
}

struct VerifyArgs {
  std::string suite;
  std::string out = "sdss-run";
  int p_samples = 200;
  std::string matrix = "4,0.01;2.5,2.5";
  double lo = -100, hi = 100;
  int steps = 201;
};

inline std::vector<std::vector<double>> parse_matrix(const std::string& s) {
  std::vector<std::vector<double>> m;
  std::stringstream rows(s);
  std::string row;
  while (std::getline(rows, row, ';')) {
    std::vector<double> r;
    std::stringstream cells(row);
    std::string c;
    while (std::getline(cells, c, ',')) {
      try {
        r.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw InvalidArgument("bad matrix entry '" + c + "'");
      }
    }
    m.push_back(std::move(r));
  }
  return m;
}

inline std::string fmt_vec(const std::vector<double>& v) {
  std::ostringstream s;
  s << '(';
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << std::fixed << std::setprecision(3) << v[i];
  s << ')';
  return s.str();
}

inline int verify_hinge(RunManifest& m, std::ostream& os) {
  const std::vector<std::vector<double>> expected{{0, 0, 0}, {0, 0, 0}, {-1, 2, -1}};
  const auto settings = hinge_settings();
  const auto csv = m.path("hinge.csv");
  std::ofstream f(csv);
  f << "setting,f1_1,f1_2,f1_3,argmax,d1_tilde,d1_star,risk\n";
  bool ok = true;
  os << "setting  f1_tilde                    argmax    d1_tilde  d1_star  match\n";
  json res = json::array();
  for (std::size_t q = 0; q < settings.size(); ++q) {
    const auto r = hinge_solution(settings[q]);
    double dev = 0.0;
    for (int i = 0; i < 3; ++i) dev = std::max(dev, std::abs(r.f1[i] - expected[q][i]));
    const bool match = dev <= 0.05;
    ok = ok && match;
    std::string am;
    for (std::size_t i = 0; i < r.argmax.size(); ++i) am += (i ? " " : "") + std::to_string(r.argmax[i]);
    os << std::left << std::setw(9) << q + 1 << std::setw(28) << fmt_vec(r.f1) << std::setw(10) << am << std::setw(10)
       << r.d1_tilde << std::setw(9) << r.d1_star << (match ? "yes" : "NO") << '\n';
    f << q + 1 << ',' << format_double(r.f1[0]) << ',' << format_double(r.f1[1]) << ',' << format_double(r.f1[2])
      << ',' << am << ',' << r.d1_tilde << ',' << r.d1_star << ',' << format_double(r.risk) << '\n';
    res.push_back({{"setting", q + 1}, {"f1", r.f1}, {"argmax", r.argmax}, {"d1_tilde", r.d1_tilde},
                   {"d1_star", r.d1_star}, {"max_abs_dev", dev}});
  }
  m.add(csv);
  m.results() = res;
  return ok ? 0 : 1;
}

inline int verify_exp(const VerifyArgs& a, RunManifest& m, std::ostream& os) {
  const TwoStageFiniteEnv env(parse_matrix(a.matrix));
  const auto r = exp_loss_demo(env);
  json j{{"matrix", env.m},
         {"d1_star", r.d1_star},
         {"d1_tilde_closed_form", r.d1_tilde_closed_form},
         {"d1_tilde_numeric", r.d1_tilde_numeric},
         {"d2_tilde_closed_form", r.d2_tilde_closed_form},
         {"d2_tilde_numeric", r.d2_tilde_numeric},
         {"f1", r.f1},
         {"risk", r.risk},
         {"agree_numeric_closed", r.agree_numeric_closed},
         {"consistent", r.consistent}};
  const auto path = m.path("exp.json");
  std::ofstream(path) << j.dump(2) << '\n';
  m.add(path);
  m.results() = j;
  os << "d1_star " << r.d1_star << "  d1_tilde " << r.d1_tilde_numeric << " (closed form " << r.d1_tilde_closed_form
     << ")  second stage";
  for (int d : r.d2_tilde_numeric) os << ' ' << d;
  os << "  " << (r.consistent ? "consistent" : "inconsistent") << '\n';
  return r.agree_numeric_closed ? 0 : 1;
}

inline int verify_conditions(const VerifyArgs& a, RunManifest& m, std::ostream& os) {
  struct Case {
    std::string name;
    Surrogate s;
    int k;
  };
  std::vector<Case> cases;
  for (int k : {2, 3, 4}) cases.push_back({"product tanh C=1", Surrogate::product(Tau::make(TauFamily::Tanh)), k});
  cases.push_back({"kernel gumbel", Surrogate::kernel(Kernel::make(KernelFamily::Gumbel)), 3});
  os << "surrogate           k  C_phi    J_emp    J_theory  N1  N2_dev     N3  sym_dev    pass\n";
  json res = json::array();
  bool ok = true;
  for (const auto& c : cases) {
    AuditOptions opt;
    opt.p_samples = a.p_samples;
    const auto r = audit_conditions(c.s, c.k, opt);
    ok = ok && r.pass();
    os << std::left << std::setw(20) << c.name << std::setw(3) << c.k << std::setw(9) << std::setprecision(4)
       << r.c_phi << std::setw(9) << r.j_empirical << std::setw(10) << r.j_theory << std::setw(4)
       << (r.pass_n1() ? "ok" : "NO") << std::setw(11) << r.n2_max_abs_dev << std::setw(4)
       << (r.pass_n3() ? "ok" : "NO") << std::setw(11) << r.symmetry_dev << (r.pass() ? "yes" : "NO") << '\n';
    auto j = to_json(r);
    j["surrogate"] = c.name;
    res.push_back(j);
  }
  const auto path = m.path("conditions.json");
  std::ofstream(path) << res.dump(2) << '\n';
  m.add(path);
  m.results() = res;
  return ok ? 0 : 1;
}

inline int verify_toy_surface(const VerifyArgs& a, RunManifest& m, std::ostream& os) {
  const Tau tau = Tau::unnormalized(TauFamily::Tanh);
  const auto s = toy_surface(a.lo, a.hi, a.lo, a.hi, a.steps, tau);
  const auto path = m.path("toy_surface.csv");
  {
    std::ofstream f(path);
    write_surface_csv(s, f);
  }
  m.add(path);
  const auto best = std::max_element(s.begin(), s.end(), [](auto& l, auto& r) { return l.value < r.value; });
  const double v104 = toy_value(10, 4, tau);
  m.results() = {{"value_10_4", v104}, {"grid_sup", best->value}, {"grid_argsup", {best->x, best->y}}};
  os << std::setprecision(8) << "V(10, 4) = " << v104 << "\ngrid supremum " << best->value << " at (" << best->x
     << ", " << best->y << ")\n";
  return 0;
}

inline int cmd_verify(const VerifyArgs& a, std::ostream& os) {
  RunManifest m("verify", a.out);
  m.config() = {{"suite", a.suite}};
  int rc = 0;
  if (a.suite == "hinge") rc = verify_hinge(m, os);
  else if (a.suite == "exp") {
    m.config()["matrix"] = a.matrix;
    rc = verify_exp(a, m, os);
  } else if (a.suite == "conditions") {
    m.config()["p_samples"] = a.p_samples;
    rc = verify_conditions(a, m, os);
  } else if (a.suite == "toy-surface") {
    m.config().update({{"lo", a.lo}, {"hi", a.hi}, {"steps", a.steps}});
    rc = verify_toy_surface(a, m, os);
  } else
    throw InvalidArgument("verify: unknown suite '" + a.suite + "'");
  m.write();
  return rc;
}

struct BenchArgs {
  std::string scheme = "scheme1";
  double omega = 10.0;
  int p = 2;
  std::size_t n = 15000;
  int replications = 10;
  std::string methods = "sdss,qlearn";
  std::size_t n_eval = 100000;
  std::uint64_t seed = 1;
  std::string config;
  std::string out = "sdss-run";
};

inline int cmd_bench(const BenchArgs& a, std::ostream& os) {
  const auto env = parse_env(a.scheme, a.omega, a.p);
  detail::require(env.kind != EnvKind::Toy7, "bench: toy data has no generative model");
  detail::require(a.replications >= 1, "bench: replications must be >= 1");
  std::vector<std::string> methods;
  {
    std::stringstream ss(a.methods);
    std::string t;
    while (std::getline(ss, t, ','))
      if (!t.empty()) methods.push_back(t);
  }
  for (const auto& meth : methods)
    detail::require(meth == "sdss" || meth == "qlearn" || meth == "qlearn_main" || meth == "oracle" || meth == "random",
                    "bench: unknown method '" + meth + "'");
  json cfg_json = a.config.empty() ? json::object() : load_config_file(a.config);
  ModelChoice model;
  model.take(cfg_json);
  const OptimConfig base = OptimConfig::from_json(cfg_json);

  struct Row {
    int rep;
    std::string method;
    double value, se, seconds;
  };
  std::vector<std::vector<Row>> rows(a.replications);
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (int r; (r = next++) < a.replications;) {
      try {
        const auto rs = child_seed(a.seed, static_cast<std::uint64_t>(r));
        const Dataset ds = generate(env, a.n, child_seed(rs, 0));
        const auto eval_seed = child_seed(rs, 1);
        std::vector<int> ks;
        for (const auto& s : ds.spec()) ks.push_back(s.k);
        for (const auto& meth : methods) {
          const auto t0 = std::chrono::steady_clock::now();
          DecisionRule rule;
          if (meth == "sdss") {
            OptimConfig cfg = base;
            cfg.seed = child_seed(rs, 2);
            rule = sdss_fit(ds, model.make_policy(ds.spec()), model.make_surrogate(), cfg).rule();
          } else if (meth == "qlearn" || meth == "qlearn_main") {
            rule = qlearn_linear_fit(ds, meth == "qlearn").rule();
          } else if (meth == "oracle") {
            rule = oracle_rule(env);
          } else {
            rule = uniform_random_rule(ks, child_seed(rs, 3));
          }
          const auto v = mc_policy_value(env, rule, a.n_eval, eval_seed);
          rows[r].push_back(
              {r, meth, v.estimate, v.se, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
        }
      } catch (...) {
        std::lock_guard lk(err_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned nt = std::min<unsigned>(thread_cap(), static_cast<unsigned>(a.replications));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  RunManifest m("bench", a.out);
  m.config() = {{"scheme", a.scheme}, {"omega", a.omega}, {"p", a.p},           {"n", a.n},
                {"replications", a.replications}, {"methods", methods}, {"n_eval", a.n_eval},
                {"model", model.to_json()}, {"optim", base.to_json()}};
  m.seeds()["master"] = a.seed;
  const auto path = m.path("bench.csv");
  std::ofstream f(path);
  f << "replication,method,value,se\n";
  for (const auto& rr : rows)
    for (const auto& row : rr) f << row.rep << ',' << row.method << ',' << format_double(row.value) << ',' << format_double(row.se) << '\n';
  m.add(path);
  json summary = json::object();
  for (const auto& meth : methods) {
    std::vector<double> v;
    for (const auto& rr : rows)
      for (const auto& row : rr)
        if (row.method == meth) v.push_back(row.value);
    std::sort(v.begin(), v.end());
    const double med = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    summary[meth] = {{"median", med}, {"min", v.front()}, {"max", v.back()}};
    os << std::left << std::setw(12) << meth << " median " << med << "  range [" << v.front() << ", " << v.back()
       << "]\n";
  }
  m.results() = summary;
  m.write();
  return 0;
}

// ---------------------------------------------------------------------------

/// Exit codes: 0 success, 1 numeric failure, 2 invalid arguments.
inline int run(int argc, char** argv, std::ostream& os = std::cout, std::ostream& es = std::cerr) {
  CLI::App app{"Learn multi-stage treatment policies with smooth surrogates of the IPW value", "sdss"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SDSS_VERSION);

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Draw a trajectory dataset from a generative scheme");
  s_sim->add_option("--env", sim.env, "scheme1, scheme2 or toy")->required()->check(CLI::IsMember({"scheme1", "scheme2", "toy"}));
  s_sim->add_option("--n", sim.n, "Number of trajectories (ignored for toy)")->check(CLI::PositiveNumber);
  s_sim->add_option("--omega", sim.omega, "Scheme 1 stage-2 effect size")->check(CLI::PositiveNumber);
  s_sim->add_option("--p", sim.p, "Scheme 2 covariate dimension")->check(CLI::PositiveNumber);
  s_sim->add_option("--seed", sim.seed, "Random seed");
  s_sim->add_option("--out", sim.out, "Output directory");

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "Fit an SDSS policy to a dataset");
  s_tr->add_option("--data", tr.data, "Trajectory CSV (with .json sidecar)")->required();
  s_tr->add_option("--surrogate", tr.model.surrogate, "product or kernel")->check(CLI::IsMember({"product", "kernel"}));
  s_tr->add_option("--tau", tr.model.tau, "Template for the product surrogate: tanh, algebraic, abs, arctan, logistic")
      ->check(CLI::IsMember({"tanh", "algebraic", "abs", "arctan", "logistic"}));
  s_tr->add_option("--kernel", tr.model.kernel, "Kernel for the kernel surrogate: gumbel, logistic, gaussian")
      ->check(CLI::IsMember({"gumbel", "logistic", "gaussian"}));
  s_tr->add_option("--C", tr.model.C, "Surrogate scale; 2 gives tau = 1 + tanh")->check(CLI::PositiveNumber);
  s_tr->add_option("--slope", tr.model.slope, "Template slope")->check(CLI::PositiveNumber);
  s_tr->add_option("--policy", tr.model.policy, "linear or mlp")->check(CLI::IsMember({"linear", "mlp"}));
  s_tr->add_option("--depth", tr.model.depth, "MLP hidden layers")->check(CLI::PositiveNumber);
  s_tr->add_option("--width", tr.model.width, "MLP hidden width")->check(CLI::PositiveNumber);
  s_tr->add_option("--activation", tr.model.activation, "relu or elu")->check(CLI::IsMember({"relu", "elu"}));
  s_tr->add_option("--dropout", tr.model.dropout, "MLP dropout rate")->check(CLI::Range(0.0, 0.95));
  s_tr->add_option("--config", tr.config, "Optimizer/model config: JSON or key = value lines");
  s_tr->add_option("--seed", tr.seed, "Fit seed (overrides the config)");
  s_tr->add_option("--out", tr.out, "Output directory");

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "Estimate the value of a policy");
  s_ev->add_option("--data", ev.data, "Trajectory CSV for ipw/aipw");
  s_ev->add_option("--env", ev.env, "Generative scheme for mc: scheme1, scheme2")->check(CLI::IsMember({"scheme1", "scheme2"}));
  s_ev->add_option("--policy-file", ev.policy_file, "Checkpoint written by train (policy.json)");
  s_ev->add_option("--rule", ev.rule, "Reference rule instead of a checkpoint: oracle or random")
      ->check(CLI::IsMember({"oracle", "random"}));
  s_ev->add_option("--method", ev.method, "mc, ipw or aipw")->check(CLI::IsMember({"mc", "ipw", "aipw"}));
  s_ev->add_option("--n-eval", ev.n_eval, "Monte Carlo draws")->check(CLI::PositiveNumber);
  s_ev->add_option("--omega", ev.omega, "Scheme 1 stage-2 effect size")->check(CLI::PositiveNumber);
  s_ev->add_option("--p", ev.p, "Scheme 2 covariate dimension")->check(CLI::PositiveNumber);
  s_ev->add_option("--seed", ev.seed, "Monte Carlo seed");
  s_ev->add_option("--floor", ev.floor, "Propensity floor for ipw/aipw")->check(CLI::Range(0.0, 0.999));
  s_ev->add_option("--out", ev.out, "Output directory");

  VerifyArgs vf;
  auto* s_vf = app.add_subcommand("verify", "Numeric checks of the consistency results");
  s_vf->add_option("--suite", vf.suite, "conditions, hinge, exp or toy-surface")
      ->required()
      ->check(CLI::IsMember({"conditions", "hinge", "exp", "toy-surface"}));
  s_vf->add_option("--p-samples", vf.p_samples, "Probability vectors per audit (conditions)")->check(CLI::PositiveNumber);
  s_vf->add_option("--matrix", vf.matrix, "Outcome matrix for exp, rows separated by ';'");
  s_vf->add_option("--lo", vf.lo, "Lower grid bound for toy-surface");
  s_vf->add_option("--hi", vf.hi, "Upper grid bound for toy-surface");
  s_vf->add_option("--steps", vf.steps, "Grid points per axis for toy-surface")->check(CLI::Range(2, 5001));
  s_vf->add_option("--out", vf.out, "Output directory");

  BenchArgs bn;
  auto* s_bn = app.add_subcommand("bench", "Replicated simulation study; per-replication values as CSV");
  s_bn->add_option("--scheme", bn.scheme, "scheme1 or scheme2")->check(CLI::IsMember({"scheme1", "scheme2"}));
  s_bn->add_option("--omega", bn.omega, "Scheme 1 stage-2 effect size")->check(CLI::PositiveNumber);
  s_bn->add_option("--p", bn.p, "Scheme 2 covariate dimension")->check(CLI::PositiveNumber);
  s_bn->add_option("--n", bn.n, "Training trajectories per replication")->check(CLI::PositiveNumber);
  s_bn->add_option("--replications", bn.replications, "Number of replications")->check(CLI::PositiveNumber);
  s_bn->add_option("--methods", bn.methods, "Comma list of sdss, qlearn, qlearn_main, oracle, random");
  s_bn->add_option("--n-eval", bn.n_eval, "Monte Carlo draws per value")->check(CLI::PositiveNumber);
  s_bn->add_option("--seed", bn.seed, "Master seed; replication seeds are derived from it");
  s_bn->add_option("--config", bn.config, "Optimizer/model config for sdss");
  s_bn->add_option("--out", bn.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    os << (sub ? sub->help() : app.help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    os << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    os << SDSS_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    es << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    es << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (s_sim->parsed()) return cmd_simulate(sim, os);
    if (s_tr->parsed()) return cmd_train(tr, *s_tr, os);
    if (s_ev->parsed()) return cmd_evaluate(ev, os);
    if (s_vf->parsed()) return cmd_verify(vf, os);
    if (s_bn->parsed()) return cmd_bench(bn, os);
  } catch (const NumericFailure& e) {
    es << "numeric failure: " << e.what() << '\n';
    return 1;
  } catch (const InvalidArgument& e) {
    es << "invalid argument: " << e.what() << '\n';
    return 2;
  } catch (const NotAvailable& e) {
    es << "not available: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    es << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    es << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace sdss::cli

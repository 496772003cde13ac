#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "sdss");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream o, e;
  const int rc = sdss::cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  return {rc, o.str(), e.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("sdss_cli_test_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Cli, HelpOnEverySubcommand) {
  EXPECT_EQ(run({"--help"}).code, 0);
  for (const char* sub : {"simulate", "train", "evaluate", "verify", "bench"}) {
    const auto r = run({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--out"), std::string::npos) << sub;
  }
  EXPECT_NE(run({"train", "--help"}).out.find("--surrogate"), std::string::npos);
}

TEST(Cli, InvalidArgumentsExitTwo) {
  auto r = run({"verify", "--bogus"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--suite"), std::string::npos);  // usage text
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"simulate"}).code, 2);
  EXPECT_EQ(run({"simulate", "--env", "scheme9"}).code, 2);
  EXPECT_EQ(run({"verify", "--suite", "exp", "--matrix", "1,0;1,1", "--out", scratch("badmat").string()}).code, 2);
  EXPECT_EQ(run({"train", "--data", "/nonexistent.csv", "--out", scratch("nodata").string()}).code, 2);
}

TEST(Cli, NumericFailureExitsOne) {
  const auto d = scratch("numeric");
  fs::create_directories(d);
  auto ds = sdss::toy_dataset();
  ds.set_propensity(0, 3, 1e-6);
  sdss::save_dataset(ds, (d / "data.csv").string());
  std::ofstream(d / "cfg.txt") << "apply_floor = false\nn_epoch = 1\n";
  const auto r = run({"train", "--data", (d / "data.csv").string(), "--config", (d / "cfg.txt").string(), "--out",
                      (d / "fit").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("weight overflow"), std::string::npos);
}

TEST(Cli, ToyCsvIsByteStable) {
  const auto a = scratch("toy_a"), b = scratch("toy_b");
  ASSERT_EQ(run({"simulate", "--env", "toy", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"simulate", "--env", "toy", "--out", b.string(), "--seed", "99"}).code, 0);
  const auto s = slurp(a / "data.csv");
  EXPECT_EQ(s, slurp(b / "data.csv"));
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 8);
  EXPECT_EQ(s.substr(0, s.find('\n')), "o1_1,a1,y1,pi1");
}

TEST(Cli, ManifestListsEveryOutput) {
  const auto d = scratch("manifest");
  ASSERT_EQ(run({"verify", "--suite", "hinge", "--out", d.string()}).code, 0);
  const auto j = nlohmann::json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(j.at("command"), "verify");
  std::set<std::string> listed;
  for (const auto& p : j.at("artifacts")) listed.insert(fs::path(p.get<std::string>()).filename().string());
  for (const auto& e : fs::directory_iterator(d)) EXPECT_TRUE(listed.count(e.path().filename().string())) << e.path();
  for (const auto& p : j.at("artifacts")) EXPECT_TRUE(fs::exists(p.get<std::string>()));
  for (const char* key : {"config", "seeds", "version", "wall_clock"}) EXPECT_TRUE(j.contains(key));
}

TEST(Cli, SimulateManifestListsDataAndSidecar) {
  const auto d = scratch("sim_manifest");
  ASSERT_EQ(run({"simulate", "--env", "scheme1", "--n", "50", "--out", d.string()}).code, 0);
  const auto j = nlohmann::json::parse(slurp(d / "manifest.json"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(d)) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(j.at("artifacts").size(), files);
  for (const auto& p : j.at("artifacts")) EXPECT_TRUE(fs::exists(p.get<std::string>())) << p;
}

TEST(Cli, VerifyHingePrintsThreeRows) {
  const auto r = run({"verify", "--suite", "hinge", "--out", scratch("hinge").string()});
  EXPECT_EQ(r.code, 0);
  int yes = 0;
  for (std::size_t p = 0; (p = r.out.find("yes", p)) != std::string::npos; ++p) ++yes;
  EXPECT_EQ(yes, 3);
}

TEST(Cli, VerifyExpReportsInconsistency) {
  const auto d = scratch("exp");
  const auto r = run({"verify", "--suite", "exp", "--out", d.string()});
  EXPECT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(slurp(d / "exp.json"));
  EXPECT_EQ(j.at("d1_star"), 1);
  EXPECT_EQ(j.at("d1_tilde_numeric"), 2);
  EXPECT_FALSE(j.at("consistent").get<bool>());
}

TEST(Cli, TrainThenEvaluateBeatsRandom) {
  const auto d = scratch("train_eval");
  ASSERT_EQ(run({"simulate", "--env", "scheme1", "--omega", "10", "--n", "5000", "--seed", "3", "--out",
                 (d / "data").string()})
                .code,
            0);
  auto r = run({"train", "--data", (d / "data" / "data.csv").string(), "--out", (d / "fit").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"evaluate", "--env", "scheme1", "--policy-file", (d / "fit" / "policy.json").string(), "--method", "mc",
           "--out", (d / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto fitted = nlohmann::json::parse(slurp(d / "eval" / "value.json"));
  r = run({"evaluate", "--env", "scheme1", "--rule", "random", "--method", "mc", "--out", (d / "rand").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rnd = nlohmann::json::parse(slurp(d / "rand" / "value.json"));
  EXPECT_GT(fitted.at("estimate").get<double>(), rnd.at("estimate").get<double>());

  // re-running with the recorded config and seed reproduces the trace
  r = run({"train", "--data", (d / "data" / "data.csv").string(), "--out", (d / "fit2").string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(slurp(d / "fit" / "trace.csv"), slurp(d / "fit2" / "trace.csv"));
  EXPECT_EQ(slurp(d / "fit" / "policy.bin"), slurp(d / "fit2" / "policy.bin"));

  r = run({"evaluate", "--data", (d / "data" / "data.csv").string(), "--policy-file",
           (d / "fit" / "policy.json").string(), "--method", "aipw", "--out", (d / "aipw").string()});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, BenchIsIndependentOfThreadCount) {
  const auto a = scratch("bench_a"), b = scratch("bench_b");
  const std::vector<std::string> base{"bench", "--n", "400", "--replications", "3", "--methods", "qlearn,random,oracle",
                                      "--n-eval", "2000", "--seed", "5"};
  auto args = base;
  args.insert(args.end(), {"--out", a.string()});
  ::setenv("SDSS_THREADS", "1", 1);
  ASSERT_EQ(run(args).code, 0);
  args = base;
  args.insert(args.end(), {"--out", b.string()});
  ::setenv("SDSS_THREADS", "3", 1);
  ASSERT_EQ(run(args).code, 0);
  ::unsetenv("SDSS_THREADS");
  const auto s = slurp(a / "bench.csv");
  EXPECT_EQ(s, slurp(b / "bench.csv"));
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 3 * 3);
}

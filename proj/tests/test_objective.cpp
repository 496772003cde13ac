#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sdss/consistency_lab.hpp"
#include "sdss/objective.hpp"

using namespace sdss;

namespace {

Surrogate one_plus_tanh() { return Surrogate::product(Tau::unnormalized(TauFamily::Tanh)); }

// Direct transcription of the toy objective: (3/n) sum_i Y_i Gamma(x H_i, y H_i; A_i) with
// Gamma(u, v; 1) = tau(u) tau(v), Gamma(u, v; 2) = tau(-u) tau(v - u), Gamma(u, v; 3) = tau(-v) tau(u - v).
double toy_oracle(double x, double y) {
  auto tau = [](double s) { return 1.0 + std::tanh(s); };
  const double H[7] = {2, 1, -1, 0.5, -0.5, -1, 0.5};
  const int A[7] = {1, 2, 3, 1, 2, 2, 3};
  const double Y[7] = {0.33, 0.67, 0.67, 0.33, 0.23, 1.00, 0.13};
  double s = 0;
  for (int i = 0; i < 7; ++i) {
    const double u = x * H[i], v = y * H[i];
    double g = 0;
    if (A[i] == 1) g = tau(u) * tau(v);
    if (A[i] == 2) g = tau(-u) * tau(v - u);
    if (A[i] == 3) g = tau(-v) * tau(u - v);
    s += Y[i] * g;
  }
  return 3.0 * s / 7.0;
}

double objective_fd_error(const Dataset& ds, const Policy& p, const Surrogate& s, int trials, std::uint64_t seed) {
  const Objective obj(ds, p, {s}, {});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.5);
  std::uniform_int_distribution<std::size_t> row(0, ds.size() - 1);
  double worst = 0;
  std::vector<double> th(p.size()), grad(p.size()), tp, tm;
  for (int r = 0; r < trials; ++r) {
    for (auto& v : th) v = nd(rng);
    const std::size_t i = row(rng);
    std::fill(grad.begin(), grad.end(), 0.0);
    obj.traj_value(th, i, grad);
    for (std::size_t j = 0; j < th.size(); ++j) {
      tp = th;
      tm = th;
      const double h = 1e-5 * std::max(1.0, std::abs(th[j]));
      tp[j] += h;
      tm[j] -= h;
      const double fd = (obj.traj_value(tp, i, {}) - obj.traj_value(tm, i, {})) / (2 * h);
      const double scale = std::max(std::abs(fd), 1e-6 * std::abs(obj.weight(i)));
      worst = std::max(worst, std::abs(fd - grad[j]) / std::max(scale, 1e-12));
    }
  }
  return worst;
}

}  // namespace

TEST(Objective, SingleStageAtOrigin) {
  Dataset ds({{3, 2}}, 1);
  ds.set_action(0, 0, 2);
  ds.set_reward(0, 0, 1.7);
  ds.set_propensity(0, 0, 1.0 / 3.0);
  const auto p = linear_policy(ds.spec(), false);
  std::vector<double> th(p.size(), 0.0);
  EXPECT_NEAR(Objective(ds, p, {one_plus_tanh()}).value(th), 3 * 1.7, 1e-12);
}

TEST(Objective, ToyRowTwo) {
  const auto toy = toy_dataset();
  const std::vector<std::size_t> row{1};
  const auto p = toy_policy();
  const Objective obj(toy, p, {one_plus_tanh()});
  std::vector<double> th{0, 0};
  EXPECT_NEAR(obj.value(th, row), 2.01, 1e-12);
}

TEST(Objective, ToySurfaceMatchesDirectFormula) {
  EXPECT_NEAR(surrogate_value_hat(toy_dataset(), toy_policy(), std::vector<double>{0, 0}, one_plus_tanh()), 1.44,
              1e-12);
  for (auto [x, y] : std::vector<std::pair<double, double>>{{10, 4}, {-1.5, 3}, {0.2, -0.7}, {1e4, 4e3}}) {
    std::vector<double> th{x, y};
    EXPECT_NEAR(surrogate_value_hat(toy_dataset(), toy_policy(), th, one_plus_tanh()), toy_oracle(x, y), 1e-12);
  }
  EXPECT_NEAR(toy_oracle(10, 4), 3.2328, 1e-4);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  const auto ds = gen_scheme1(200, 10.0, 3);
  auto shifted = ds;
  shifted.set_reward_shift(default_reward_shift(ds));
  auto lin = linear_policy(ds.spec());
  lin.features().fit(ds);
  Policy mlp(FeatureMap(ds.spec(), true), {StageArch::make_mlp(1, 6, Activation::ELU), StageArch::make_mlp(2, 4)});
  mlp.features().fit(ds);
  const auto prod = Surrogate::product(Tau::make(TauFamily::Tanh, 1.0, 2.0));
  const auto kern = Surrogate::kernel(Kernel::make(KernelFamily::Gumbel));
  EXPECT_LT(objective_fd_error(shifted, lin, prod, 25, 1), 1e-5);
  EXPECT_LT(objective_fd_error(shifted, lin, kern, 25, 2), 1e-5);
  EXPECT_LT(objective_fd_error(shifted, mlp, prod, 25, 3), 1e-5);
  EXPECT_LT(objective_fd_error(shifted, mlp, kern, 25, 4), 1e-5);
}

TEST(Objective, SingleZeroFactorStillCarriesGradient) {
  // tau(x) = x makes Gamma(g; 1) = g_1 g_2 vanish exactly at g_1 = 0 with a nonzero slope
  const auto lin_tau = Surrogate::product(Tau::custom([](double x) { return x; }, [](double) { return 1.0; }, 1.0));
  Dataset ds({{3, 1}, {3, 1}}, 1);
  ds.obs_mut(0, 0)[0] = 1.0;
  ds.obs_mut(1, 0)[0] = 1.0;
  ds.set_reward(1, 0, 2.0);
  ds.set_propensity(0, 0, 0.5);
  ds.set_propensity(1, 0, 0.5);
  const auto p = linear_policy(ds.spec(), false, false);
  std::vector<double> th(p.size(), 0.0);
  // stage 1 scores (0, 3): Gamma_1 = 0; stage 2 features (1, onehot(1), 0, 1)
  th[1] = 3.0;
  for (std::size_t j = 2; j < th.size(); ++j) th[j] = 0.5;
  const Objective obj(ds, p, {lin_tau});
  std::vector<double> grad(p.size(), 0.0);
  EXPECT_EQ(obj.traj_value(th, 0, grad), 0.0);
  EXPECT_NE(grad[0], 0.0);
  for (std::size_t j = 0; j < th.size(); ++j) {
    auto tp = th, tm = th;
    tp[j] += 1e-6;
    tm[j] -= 1e-6;
    EXPECT_NEAR(grad[j], (obj.traj_value(tp, 0, {}) - obj.traj_value(tm, 0, {})) / 2e-6, 1e-8);
  }
}

TEST(Objective, RowPermutationInvariant) {
  const auto ds = gen_scheme1(60, 10.0, 8);
  auto shifted = ds;
  shifted.set_reward_shift(default_reward_shift(ds));
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  const auto p = linear_policy(ds.spec(), false);
  const auto th = p.init(InitScheme::He, 2);
  const auto s = Surrogate::product(Tau::make(TauFamily::Tanh));
  EXPECT_NEAR(surrogate_value_hat(shifted, p, th, s), surrogate_value_hat(shifted.subset(perm), p, th, s), 1e-9);
}

TEST(Objective, FloorDisabledRaisesWeightOverflow) {
  Dataset ds({{3, 1}}, 2);
  ds.set_reward(0, 0, 1.0);
  ds.set_reward(0, 1, 1.0);
  ds.set_log_propensity(0, 0, -900.0);
  ds.set_propensity(0, 1, 0.5);
  const auto p = linear_policy(ds.spec(), false);
  const auto s = Surrogate::product(Tau::make(TauFamily::Tanh));
  EXPECT_THROW(Objective(ds, p, {s}, {1e-4, false}), NumericFailure);
  const Objective floored(ds, p, {s}, {1e-4, true});
  EXPECT_DOUBLE_EQ(floored.floored_fraction(), 0.5);
  EXPECT_NEAR(floored.weight(0), 1e4, 1e-6);
}

TEST(Ipw, MatchingPolicyWeightsCollapse) {
  const auto ds = gen_scheme1(500, 10.0, 4);
  const DecisionRule observed = [&ds](int t, std::span<const double> h) {
    // look the row up by its first covariate, which is unique with probability one
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.obs(0, i)[0] == h[0]) return ds.action(t, i);
    return 1;
  };
  double s = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) s += 9.0 * (ds.reward(0, i) + ds.reward(1, i));
  EXPECT_NEAR(ipw_value_hat(ds, observed).estimate, s / ds.size(), 1e-9);
}

TEST(Ipw, DisagreeingPolicyGivesZero) {
  const auto ds = gen_scheme1(300, 10.0, 4);
  const DecisionRule other = [&ds](int t, std::span<const double> h) {
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.obs(0, i)[0] == h[0]) return ds.action(t, i) % 3 + 1;
    return 1;
  };
  EXPECT_EQ(ipw_value_hat(ds, other).estimate, 0.0);
}

TEST(Ipw, AgreesWithMonteCarloForOracle) {
  const auto env = EnvSpec::scheme1(10);
  const auto ds = gen_scheme1(200000, 10.0, 12);
  const auto ipw = ipw_value_hat(ds, oracle_rule(env));
  const auto mc = mc_policy_value(env, oracle_rule(env), 200000, 13);
  EXPECT_LT(std::abs(ipw.estimate - mc.estimate), 3.0 * std::hypot(ipw.se, mc.se));
}

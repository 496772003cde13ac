#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sdss/evaluation.hpp"

using namespace sdss;

namespace {

// Per-decision IPW: P_n[1{a1=d1}/pi1 y1 + 1{a1=d1}1{a2=d2}/(pi1 pi2) y2].
double per_decision_ipw(const Dataset& ds, const DecisionRule& d) {
  double s = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (d(0, ds.raw_history(0, i)) != ds.action(0, i)) continue;
    s += ds.reward(0, i) / ds.propensity(0, i);
    if (d(1, ds.raw_history(1, i)) == ds.action(1, i))
      s += ds.reward(1, i) / (ds.propensity(0, i) * ds.propensity(1, i));
  }
  return s / ds.size();
}

NuisanceQ scheme1_truth(double omega) {
  NuisanceQ q;
  q.q2 = [omega](std::span<const double> h, int a) { return omega * h[a - 1] * h[a - 1] + h[5] + 3.0; };
  q.q1d = [omega](std::span<const double> h, int a) {
    const double mx = std::max({h[0] * h[0], h[1] * h[1], h[2] * h[2]});
    return a * (h[0] + h[1] + h[2]) + 3.0 + omega * mx + 3.0;
  };
  return q;
}

}  // namespace

TEST(Propensity, RecoversKnownLogit) {
  Dataset ds({{2, 1}}, 50000);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x = nd(rng);
    ds.obs_mut(0, i)[0] = x;
    const double p1 = 1.0 / (1.0 + std::exp(-(1.0 - x)));
    ds.set_action(0, i, u(rng) < p1 ? 1 : 2);
    ds.set_propensity(0, i, 0.5);
  }
  const auto m = fit_propensity_multinomial(ds, 0);
  EXPECT_TRUE(m.converged);
  EXPECT_NEAR(m.coef(0, 0), 1.0, 0.1);
  EXPECT_NEAR(m.coef(0, 1), -1.0, 0.1);
  for (std::size_t i = 1; i < m.loglik_path.size(); ++i) EXPECT_GE(m.loglik_path[i], m.loglik_path[i - 1]);
}

TEST(Propensity, InterceptOnlyMatchesFrequencies) {
  Dataset ds({{3, 0}}, 1000);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.set_action(0, i, i < 200 ? 1 : (i < 500 ? 2 : 3));
    ds.set_propensity(0, i, 1.0 / 3.0);
  }
  const auto m = fit_propensity_multinomial(ds, 0);
  const auto p = m.probs_features(std::vector<double>{});
  EXPECT_NEAR(p[0], 0.2, 1e-6);
  EXPECT_NEAR(p[1], 0.3, 1e-6);
  EXPECT_NEAR(p[2], 0.5, 1e-6);
}

TEST(Propensity, RowsSumToOne) {
  const auto ds = gen_scheme2(3000, 3, 4);
  for (int t = 0; t < 2; ++t) {
    const auto m = fit_propensity_multinomial(ds, t);
    for (std::size_t i = 0; i < 50; ++i) {
      double s = 0;
      for (int a = 1; a <= 3; ++a) s += m.probability(ds, i, a);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 1; i < m.loglik_path.size(); ++i) EXPECT_GE(m.loglik_path[i], m.loglik_path[i - 1]);
  }
}

TEST(Propensity, SeparationIsFlagged) {
  Dataset ds({{2, 1}}, 200);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x = static_cast<double>(i) - 99.5;
    ds.obs_mut(0, i)[0] = x;
    ds.set_action(0, i, x < 0 ? 1 : 2);
    ds.set_propensity(0, i, 0.5);
  }
  const auto m = fit_propensity_multinomial(ds, 0, 25);
  EXPECT_TRUE(m.separation_warning);
  EXPECT_FALSE(m.converged);
}

TEST(Propensity, MissingTreatmentIsRejected) {
  Dataset ds({{3, 1}}, 10);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.set_propensity(0, i, 0.5);
  EXPECT_THROW(fit_propensity_multinomial(ds, 0), InvalidArgument);
}

TEST(Nuisance, ConstantRewards) {
  auto ds = gen_scheme1(400, 10.0, 2);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.set_reward(0, i, 1.5);
    ds.set_reward(1, i, 1.5);
  }
  const auto q = fit_q_nuisance(ds, oracle_rule(EnvSpec::scheme1(10)));
  for (std::size_t i = 0; i < 20; ++i)
    for (int a = 1; a <= 3; ++a) {
      EXPECT_NEAR(q.q2(ds.raw_history(1, i), a), 1.5, 1e-6);
      EXPECT_NEAR(q.q1d(ds.raw_history(0, i), a), 3.0, 1e-6);
    }
}

TEST(Nuisance, LargeRidgeGivesTreatmentMeans) {
  const auto ds = gen_scheme1(500, 10.0, 3);
  const auto q = fit_q_nuisance(ds, oracle_rule(EnvSpec::scheme1(10)), 1e12);
  for (int a = 1; a <= 3; ++a) {
    double s = 0;
    int n = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.action(1, i) == a) {
        s += ds.reward(1, i);
        ++n;
      }
    EXPECT_NEAR(q.q2(ds.raw_history(1, 0), a), s / n, 1e-4);
  }
}

TEST(Aipw, ZeroNuisanceIsPerDecisionIpw) {
  const auto env = EnvSpec::scheme1(10);
  for (std::uint64_t seed : {1u, 2u}) {
    const auto ds = gen_scheme1(5000, 10.0, seed);
    const auto d = oracle_rule(env);
    const auto v = aipw_value(ds, d, NuisanceQ::zero());
    EXPECT_NEAR(v.estimate, per_decision_ipw(ds, d), 1e-12 * std::abs(v.estimate));
  }
}

TEST(Aipw, ZeroNuisanceMatchesTrajectoryIpwWhenFirstRewardIsZero) {
  // with y1 = 0 the stage-1 term vanishes and both weightings coincide
  auto ds = gen_scheme1(3000, 10.0, 7);
  for (std::size_t i = 0; i < ds.size(); ++i) ds.set_reward(0, i, 0.0);
  const auto d = oracle_rule(EnvSpec::scheme1(10));
  EXPECT_NEAR(aipw_value(ds, d, NuisanceQ::zero()).estimate, ipw_value_hat(ds, d).estimate, 1e-12);
}

TEST(Aipw, NeverMatchingPolicyIsPlugIn) {
  const auto ds = gen_scheme1(500, 10.0, 3);
  const DecisionRule never = [&ds](int t, std::span<const double> h) {
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.obs(0, i)[0] == h[0]) return ds.action(t, i) % 3 + 1;
    return 1;
  };
  const auto q = scheme1_truth(10);
  double plug = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto h = ds.raw_history(0, i);
    plug += q.q1d(h, never(0, h));
  }
  EXPECT_NEAR(aipw_value(ds, never, q).estimate, plug / ds.size(), 1e-12 * std::abs(plug / ds.size()));
}

TEST(Aipw, AffineInNuisances) {
  const auto ds = gen_scheme1(2000, 10.0, 9);
  const auto d = oracle_rule(EnvSpec::scheme1(10));
  const auto qa = scheme1_truth(10);
  NuisanceQ qb;
  qb.q2 = [](std::span<const double> h, int a) { return 0.3 * a - h[0]; };
  qb.q1d = [](std::span<const double> h, int a) { return h[1] * a + 2.0; };
  NuisanceQ qs;
  qs.q2 = [&](std::span<const double> h, int a) { return qa.q2(h, a) + qb.q2(h, a); };
  qs.q1d = [&](std::span<const double> h, int a) { return qa.q1d(h, a) + qb.q1d(h, a); };
  const double z = aipw_value(ds, d, NuisanceQ::zero()).estimate;
  const double va = aipw_value(ds, d, qa).estimate - z;
  const double vb = aipw_value(ds, d, qb).estimate - z;
  const double vs = aipw_value(ds, d, qs).estimate - z;
  EXPECT_NEAR(vs, va + vb, 1e-9 * std::abs(va));
}

TEST(Aipw, CorrectNuisancesAgreeWithMonteCarlo) {
  const auto env = EnvSpec::scheme1(10);
  const auto ds = gen_scheme1(50000, 10.0, 21);
  const auto a = aipw_value(ds, oracle_rule(env), scheme1_truth(10));
  const auto mc = mc_policy_value(env, oracle_rule(env), 50000, 22);
  EXPECT_LT(std::abs(a.estimate - mc.estimate), 3.0 * std::hypot(a.se, mc.se));
}

TEST(Aipw, NoiselessLinearEnvironmentReducesToPlugIn) {
  // no stage-2 covariates, y1 and y2 exactly linear in (o1, treatment): both ridge fits are exact
  Dataset ds({{3, 2}, {3, 0}}, 600);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<int> arm(1, 3);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto o = ds.obs_mut(0, i);
    o[0] = nd(rng);
    o[1] = nd(rng);
    const int a1 = arm(rng), a2 = arm(rng);
    ds.set_action(0, i, a1);
    ds.set_action(1, i, a2);
    ds.set_propensity(0, i, 1.0 / 3);
    ds.set_propensity(1, i, 1.0 / 3);
    ds.set_reward(0, i, a1 * o[0] - o[1] + 1.0);
    ds.set_reward(1, i, (a2 - 2) * o[1] + 0.5 * a2);
  }
  const DecisionRule d = [](int t, std::span<const double> h) { return t == 0 ? (h[0] > 0 ? 3 : 1) : 2; };
  const auto q = fit_q_nuisance(ds, d, 1e-10);
  double plug = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto h = ds.raw_history(0, i);
    plug += q.q1d(h, d(0, h));
  }
  EXPECT_NEAR(aipw_value(ds, d, q).estimate, plug / ds.size(), 1e-6);
}

TEST(Aipw, FittedPropensitiesAndFloor) {
  const auto ds = gen_scheme2(4000, 2, 3);
  PropensitySource src;
  src.models = {fit_propensity_multinomial(ds, 0), fit_propensity_multinomial(ds, 1)};
  const auto d = oracle_rule(EnvSpec::scheme2(2));
  const auto v = aipw_value(ds, d, NuisanceQ::zero(), src);
  EXPECT_TRUE(std::isfinite(v.estimate));
  EXPECT_EQ(std::string(to_string(v.method)), "aipw");
  const auto j = to_json(v);
  for (const char* key : {"method", "estimate", "se", "n", "floored_fraction"}) EXPECT_TRUE(j.contains(key));
}

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "anemia/qlearning.hpp"

using namespace anemia;

namespace {

StateVec state(double hb, double d_hb, double a0, double a1, double a2, std::size_t g = 0) {
  return {hb, d_hb, a0, a1, a2, g};
}

RbfNet one_center() {
  RbfNet net;
  net.centers.push_back(Features{});  // origin of the normalized cube
  net.sigma = 1.1;
  net.bounds = StateBounds::unit();
  return net;
}

TransitionDataset synthetic_transitions(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  TransitionDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = state(uniform(rng, 8, 14), uniform(rng, -2, 2), 0.25 * static_cast<double>(uniform_index(rng, 5)),
                   0.25 * static_cast<double>(uniform_index(rng, 5)), 0.5, uniform_index(rng, 3));
    auto s2 = state(uniform(rng, 8, 14), uniform(rng, -2, 2), 0.25, 0.5, 0.0, s.group);
    ds.transitions.push_back({s, uniform_index(rng, 5), uniform01(rng), s2, i % 29 == 28});
  }
  return ds;
}

}  // namespace

TEST(Featurize, OneCenterMatchesGaussian) {
  const auto net = one_center();
  // Normalized: (0.5, 0, -0.5, 0, 0, -1), squared norm 1.5.
  const auto phi = featurize(state(0.75, 0.5, 0.25, 0.5, 0.5), net);
  ASSERT_EQ(phi.size(), 1u);
  EXPECT_NEAR(phi[0], 0.5380333613795112, 1e-15);
  EXPECT_NEAR(phi[0], std::exp(-1.5 / (2 * 1.1 * 1.1)), 1e-15);
}

TEST(Featurize, ValueAtACenterIsOne) {
  const auto net = RbfNet::grid(StateBounds::unit());
  const auto phi = featurize(state(0.0, 0.0, 0.0, 0.0, 0.0, 0), net);
  EXPECT_EQ(phi[0], 1.0);
  for (double v : phi) {
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Featurize, ClampsOutsideTheBounds) {
  const auto net = one_center();
  EXPECT_EQ(featurize(state(5.0, 0.5, 0.5, 0.5, 0.5, 0), net),
            featurize(state(1.0, 0.5, 0.5, 0.5, 0.5, 0), net));
}

TEST(Featurize, NormalizedFeaturesSumToOne) {
  auto net = RbfNet::grid(StateBounds::unit(), 3);
  const auto raw = featurize(state(0.3, 0.9, 0.1, 0.6, 0.2, 1), net);
  net.normalized = true;
  const auto phi = featurize(state(0.3, 0.9, 0.1, 0.6, 0.2, 1), net);
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  EXPECT_NEAR(std::accumulate(phi.begin(), phi.end(), 0.0), 1.0, 1e-12);
  for (std::size_t j = 0; j < phi.size(); ++j) EXPECT_NEAR(phi[j], raw[j] / total, 1e-15);
}

TEST(QlTrain, NormalizedFeaturesStayBoundedOnLargeGrids) {
  // With 4^6 overlapping centers the raw squared feature norm is in the
  // hundreds, so alpha = 0.2 overshoots; normalized features cannot.
  const auto data = synthetic_transitions(3000, 21);
  QlConfig cfg;
  cfg.normalize_features = true;
  const auto res = ql_train(data, 5, cfg);
  EXPECT_TRUE(res.model.net().normalized);
  for (const auto& t : data.transitions)
    for (std::size_t a = 0; a < 5; ++a) {
      const double q = res.model.evaluate(t.s.features(), a);
      EXPECT_GE(q, -1e-9);
      EXPECT_LE(q, 10.0 + 1e-9);
    }
}

TEST(RbfGrid, FourPerDimensionCartesianProduct) {
  const auto net = RbfNet::grid(StateBounds::unit());
  ASSERT_EQ(net.size(), 4096u);
  std::set<double> levels;
  for (const auto& c : net.centers)
    for (double v : c) levels.insert(v);
  EXPECT_EQ(levels.size(), 4u);
  EXPECT_DOUBLE_EQ(*levels.begin(), -1.0);
  EXPECT_DOUBLE_EQ(*levels.rbegin(), 1.0);
  // Last dimension varies fastest.
  EXPECT_DOUBLE_EQ(net.centers[1][5], -1.0 / 3.0);
  EXPECT_DOUBLE_EQ(net.centers[1][0], -1.0);
  EXPECT_DOUBLE_EQ(net.centers[1024][0], -1.0 / 3.0);
  std::set<std::vector<double>> unique;
  for (const auto& c : net.centers) unique.insert({c.begin(), c.end()});
  EXPECT_EQ(unique.size(), 4096u);
  EXPECT_THROW(RbfNet::grid(StateBounds::unit(), 1), ConfigError);
}

TEST(StateBounds, FromDataCoversBothEndpoints) {
  TransitionDataset ds;
  ds.transitions.push_back({state(9, -1, 0, 0, 0, 0), 0, 0.5, state(13, 4, 1, 0, 0, 0), false});
  const auto b = StateBounds::from_data(ds);
  EXPECT_EQ(b.lo[0], 9.0);
  EXPECT_EQ(b.hi[0], 13.0);
  EXPECT_EQ(b.lo[1], -1.0);
  EXPECT_EQ(b.hi[1], 4.0);
  // Degenerate dimensions map to the middle.
  EXPECT_EQ(b.normalize(state(11, 1.5, 0, 0, 0, 0).features())[4], 0.0);
  EXPECT_EQ(b.normalize(state(11, 1.5, 0, 0, 0, 0).features())[0], 0.0);
}

TEST(QlUpdate, HandDerivedOneCenterStep) {
  LinearQModel model(one_center(), 2);
  model.weights()[0] = {0.3};
  model.weights()[1] = {0.6};
  QlConfig cfg;  // alpha 0.2, gamma 0.9
  // phi(s) = exp(-1.5 / 2.42), phi(s') = exp(-1 / 2.42).
  const Transition t{state(0.75, 0.5, 0.25, 0.5, 0.5), 0, 0.8, state(0.5, 0.5, 0.5, 0.5, 0.5), false};
  ql_update(model, t, cfg);
  EXPECT_NEAR(model.weights()[0][0], 0.4071555749516127, 1e-12);
  EXPECT_EQ(model.weights()[1][0], 0.6);

  const double p = std::exp(-1.5 / 2.42), q = std::exp(-1.0 / 2.42);
  const double td = 0.8 + 0.9 * 0.6 * q - 0.3 * p;
  EXPECT_NEAR(model.weights()[0][0], 0.3 + 0.2 * td * p, 1e-15);
}

TEST(QlUpdate, TinyLearningRateIsLinear) {
  const auto data = synthetic_transitions(1, 1);
  const auto net = RbfNet::grid(StateBounds::from_data(synthetic_transitions(50, 1)));
  LinearQModel base(net, 5);
  Rng rng = make_rng(2, 0);
  for (auto& w : base.weights())
    for (auto& v : w) v = uniform(rng, -0.1, 0.1);
  const auto& t = data.transitions[0];
  QlConfig one, two;
  one.alpha = 0.2;
  two.alpha = 0.4;
  auto a = base, b = base;
  ql_update(a, t, one);
  ql_update(b, t, two);
  for (std::size_t j = 0; j < net.size(); ++j) {
    const double d1 = a.weights()[t.a][j] - base.weights()[t.a][j];
    const double d2 = b.weights()[t.a][j] - base.weights()[t.a][j];
    EXPECT_NEAR(d2, 2.0 * d1, 1e-15);
  }
}

TEST(QlUpdate, ZeroLearningRateLeavesWeightsAlone) {
  // validate() rejects alpha = 0 for training; the update rule itself is fine.
  LinearQModel model(one_center(), 2);
  model.weights()[0] = {0.25};
  QlConfig cfg;
  cfg.alpha = 0.0;
  ql_update(model, {state(0.2, 0, 0, 0, 0), 0, 1.0, state(0.3, 0, 0, 0, 0), false}, cfg);
  EXPECT_EQ(model.weights()[0][0], 0.25);
}

TEST(QlUpdate, FromZeroWeightsGivesAlphaRewardPhi) {
  const auto net = RbfNet::grid(StateBounds::from_data(synthetic_transitions(50, 4)));
  LinearQModel model(net, 5);
  const auto t = synthetic_transitions(1, 5).transitions[0];
  QlConfig cfg;
  ql_update(model, t, cfg);
  const auto phi = featurize(t.s, net);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t j = 0; j < net.size(); ++j)
      EXPECT_DOUBLE_EQ(model.weights()[a][j], a == t.a ? cfg.alpha * t.r * phi[j] : 0.0);
}

TEST(QlUpdate, TerminalIgnoresNextStateUnlessAsked) {
  LinearQModel model(one_center(), 1);
  model.weights()[0] = {1.0};
  const Transition t{state(0.5, 0.5, 0.5, 0.5, 0.5), 0, 0.0, state(0.5, 0.5, 0.5, 0.5, 0.5), true};
  QlConfig cfg;
  auto plain = model, boot = model;
  const double td = ql_update(plain, t, cfg);
  const double phi = std::exp(-1.0 / 2.42);
  EXPECT_NEAR(td, -phi, 1e-15);
  cfg.bootstrap_terminal = true;
  EXPECT_NEAR(ql_update(boot, t, cfg), -0.1 * phi, 1e-15);
  EXPECT_THROW(ql_update(plain, {t.s, 3, 0.0, t.s_next, false}, cfg), InputError);
}

TEST(QlTrain, RepeatedSelfLoopReachesTheFixedPoint) {
  TransitionDataset ds;
  const auto s = state(0.5, 0.5, 0.5, 0.5, 0.5);
  for (int i = 0; i < 3000; ++i) ds.transitions.push_back({s, 0, 0.7, s, false});
  // Bounds from this data are degenerate, so every dimension maps to 0.
  QlConfig cfg;
  cfg.grid_per_dim = 2;
  const auto res = ql_train(ds, 1, cfg);
  // Fixed point of the scalar recurrence: phi.theta = r / (1 - gamma).
  const double q = res.model.evaluate(s.features(), 0);
  EXPECT_NEAR(q, 0.7 / (1.0 - 0.9), 1e-9);
}

TEST(QlTrain, EmptyPassPicksTheLowestDose) {
  const auto res = ql_train(TransitionDataset{}, 5, QlConfig{});
  for (const auto& w : res.model.weights())
    for (double v : w) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(greedy_action(res.model, state(11, 0, 0.5, 0.5, 0.5, 2)), 0u);
  EXPECT_TRUE(res.curve.empty());
}

TEST(QlTrain, CurveIsFiniteAndTrainingDeterministic) {
  const auto data = synthetic_transitions(2500, 9);
  QlConfig cfg;
  cfg.probe_size = 100;
  cfg.probe_interval = 1000;
  cfg.normalize_features = true;
  const auto a = ql_train(data, 5, cfg);
  const auto b = ql_train(data, 5, cfg);
  ASSERT_EQ(a.curve.size(), 3u);  // after 1000, 2000 and the final 2500 updates
  EXPECT_EQ(a.curve.back().iteration, 2500u);
  for (const auto& p : a.curve) {
    EXPECT_TRUE(std::isfinite(p.distance));
    EXPECT_GE(p.distance, 0.0);
  }
  EXPECT_EQ(a.model.weights(), b.model.weights());
}

TEST(QlTrain, ShuffleChangesOrderButStaysSeeded) {
  const auto data = synthetic_transitions(300, 10);
  QlConfig cfg;
  cfg.shuffle = true;
  cfg.seed = 4;
  const auto a = ql_train(data, 5, cfg);
  const auto b = ql_train(data, 5, cfg);
  EXPECT_EQ(a.model.weights(), b.model.weights());
  cfg.shuffle = false;
  EXPECT_NE(ql_train(data, 5, cfg).model.weights(), a.model.weights());
}

TEST(QlSerialization, GridAndExplicitCentersRoundTrip) {
  const auto data = synthetic_transitions(200, 12);
  QlConfig cfg;
  cfg.grid_per_dim = 3;
  const auto model = ql_train(data, 5, cfg).model;
  std::stringstream io;
  write_linear_qmodel(io, model);
  const auto back = read_linear_qmodel(io);
  EXPECT_EQ(back.weights(), model.weights());
  EXPECT_EQ(back.net().bounds, model.net().bounds);
  for (const auto& t : data.transitions)
    EXPECT_EQ(back.evaluate(t.s.features(), 2), model.evaluate(t.s.features(), 2));

  LinearQModel tiny(one_center(), 2);
  tiny.weights()[1] = {0.125};
  std::stringstream io2;
  write_linear_qmodel(io2, tiny);
  const auto tiny_back = read_linear_qmodel(io2);
  EXPECT_EQ(tiny_back.net().size(), 1u);
  EXPECT_EQ(tiny_back.weights()[1][0], 0.125);

  cfg.normalize_features = true;
  const auto norm = ql_train(data, 5, cfg).model;
  std::stringstream io3;
  write_linear_qmodel(io3, norm);
  const auto norm_back = read_linear_qmodel(io3);
  EXPECT_TRUE(norm_back.net().normalized);
  for (const auto& t : data.transitions)
    EXPECT_EQ(norm_back.evaluate(t.s.features(), 1), norm.evaluate(t.s.features(), 1));

  std::stringstream junk("rbf-qmodel v1\nsigma x\n");
  EXPECT_THROW(read_linear_qmodel(junk), InputError);
}

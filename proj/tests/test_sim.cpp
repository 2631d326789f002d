#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "anemia/cohort.hpp"
#include "anemia/sim.hpp"

using namespace anemia;

namespace {

PatientParams mean_patient() { return {0.3588, 0.2014, 0.1372, kMchMale, 67.97}; }

std::vector<PatientParams> sampled_patients(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  return sample_seed_population(CohortSpec{}, n, rng);
}

}  // namespace

TEST(Hill, ZeroHalfAndThreeQuarters) {
  const double e50 = 1.908;
  EXPECT_EQ(hill(0.0, e50), 0.0);
  EXPECT_DOUBLE_EQ(hill(e50, e50), 0.5);
  EXPECT_DOUBLE_EQ(hill(3 * e50, e50), 0.75);
}

TEST(Hill, StrictlyIncreasing) {
  double prev = hill(0.0, 1.0);
  for (double e = 0.01; e < 50.0; e *= 1.3) {
    const double h = hill(e, 1.0);
    EXPECT_GT(h, prev);
    prev = h;
  }
}

TEST(Hill, RejectsNegativeConcentration) { EXPECT_THROW(hill(-1.0, 1.0), DomainError); }

TEST(ModelConstants, HalfMaximalConcentrationAndElimination) {
  ModelConstants c;
  EXPECT_DOUBLE_EQ(c.e_50(), 100.0 / 52.4);
  EXPECT_NEAR(std::exp(-c.elimination_rate() * 25.0 / 24.0), 0.5, 1e-15);
  EXPECT_EQ(c.maturation_lag(), 13);
  EXPECT_EQ(c.max_lag(), 83);
}

TEST(SenescenceWeights, SumToOneAndPeakAtLifespan) {
  ModelConstants c;
  const auto w = senescence_weights(c);
  ASSERT_EQ(w.size(), 70u);
  EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
  EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 69);
  c.spread_is_sd = true;
  const auto wide = senescence_weights(c);
  EXPECT_NEAR(std::accumulate(wide.begin(), wide.end(), 0.0), 1.0, 1e-12);
  EXPECT_GT(wide.front(), w.front());
}

TEST(Bolus, UnitWeightGivesUnitConcentration) {
  const auto p = mean_patient();
  ModelConstants c;
  auto s = initial_state(p, c);
  s = administer_bolus(s, 1.0, 52.4, c);
  EXPECT_DOUBLE_EQ(s.e_exo, 1.0);
}

TEST(Bolus, ZeroDoseLeavesStateUnchanged) {
  ModelConstants c;
  const auto s = initial_state(mean_patient(), c);
  const auto t = administer_bolus(s, 0.0, 70.0, c);
  EXPECT_EQ(t.e_exo, s.e_exo);
  EXPECT_EQ(t.p, s.p);
  EXPECT_EQ(t.r_now, s.r_now);
}

TEST(Bolus, TwoHalfBolusesEqualOneFull) {
  ModelConstants c;
  auto a = initial_state(mean_patient(), c);
  auto b = a;
  a = administer_bolus(administer_bolus(a, 0.3, 60.0, c), 0.3, 60.0, c);
  b = administer_bolus(b, 0.6, 60.0, c);
  EXPECT_NEAR(a.e_exo, b.e_exo, 1e-15);
}

TEST(Bolus, ConcentrationScaleMultipliesTheRatio) {
  ModelConstants c;
  c.concentration_scale = 8.0;
  auto s = administer_bolus(initial_state(mean_patient(), c), 0.5, 52.4, c);
  EXPECT_DOUBLE_EQ(s.e_exo, 4.0);
}

TEST(StepDay, ExogenousDecayMatchesClosedForm) {
  PatientParams p = mean_patient();
  p.ep = 0.0;
  ModelConstants c;
  ErythropoiesisModel model(c);
  auto s = model.initial_state(p);
  s = administer_bolus(s, 0.5, p.weight_kg, c);
  const double e0 = s.e_exo;
  for (int d = 1; d <= 10; ++d) {
    model.step_day(s, p);
    const double expected = e0 * std::exp(-c.elimination_rate() * d);
    EXPECT_NEAR(s.e_exo / expected, 1.0, 1e-12) << "day " << d;
  }
  EXPECT_NEAR(exogenous_at(initial_state(p, c), 1.0, c), 0.0, 0.0);
}

TEST(StepDay, HalfLifeIsTwentyFiveHours) {
  ModelConstants c;
  auto s = administer_bolus(initial_state(mean_patient(), c), 1.0, 52.4, c);
  EXPECT_NEAR(exogenous_at(s, 25.0 / 24.0, c), 0.5, 1e-12);
}

TEST(StepDay, ConstantHistoryIsAnExactEquilibrium) {
  ErythropoiesisModel model;
  for (const auto& p : sampled_patients(10, 3)) {
    auto s = model.initial_state(p, PreHistory::steady);
    const double hb0 = s.hb(p);
    for (int d = 0; d < 100; ++d) model.step_day(s, p);
    EXPECT_LT(std::fabs(s.hb(p) - hb0) / hb0, 1e-12);
    EXPECT_LT(std::fabs(s.p - 1.0), 1e-12);
  }
}

TEST(StepDay, NoEpoFreezesEverything) {
  PatientParams p = mean_patient();
  p.ep = 0.0;
  ErythropoiesisModel model;
  auto s = model.initial_state(p, PreHistory::quiescent, 1.3, 2.0);
  for (int d = 0; d < 120; ++d) model.step_day(s, p);
  EXPECT_EQ(s.p, 1.3);
  EXPECT_EQ(s.r_now, 2.0);
}

TEST(StepDay, FreeFunctionMatchesModel) {
  const auto p = mean_patient();
  ModelConstants c;
  ErythropoiesisModel model(c);
  auto a = administer_bolus(model.initial_state(p), 0.7, p.weight_kg, c);
  auto b = a;
  for (int d = 0; d < 5; ++d) {
    model.step_day(a, p);
    b = step_day(b, p, c);
  }
  EXPECT_EQ(a.p, b.p);
  EXPECT_EQ(a.r_now, b.r_now);
}

TEST(StepDay, RejectsHistoryFromOtherConstants) {
  ModelConstants longer;
  longer.t_r = 90;
  auto s = initial_state(mean_patient(), longer);
  ErythropoiesisModel model;
  EXPECT_THROW(model.step_day(s, mean_patient()), std::logic_error);
}

TEST(SimulateMonths, ZeroDoseZeroEpoIsFlat) {
  PatientParams p = mean_patient();
  p.ep = 0.0;
  std::vector<double> doses(30, 0.0);
  const auto t = simulate_months(p, doses, 30);
  ASSERT_EQ(t.monthly_hb.size(), 30u);
  for (double hb : t.monthly_hb) EXPECT_DOUBLE_EQ(hb, p.mch * 1.0);
}

TEST(SimulateMonths, DoseRaisesMonthSixHb) {
  for (const auto& p : sampled_patients(8, 11)) {
    std::vector<double> zero(6, 0.0), some(6, 0.5);
    const auto a = simulate_months(p, zero, 6);
    const auto b = simulate_months(p, some, 6);
    EXPECT_GT(b.monthly_hb[5], a.monthly_hb[5]);
  }
}

TEST(SimulateMonths, StaysNonNegative) {
  ModelConstants c;
  c.concentration_scale = 8.75;
  for (const auto& p : sampled_patients(8, 5)) {
    std::vector<double> doses{1, 0, 0.75, 0, 0, 0.25, 1, 0, 0, 0, 0.5, 0};
    const auto t = simulate_months(p, doses, doses.size(), c);
    for (double hb : t.monthly_hb) EXPECT_GE(hb, 0.0);
  }
}

TEST(SimulateMonths, HalvingTheSubstepBarelyMovesHb) {
  ModelConstants coarse;
  coarse.concentration_scale = 8.75;
  ModelConstants fine = coarse;
  fine.substeps = 8;
  for (const auto& p : sampled_patients(6, 21)) {
    std::vector<double> doses{0.5, 0.25, 1.0, 0.0, 0.75, 0.5};
    const auto a = simulate_months(p, doses, 6, coarse);
    const auto b = simulate_months(p, doses, 6, fine);
    for (std::size_t m = 0; m < 6; ++m) EXPECT_LT(std::fabs(a.monthly_hb[m] - b.monthly_hb[m]), 1e-4);
  }
}

TEST(SimulateMonths, WeeklyBolusesOnDaysZeroSevenFourteenTwentyOne) {
  const auto p = mean_patient();
  ModelConstants c;
  ErythropoiesisModel model(c);
  auto s = model.initial_state(p);
  std::vector<DailyRecord> daily;
  simulate_month(model, s, p, 0.5, &daily);
  ASSERT_EQ(daily.size(), 28u);
  const double bump = c.bolus_concentration(0.5 * p.weight_kg);
  // Record k holds the state at the end of day k, i.e. one day of decay after
  // a bolus given that morning.
  for (int day : {0, 7, 14, 21}) {
    const double before = day == 0 ? 0.0 : daily[day - 1].e_exo;
    EXPECT_NEAR(daily[day].e_exo, (before + bump) * std::exp(-c.elimination_rate()), 1e-12);
  }
}

TEST(SimulateMonths, ShapeAndDailyExport) {
  const auto p = mean_patient();
  ModelConstants c;
  ErythropoiesisModel model(c);
  std::vector<double> doses(3, 0.25);
  const auto t = simulate_months(p, doses, 3, model.initial_state(p), model, true);
  EXPECT_EQ(t.monthly_hb.size(), 3u);
  EXPECT_EQ(t.daily_hb.size(), 1u + 3u * 28u);
  std::ostringstream out;
  write_daily_csv(out, t.daily_hb);
  EXPECT_EQ(out.str().substr(0, 22), "day,P,R,E_exo,E_tot,Hb");
  EXPECT_THROW(simulate_months(p, doses, 4), DomainError);
}

TEST(PatientParams, Validation) {
  PatientParams p = mean_patient();
  EXPECT_NO_THROW(p.validate());
  p.mch = 2.5;
  EXPECT_THROW(p.validate(), DomainError);
  EXPECT_DOUBLE_EQ(mch_for(Sex::female), 2.4);
}

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "anemia/protocol.hpp"

using namespace anemia;

namespace {

ProtocolState with_prev(double dose, double hb_prev) {
  ProtocolState s = protocol_init();
  s.dose = dose;
  s.hb_prev = hb_prev;
  return s;
}

double truncate2(double v) { return std::floor(v * 100.0 + 1e-9) / 100.0; }

}  // namespace

TEST(ProtocolInit, StartsAtTheLabelDose) {
  const auto s = protocol_init();
  EXPECT_EQ(s.dose, 0.45);
  EXPECT_FALSE(s.interrupted);
  EXPECT_FALSE(s.hb_prev.has_value());
  EXPECT_GE(s.months_since_increase, kMonthsUntilIncrease);
}

TEST(ProtocolStep, FirstReadingSkipsRiseRules) {
  // No previous Hb: in range and low readings hold, only the level rule acts.
  EXPECT_EQ(protocol_step(protocol_init(), 9.0).dose, 0.45);
  EXPECT_EQ(protocol_step(protocol_init(), 11.5).dose, 0.45);
  EXPECT_DOUBLE_EQ(protocol_step(protocol_init(), 12.6).dose, 0.45 * 0.75);
}

TEST(ProtocolStep, SlowRiseBelowTargetIncreases) {
  const auto d = protocol_step(with_prev(0.4, 10.0), 10.4);
  EXPECT_DOUBLE_EQ(d.dose, 0.5);
  EXPECT_EQ(d.state.months_since_increase, 0u);
}

TEST(ProtocolStep, HighHbReduces) { EXPECT_DOUBLE_EQ(protocol_step(with_prev(0.4, 12.2), 12.6).dose, 0.3); }

TEST(ProtocolStep, FastRiseReducesOnce) {
  // Both the level rule and the rise rule match; only one reduction applies.
  EXPECT_DOUBLE_EQ(protocol_step(with_prev(0.4, 10.0), 12.3).dose, 0.3);
  EXPECT_DOUBLE_EQ(protocol_step(with_prev(0.4, 9.0), 11.5).dose, 0.3);
}

TEST(ProtocolStep, InRangeOrAtTargetHolds) {
  EXPECT_EQ(protocol_step(with_prev(0.4, 11.2), 11.6).dose, 0.4);
  EXPECT_EQ(protocol_step(with_prev(0.4, 10.5), 11.0).dose, 0.4);  // not below target
  EXPECT_EQ(protocol_step(with_prev(0.4, 9.0), 10.2).dose, 0.4);   // rose by 1.2
}

TEST(ProtocolStep, InterruptsWhenStillRisingAfterAHighReduction) {
  auto d = protocol_step(with_prev(0.4, 11.8), 12.4);
  EXPECT_DOUBLE_EQ(d.dose, 0.3);
  EXPECT_TRUE(d.state.reduced_for_high);
  d = protocol_step(d.state, 12.9);
  EXPECT_EQ(d.dose, 0.0);
  EXPECT_TRUE(d.state.interrupted);
  EXPECT_DOUBLE_EQ(d.state.dose_before_interrupt, 0.3);
  // Not declining yet: stay off.
  d = protocol_step(d.state, 13.1);
  EXPECT_EQ(d.dose, 0.0);
  EXPECT_TRUE(d.state.interrupted);
  // Declining: resume a quarter lower.
  d = protocol_step(d.state, 12.8);
  EXPECT_DOUBLE_EQ(d.dose, 0.225);
  EXPECT_FALSE(d.state.interrupted);
}

TEST(ProtocolStep, FallingHighHbReducesWithoutInterrupting) {
  auto d = protocol_step(with_prev(0.4, 12.0), 12.8);
  d = protocol_step(d.state, 12.5);
  EXPECT_DOUBLE_EQ(d.dose, 0.225);
  EXPECT_FALSE(d.state.interrupted);
}

TEST(ProtocolStep, IncreasesAtMostOncePerMonthlyReview) {
  auto s = with_prev(0.2, 8.0);
  double prev = s.dose;
  for (int m = 0; m < 6; ++m) {
    const auto d = protocol_step(s, 8.0 + 0.1 * m);
    EXPECT_DOUBLE_EQ(d.dose, prev * 1.25);
    prev = d.dose;
    s = d.state;
  }
}

TEST(ProtocolStep, IncreaseFromZeroRestartsAtTheLabelDose) {
  const auto d = protocol_step(protocol_resume(0.0, 9.0), 9.2);
  EXPECT_EQ(d.dose, 0.45);
  EXPECT_DOUBLE_EQ(protocol_step(d.state, 9.4).dose, 0.45 * 1.25);
  // Holding at zero while Hb is in range is still allowed.
  EXPECT_EQ(protocol_step(protocol_resume(0.0, 11.3), 11.5).dose, 0.0);
}

TEST(ProtocolStep, CapLimitsIncreases) {
  ProtocolOptions opt;
  opt.dose_cap = 0.5;
  auto d = protocol_step(with_prev(0.45, 9.0), 9.1, opt);
  EXPECT_EQ(d.dose, 0.5);
  EXPECT_THROW(protocol_step(protocol_init(), 0.0), DomainError);
}

TEST(ProtocolStep, AdjustmentsAreExactFactors) {
  const std::vector<double> hb{9.5, 9.7, 10.2, 11.0, 12.1, 13.5, 13.8, 13.2, 12.6, 11.4, 10.1, 9.9};
  ProtocolState s = protocol_init();
  double prev = s.dose;
  for (double h : hb) {
    const auto d = protocol_step(s, h);
    const bool ok = d.dose == prev || d.dose == 0.0 || std::fabs(d.dose - prev * 1.25) < 1e-15 ||
                    std::fabs(d.dose - prev * 0.75) < 1e-15 ||
                    std::fabs(d.dose - s.dose_before_interrupt * 0.75) < 1e-15;
    EXPECT_TRUE(ok) << "hb " << h;
    EXPECT_GE(d.dose, 0.0);
    prev = d.dose;
    s = d.state;
  }
}

TEST(ProtocolReplay, ReproducesTheCyclingCaseDoseColumn) {
  // Hb readings of a cycling patient from month 2 onward; entry from the
  // last warm-up dose 0.75 with month 1 Hb 12.65. Published doses are
  // truncated to two decimals.
  const std::vector<double> hb{12.91, 12.43, 11.36, 10.44, 10.13, 10.57, 11.52, 12.72};
  const std::vector<double> published{0.56, 0.42, 0.42, 0.52, 0.65, 0.82, 0.82, 0.61};
  const auto doses = protocol_replay(hb, protocol_resume(0.75, 12.65));
  ASSERT_EQ(doses.size(), published.size());
  for (std::size_t i = 0; i < doses.size(); ++i) EXPECT_EQ(truncate2(doses[i]), published[i]) << i;
}

TEST(ProtocolReplay, Deterministic) {
  const std::vector<double> hb{10.0, 10.3, 10.9, 11.8, 12.7, 13.1, 12.2, 11.0};
  EXPECT_EQ(protocol_replay(hb, protocol_init()), protocol_replay(hb, protocol_init()));
}

TEST(ProtocolResume, KeepsDoseAndComparisonPoint) {
  const auto s = protocol_resume(0.25, 10.8);
  EXPECT_EQ(s.dose, 0.25);
  EXPECT_EQ(s.hb_prev, 10.8);
  EXPECT_DOUBLE_EQ(protocol_step(s, 10.9).dose, 0.3125);
  EXPECT_EQ(protocol_resume(0.0, std::nullopt).dose, 0.0);
  EXPECT_THROW(protocol_resume(-0.1, 11.0), InputError);
}

TEST(ProtocolOptions, Validation) {
  ProtocolOptions o;
  EXPECT_NO_THROW(o.validate());
  o.increase = 0.9;
  EXPECT_THROW(o.validate(), ConfigError);
  o = {};
  o.dose_cap = 0.0;
  EXPECT_THROW(o.validate(), ConfigError);
}

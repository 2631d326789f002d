#pragma once

// Rule-based dose titration used as the clinical baseline.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "anemia/common.hpp"

namespace anemia {

struct ProtocolOptions {
  double initial_dose = 0.45;
  double increase = 1.25;
  double decrease = 0.75;
  double hb_high = 12.0;      // reduce above this
  double hb_target = 11.0;    // increase only below this (lower edge of the range)
  double slow_rise = 1.0;     // "too slow" rise per month
  double fast_rise = 2.0;     // "too fast" rise per month
  std::optional<double> dose_cap;  // off by default

  void validate() const {
    if (!(initial_dose >= 0.0)) throw ConfigError("ProtocolOptions: initial_dose must be >= 0");
    if (!(increase > 1.0) || !(decrease > 0.0 && decrease < 1.0))
      throw ConfigError("ProtocolOptions: bad adjustment factors");
    if (dose_cap && !(*dose_cap > 0.0)) throw ConfigError("ProtocolOptions: dose_cap must be > 0");
  }
};

struct ProtocolState {
  double dose = 0.45;
  std::size_t months_since_increase = 0;
  bool interrupted = false;
  double dose_before_interrupt = 0.0;
  std::optional<double> hb_prev;
  bool reduced_for_high = false;  // last month's reduction was triggered by Hb above hb_high

  friend bool operator==(const ProtocolState&, const ProtocolState&) = default;
};

inline constexpr std::size_t kMonthsUntilIncrease = 1;

inline ProtocolState protocol_init(const ProtocolOptions& opt = {}) {
  ProtocolState s;
  s.dose = opt.initial_dose;
  s.months_since_increase = kMonthsUntilIncrease;
  return s;
}

/// State for picking up a patient whose previous doses were chosen elsewhere
/// (e.g. random warm-up months): continues from `last_dose`, with the Hb
/// observed before the final reading as the comparison point.
inline ProtocolState protocol_resume(double last_dose, std::optional<double> hb_before) {
  if (!(last_dose >= 0.0)) throw InputError("protocol_resume: negative dose");
  ProtocolState s;
  s.dose = last_dose;
  s.months_since_increase = kMonthsUntilIncrease;
  s.hb_prev = hb_before;
  return s;
}

struct ProtocolDecision {
  ProtocolState state;
  double dose = 0.0;
};

/// One monthly review. The first matching rule wins:
///   1. interrupted: resume at decrease * previous dose once Hb declines, else hold at 0
///   2. Hb above hb_high again after a high-Hb reduction and still rising: interrupt
///   3. Hb above hb_high: reduce
///   4. rise above fast_rise: reduce
///   5. rise below slow_rise, Hb under hb_target, last increase at least a month ago: increase
///      (from zero this means restarting at initial_dose)
/// Rules that compare with the previous Hb are skipped when there is none.
inline ProtocolDecision protocol_step(ProtocolState s, double hb_now, const ProtocolOptions& opt = {}) {
  if (!(hb_now > 0.0)) throw DomainError("protocol_step: Hb must be positive");
  ++s.months_since_increase;
  const bool have_prev = s.hb_prev.has_value();
  const double rise = have_prev ? hb_now - *s.hb_prev : 0.0;
  bool high_reduction = false;

  if (s.interrupted) {
    if (have_prev && hb_now < *s.hb_prev) {
      s.dose = opt.decrease * s.dose_before_interrupt;
      s.interrupted = false;
      s.dose_before_interrupt = 0.0;
    }
  } else if (hb_now > opt.hb_high && s.reduced_for_high && have_prev && rise > 0.0 && s.dose > 0.0) {
    s.interrupted = true;
    s.dose_before_interrupt = s.dose;
    s.dose = 0.0;
  } else if (hb_now > opt.hb_high) {
    s.dose *= opt.decrease;
    high_reduction = true;
  } else if (have_prev && rise > opt.fast_rise) {
    s.dose *= opt.decrease;
  } else if (have_prev && rise < opt.slow_rise && hb_now < opt.hb_target &&
             s.months_since_increase >= kMonthsUntilIncrease) {
    // A patient left at zero by the random warm-up restarts from the label dose.
    s.dose = s.dose > 0.0 ? s.dose * opt.increase : opt.initial_dose;
    s.months_since_increase = 0;
  }
  if (opt.dose_cap && s.dose > *opt.dose_cap) s.dose = *opt.dose_cap;

  s.reduced_for_high = high_reduction || (s.interrupted && s.reduced_for_high);
  s.hb_prev = hb_now;
  return {s, s.dose};
}

/// Runs the protocol over a fixed Hb series, returning one dose per reading.
inline std::vector<double> protocol_replay(std::span<const double> hb, ProtocolState s,
                                           const ProtocolOptions& opt = {}) {
  std::vector<double> doses;
  doses.reserve(hb.size());
  for (double h : hb) {
    auto d = protocol_step(s, h, opt);
    s = d.state;
    doses.push_back(d.dose);
  }
  return doses;
}

}  // namespace anemia

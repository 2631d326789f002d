#pragma once

// Decision problem for monthly dose titration: state construction, the
// discrete dose set, the piecewise Hb reward, and transition datasets.

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"

namespace anemia {

inline constexpr std::size_t kStateDim = 6;
using Features = std::array<double, kStateDim>;

/// Monthly state: current Hb, its change, the last three doses, and the
/// patient's response group.
struct StateVec {
  double hb = 0.0;
  double d_hb = 0.0;
  double da_0 = 0.0;  // dose given this month (led to hb)
  double da_1 = 0.0;
  double da_2 = 0.0;
  std::size_t group = 0;

  Features features() const { return {hb, d_hb, da_0, da_1, da_2, static_cast<double>(group)}; }
  friend bool operator==(const StateVec&, const StateVec&) = default;
};

/// Ordered weekly doses (ug/kg); strictly increasing from 0.
class ActionSet {
 public:
  ActionSet() : ActionSet(std::vector<double>{0.0, 0.25, 0.50, 0.75, 1.0}) {}
  explicit ActionSet(std::vector<double> doses) : doses_(std::move(doses)) {
    if (doses_.empty() || doses_.front() != 0.0)
      throw ConfigError("ActionSet: first dose must be 0");
    for (std::size_t i = 1; i < doses_.size(); ++i)
      if (!(doses_[i] > doses_[i - 1])) throw ConfigError("ActionSet: doses must increase strictly");
  }

  std::size_t size() const noexcept { return doses_.size(); }
  double dose(std::size_t index) const { return doses_.at(index); }
  std::span<const double> doses() const noexcept { return doses_; }

  /// Index of an exact dose value; throws if absent.
  std::size_t index_of(double dose) const {
    for (std::size_t i = 0; i < doses_.size(); ++i)
      if (doses_[i] == dose) return i;
    throw InputError("dose " + format_double(dose) + " is not in the action set");
  }

  friend bool operator==(const ActionSet&, const ActionSet&) = default;

 private:
  std::vector<double> doses_;
};

struct Transition {
  StateVec s;
  std::size_t a = 0;
  double r = 0.0;
  StateVec s_next;
  bool terminal = false;
};

struct TransitionDataset {
  std::vector<Transition> transitions;
  std::uint64_t seed = 0;
  std::string cohort_id;
  std::size_t n_episodes = 0;
  std::size_t dropped_by_filter = 0;

  std::size_t size() const noexcept { return transitions.size(); }
  bool empty() const noexcept { return transitions.empty(); }
};

// ---------------------------------------------------------------------------
// Reward

inline constexpr double kRewardSlope = 0.5;  // g: distance at which reward drops to 0.05
inline const double kRewardWidth = std::atanh(std::sqrt(0.95));
inline constexpr double kHbTarget = 11.5;
inline constexpr double kLowBand = 10.5;
inline constexpr double kHighBand = 12.5;

inline double bell(double distance) {
  const double t = std::tanh(std::fabs(distance) / kRewardSlope * kRewardWidth);
  return 1.0 - t * t;
}

/// Reward for observing hb_next one month after hb_now. Inside (10.5, 12.5)
/// the target is 11.5; above, a 1 g/dl decrease; below, a 1 g/dl increase.
inline double reward(double hb_now, double hb_next) {
  if (!(hb_now > 0.0) || !(hb_next > 0.0)) throw DomainError("reward: Hb values must be positive");
  if (hb_now > kLowBand && hb_now < kHighBand) return bell(hb_next - kHbTarget);
  const double delta = hb_next - hb_now;
  if (hb_now >= kHighBand) return bell(delta + 1.0);
  return bell(delta - 1.0);
}

// ---------------------------------------------------------------------------
// States and transitions

/// History that precedes the first month of a series (e.g. warm-up months).
struct PriorHistory {
  std::vector<double> hb;     // oldest first
  std::vector<double> doses;  // oldest first
};

/// State for each month k: (hb_k, hb_k - hb_{k-1}, da_k, da_{k-1}, da_{k-2},
/// group). Terms reaching before the series come from `prior` when given and
/// are 0 otherwise.
inline std::vector<StateVec> build_states(std::span<const double> hb, std::span<const double> doses,
                                          std::size_t group, const PriorHistory& prior = {}) {
  if (hb.size() != doses.size()) throw InputError("build_states: Hb and dose series differ in length");
  if (hb.empty()) throw InputError("build_states: empty series");
  std::vector<double> all_hb(prior.hb.begin(), prior.hb.end());
  std::vector<double> all_doses(prior.doses.begin(), prior.doses.end());
  const std::ptrdiff_t hb_off = static_cast<std::ptrdiff_t>(all_hb.size());
  const std::ptrdiff_t dose_off = static_cast<std::ptrdiff_t>(all_doses.size());
  all_hb.insert(all_hb.end(), hb.begin(), hb.end());
  all_doses.insert(all_doses.end(), doses.begin(), doses.end());

  auto dose_at = [&](std::ptrdiff_t k) {
    const auto i = k + dose_off;
    return i >= 0 ? all_doses[static_cast<std::size_t>(i)] : 0.0;
  };
  std::vector<StateVec> out;
  out.reserve(hb.size());
  for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(hb.size()); ++k) {
    StateVec s;
    s.hb = hb[static_cast<std::size_t>(k)];
    const auto prev = k - 1 + hb_off;
    s.d_hb = prev >= 0 ? s.hb - all_hb[static_cast<std::size_t>(prev)] : 0.0;
    s.da_0 = dose_at(k);
    s.da_1 = dose_at(k - 1);
    s.da_2 = dose_at(k - 2);
    s.group = group;
    out.push_back(s);
  }
  return out;
}

/// One patient's monthly record: states[k], and actions[k] / rewards[k] for
/// the move from states[k] to states[k+1].
struct Episode {
  std::vector<StateVec> states;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
};

/// Builds an episode from monthly Hb and doses: the action taken at month k
/// is the dose of month k+1; rewards follow reward(hb_k, hb_{k+1}).
inline Episode make_episode(std::span<const double> hb, std::span<const double> doses,
                            std::size_t group, const ActionSet& actions) {
  Episode ep;
  ep.states = build_states(hb, doses, group);
  for (std::size_t k = 0; k + 1 < hb.size(); ++k) {
    ep.actions.push_back(actions.index_of(doses[k + 1]));
    ep.rewards.push_back(reward(hb[k], hb[k + 1]));
  }
  return ep;
}

inline constexpr double kMaxPlausibleHb = 20.0;

/// Flattens episodes into transitions, dropping any whose endpoints exceed
/// `hb_limit`. The last transition of each episode is terminal.
inline TransitionDataset episodes_to_transitions(std::span<const Episode> episodes,
                                                 double hb_limit = kMaxPlausibleHb) {
  TransitionDataset ds;
  ds.n_episodes = episodes.size();
  for (const auto& ep : episodes) {
    if (ep.states.empty()) continue;
    const std::size_t n = ep.states.size() - 1;
    if (ep.actions.size() != n || ep.rewards.size() != n)
      throw InputError("episodes_to_transitions: actions/rewards must have one entry per step");
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = ep.states[k];
      const auto& s2 = ep.states[k + 1];
      if (s.hb > hb_limit || s2.hb > hb_limit) {
        ++ds.dropped_by_filter;
        continue;
      }
      ds.transitions.push_back({s, ep.actions[k], ep.rewards[k], s2, k + 1 == n});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kTransitionHeader =
    "hb,d_hb,da0,da1,da2,group,action,reward,hb_next,d_hb_next,da0_next,da1_next,da2_next,"
    "group_next,terminal";

inline void write_transitions_csv(std::ostream& out, const TransitionDataset& ds,
                                  const ActionSet& actions) {
  out << kTransitionHeader << '\n';
  auto state = [&out](const StateVec& s) {
    out << format_double(s.hb) << ',' << format_double(s.d_hb) << ',' << format_double(s.da_0)
        << ',' << format_double(s.da_1) << ',' << format_double(s.da_2) << ',' << s.group;
  };
  for (const auto& t : ds.transitions) {
    state(t.s);
    out << ',' << format_double(actions.dose(t.a)) << ',' << format_double(t.r) << ',';
    state(t.s_next);
    out << ',' << (t.terminal ? 1 : 0) << '\n';
  }
}

inline TransitionDataset read_transitions_csv(std::istream& in, const ActionSet& actions) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kTransitionHeader)
    throw InputError("transition csv: unexpected header");
  TransitionDataset ds;
  auto state = [](std::span<const std::string_view> f) {
    StateVec s;
    s.hb = parse_double(f[0]);
    s.d_hb = parse_double(f[1]);
    s.da_0 = parse_double(f[2]);
    s.da_1 = parse_double(f[3]);
    s.da_2 = parse_double(f[4]);
    s.group = parse_int<std::size_t>(f[5]);
    return s;
  };
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 15) throw InputError("transition csv: expected 15 columns");
    Transition t;
    t.s = state(std::span(f).subspan(0, 6));
    t.a = actions.index_of(parse_double(f[6]));
    t.r = parse_double(f[7]);
    t.s_next = state(std::span(f).subspan(8, 6));
    t.terminal = parse_int<int>(f[14]) != 0;
    ds.transitions.push_back(t);
  }
  return ds;
}

}  // namespace anemia

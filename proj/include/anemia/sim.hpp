#pragma once

// Erythropoiesis under intravenous darbepoetin alfa: a two-compartment
// (progenitors P, circulating red cells R) delay-differential model driven by
// total plasma EPO (endogenous + exogenous). All lags are whole days, so the
// model is integrated on a daily grid with fixed RK4 sub-steps and a rolling
// daily history buffer.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"

namespace anemia {

enum class Sex { male, female };

inline constexpr double kMchMale = 2.7;
inline constexpr double kMchFemale = 2.4;

constexpr double mch_for(Sex sex) noexcept { return sex == Sex::male ? kMchMale : kMchFemale; }

/// Per-patient physiological constants.
struct PatientParams {
  double ep = 0.0;         // endogenous EPO, ug/L
  double cp = 0.0;         // progenitor flow constant, 1/day
  double cr = 0.0;         // red-cell flow constant, 1/day
  double mch = kMchMale;   // g per 1e11 cells
  double weight_kg = 70.0;

  void validate() const {
    if (!(ep >= 0.0) || !(cp > 0.0) || !(cr > 0.0) || !(weight_kg > 0.0))
      throw DomainError("PatientParams: require ep >= 0, cp > 0, cr > 0, weight > 0");
    if (mch != kMchMale && mch != kMchFemale)
      throw DomainError("PatientParams: mch must be 2.7 (male) or 2.4 (female)");
  }

  friend bool operator==(const PatientParams&, const PatientParams&) = default;
};

struct ModelConstants {
  int t_p = 9;    // progenitor lifespan, days
  int t_m = 4;    // maturation delay, days
  int t_r = 70;   // red-cell lifespan, days
  double v_d = 52.4;  // distribution volume, L
  double senescence_spread = 30.0;
  // false: senescence_spread is the Gaussian variance (days^2); true: its SD.
  bool spread_is_sd = false;
  int substeps = 4;  // RK4 sub-steps per day
  // Converts dose / v_d into the concentration units of ep and e_50. 1 keeps
  // the plain ratio.
  double concentration_scale = 1.0;

  double e_50() const noexcept { return 100.0 / v_d; }
  double elimination_rate() const noexcept { return 24.0 / 25.0 * std::numbers::ln2; }
  int maturation_lag() const noexcept { return t_p + t_m; }
  int max_lag() const noexcept { return t_p + t_m + t_r; }
  double bolus_concentration(double amount_ug) const noexcept {
    return concentration_scale * amount_ug / v_d;
  }
  double senescence_sd() const noexcept {
    return spread_is_sd ? senescence_spread : std::sqrt(senescence_spread);
  }

  void validate() const {
    if (t_p < 1 || t_m < 0 || t_r < 1) throw DomainError("ModelConstants: lifespans must be positive");
    if (!(v_d > 0.0) || !(senescence_spread > 0.0)) throw DomainError("ModelConstants: v_d, spread > 0");
    if (substeps < 1) throw DomainError("ModelConstants: substeps >= 1");
    if (!(concentration_scale > 0.0)) throw DomainError("ModelConstants: concentration_scale > 0");
  }
};

/// Hill response E / (E50 + E).
inline double hill(double e_tot, double e_50) {
  if (!(e_tot >= 0.0) || !(e_50 > 0.0)) throw DomainError("hill: requires e_tot >= 0 and e_50 > 0");
  return e_tot / (e_50 + e_tot);
}

/// Normalized senescence weights g(T)/S for lags T_P+T_M+1 .. T_P+T_M+T_R
/// (index 0 is the shortest lag).
inline std::vector<double> senescence_weights(const ModelConstants& c) {
  const double sd = c.senescence_sd();
  std::vector<double> w(static_cast<std::size_t>(c.t_r));
  double total = 0.0;
  for (int k = 1; k <= c.t_r; ++k) {
    const double z = (k - c.t_r) / sd;
    w[k - 1] = std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
    total += w[k - 1];
  }
  for (auto& x : w) x /= total;
  return w;
}

/// How the model's past looks before t0.
enum class PreHistory {
  // No EPO acts before t0, so every lagged flow term starts at zero.
  quiescent,
  // EPO has been at the patient's endogenous level forever: the lagged flows
  // balance the current ones and P, R sit at equilibrium.
  steady,
};

struct Bolus {
  long day = 0;
  double amount_ug = 0.0;
};

/// Rolling model state. History slot for day d lives at d mod (max_lag + 1).
struct SimState {
  struct DaySample {
    double p = 0.0;      // P at the start of the day
    double e_exo = 0.0;  // exogenous EPO at the start of the day, after boluses
    double e_endo = 0.0; // endogenous EPO acting that day
  };

  long day = 0;
  double p = 1.0;
  double r_now = 1.0;
  double e_exo = 0.0;
  std::vector<DaySample> p_hist;
  std::vector<Bolus> pending_boluses;

  const DaySample& sample(long d) const {
    const long n = static_cast<long>(p_hist.size());
    return p_hist[static_cast<std::size_t>(((d % n) + n) % n)];
  }
  DaySample& sample(long d) {
    const long n = static_cast<long>(p_hist.size());
    return p_hist[static_cast<std::size_t>(((d % n) + n) % n)];
  }

  double hb(const PatientParams& params) const noexcept { return params.mch * r_now; }
};

/// Builds the state at t0 with P(t0) = p0, R(t0) = r0 and no drug on board.
inline SimState initial_state(const PatientParams& params, const ModelConstants& consts,
                              PreHistory mode = PreHistory::steady, double p0 = 1.0,
                              double r0 = 1.0) {
  params.validate();
  consts.validate();
  if (!(p0 >= 0.0) || !(r0 >= 0.0)) throw DomainError("initial_state: p0, r0 must be >= 0");
  SimState s;
  s.day = 0;
  s.p = p0;
  s.r_now = r0;
  s.e_exo = 0.0;
  const double endo = mode == PreHistory::steady ? params.ep : 0.0;
  s.p_hist.assign(static_cast<std::size_t>(consts.max_lag() + 1), {p0, 0.0, endo});
  return s;
}

/// Immediate intravenous bolus: raises plasma concentration by
/// concentration_scale * dose / V_d.
inline SimState administer_bolus(SimState state, double dose_per_kg, double weight_kg,
                                 const ModelConstants& consts = {}) {
  if (!(dose_per_kg >= 0.0)) throw DomainError("administer_bolus: dose must be >= 0");
  if (!(weight_kg > 0.0)) throw DomainError("administer_bolus: weight must be > 0");
  state.e_exo += consts.bolus_concentration(dose_per_kg * weight_kg);
  return state;
}

inline void schedule_bolus(SimState& state, long day, double amount_ug) {
  if (!(amount_ug >= 0.0)) throw DomainError("schedule_bolus: amount must be >= 0");
  if (day < state.day) throw DomainError("schedule_bolus: day already simulated");
  state.pending_boluses.push_back({day, amount_ug});
}

/// Exogenous concentration dt days after the state's clock (closed form).
inline double exogenous_at(const SimState& state, double dt, const ModelConstants& consts = {}) {
  return state.e_exo * std::exp(-consts.elimination_rate() * dt);
}

struct DailyRecord {
  long day = 0;
  double p = 0.0;
  double r = 0.0;
  double e_exo = 0.0;
  double e_tot = 0.0;
  double hb = 0.0;
};

/// Integrator for the delay system. Holds the constants-derived tables
/// (senescence weights, decay factors at RK4 stage times) so they are built
/// once; immutable after construction and safe to share across threads.
class ErythropoiesisModel {
 public:
  explicit ErythropoiesisModel(ModelConstants consts = {})
      : c_(consts), weights_((c_.validate(), senescence_weights(c_))) {
    const int nodes = 2 * c_.substeps + 1;
    decay_.resize(static_cast<std::size_t>(nodes));
    for (int i = 0; i < nodes; ++i)
      decay_[i] = std::exp(-c_.elimination_rate() * (static_cast<double>(i) / (nodes - 1)));
    day_decay_ = std::exp(-c_.elimination_rate());
  }

  const ModelConstants& constants() const noexcept { return c_; }
  std::span<const double> weights() const noexcept { return weights_; }

  SimState initial_state(const PatientParams& params, PreHistory mode = PreHistory::steady,
                         double p0 = 1.0, double r0 = 1.0) const {
    return anemia::initial_state(params, c_, mode, p0, r0);
  }

  /// Advances the state by one day.
  void step_day(SimState& s, const PatientParams& params) const {
    if (s.p_hist.size() != static_cast<std::size_t>(c_.max_lag() + 1))
      throw std::logic_error("step_day: history buffer not initialized for these constants");

    // Boluses due today act from the start of the day.
    if (!s.pending_boluses.empty()) {
      std::erase_if(s.pending_boluses, [&](const Bolus& b) {
        if (b.day > s.day) return false;
        s.e_exo += c_.bolus_concentration(b.amount_ug);
        return true;
      });
    }

    const long n = s.day;
    s.sample(n) = {s.p, s.e_exo, params.ep};

    const double e50 = c_.e_50();
    const int nodes = 2 * c_.substeps + 1;
    const int mat = c_.maturation_lag();

    // Lagged terms depend only on stored history, so evaluate them once at
    // every half-substep node of the day.
    auto flow = [&](long m, int node) {
      const auto& a = s.sample(m);
      const auto& b = s.sample(m + 1);
      const double tau = static_cast<double>(node) / (nodes - 1);
      const double e = a.e_endo + a.e_exo * decay_[node];
      const double p = a.p + (b.p - a.p) * tau;
      return e / (e50 + e) * p;
    };
    std::vector<double> lag_p_out(static_cast<std::size_t>(nodes));
    std::vector<double> lag_r_net(static_cast<std::size_t>(nodes));
    for (int k = 0; k < nodes; ++k) {
      double out = 0.0;
      for (int j = 1; j <= c_.t_p; ++j) out += flow(n - j, k);
      lag_p_out[k] = params.cp * out / c_.t_p;
      double senescent = 0.0;
      for (int j = 1; j <= c_.t_r; ++j) senescent += weights_[j - 1] * flow(n - mat - j, k);
      lag_r_net[k] = params.cr * (flow(n - mat, k) - senescent);
    }

    auto dp = [&](int node, double p) {
      const double e = params.ep + s.e_exo * decay_[node];
      return params.cp * (e / (e50 + e)) * p - lag_p_out[node];
    };

    const double h = 1.0 / c_.substeps;
    double p = s.p;
    double r = s.r_now;
    for (int i = 0; i < c_.substeps; ++i) {
      const int k0 = 2 * i, k1 = 2 * i + 1, k2 = 2 * i + 2;
      const double a1 = dp(k0, p);
      const double a2 = dp(k1, p + 0.5 * h * a1);
      const double a3 = dp(k1, p + 0.5 * h * a2);
      const double a4 = dp(k2, p + h * a3);
      p += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
      r += h / 6.0 * (lag_r_net[k0] + 4.0 * lag_r_net[k1] + lag_r_net[k2]);
    }
    s.p = p;
    s.r_now = r;
    s.e_exo *= day_decay_;
    s.day = n + 1;
  }

  DailyRecord record(const SimState& s, const PatientParams& params) const {
    return {s.day, s.p, s.r_now, s.e_exo, s.e_exo + params.ep, s.hb(params)};
  }

 private:
  ModelConstants c_;
  std::vector<double> weights_;
  std::vector<double> decay_;
  double day_decay_ = 1.0;
};

/// One-shot convenience wrapper around ErythropoiesisModel::step_day.
inline SimState step_day(SimState state, const PatientParams& params,
                         const ModelConstants& consts = {}) {
  ErythropoiesisModel(consts).step_day(state, params);
  return state;
}

inline constexpr int kDaysPerMonth = 28;
inline constexpr int kBolusesPerMonth = 4;

struct HbTrace {
  std::vector<double> monthly_hb;
  std::vector<DailyRecord> daily_hb;
};

/// Simulates one 28-day month: weekly boluses of dose * weight on days
/// 0, 7, 14, 21; returns Hb at the month's end.
inline double simulate_month(const ErythropoiesisModel& model, SimState& state,
                             const PatientParams& params, double dose_per_kg,
                             std::vector<DailyRecord>* daily = nullptr) {
  if (!(dose_per_kg >= 0.0)) throw DomainError("simulate_month: dose must be >= 0");
  if (dose_per_kg > 0.0)
    for (int w = 0; w < kBolusesPerMonth; ++w)
      schedule_bolus(state, state.day + 7L * w, dose_per_kg * params.weight_kg);
  for (int d = 0; d < kDaysPerMonth; ++d) {
    model.step_day(state, params);
    if (daily) daily->push_back(model.record(state, params));
  }
  return state.hb(params);
}

/// Runs `months` monthly decisions from `init`. Doses are ug/kg per week.
inline HbTrace simulate_months(const PatientParams& params, std::span<const double> doses,
                               std::size_t months, SimState init,
                               const ErythropoiesisModel& model, bool record_daily = false) {
  if (months < 1) throw DomainError("simulate_months: months >= 1");
  if (doses.size() < months) throw DomainError("simulate_months: fewer doses than months");
  HbTrace trace;
  trace.monthly_hb.reserve(months);
  if (record_daily) trace.daily_hb.push_back(model.record(init, params));
  for (std::size_t m = 0; m < months; ++m)
    trace.monthly_hb.push_back(
        simulate_month(model, init, params, doses[m], record_daily ? &trace.daily_hb : nullptr));
  return trace;
}

inline HbTrace simulate_months(const PatientParams& params, std::span<const double> doses,
                               std::size_t months, const ModelConstants& consts = {},
                               PreHistory mode = PreHistory::steady) {
  ErythropoiesisModel model(consts);
  return simulate_months(params, doses, months, model.initial_state(params, mode), model);
}

/// Dense trajectory CSV: day,P,R,E_exo,E_tot,Hb.
inline void write_daily_csv(std::ostream& out, std::span<const DailyRecord> rows) {
  out << "day,P,R,E_exo,E_tot,Hb\n";
  for (const auto& r : rows)
    out << r.day << ',' << format_double(r.p) << ',' << format_double(r.r) << ','
        << format_double(r.e_exo) << ',' << format_double(r.e_tot) << ','
        << format_double(r.hb) << '\n';
}

}  // namespace anemia

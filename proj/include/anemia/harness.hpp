#pragma once

// Experiment pipeline: cohort synthesis, random-dose experience, policy
// artifacts, paired evaluation of the three dosing strategies and the metric
// reports. Every stage reads and writes plain files in the output directory
// so each CLI subcommand can run on its own.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "anemia/cohort.hpp"
#include "anemia/common.hpp"
#include "anemia/config.hpp"
#include "anemia/fqi.hpp"
#include "anemia/mdp.hpp"
#include "anemia/protocol.hpp"
#include "anemia/qlearning.hpp"
#include "anemia/sim.hpp"
#include "json.hpp"

namespace anemia {

using Logger = std::function<void(const std::string&)>;

namespace files {
inline constexpr const char* kTrainCohort = "train_cohort.csv";
inline constexpr const char* kEvalCohort = "eval_cohort.csv";
inline constexpr const char* kClusters = "clusters.txt";
inline constexpr const char* kSilhouette = "silhouette.csv";
inline constexpr const char* kTransitions = "transitions.csv";
inline constexpr const char* kExperience = "experience.json";
inline constexpr const char* kFqiPolicy = "policy_fqi.txt";
inline constexpr const char* kQlPolicy = "policy_qlearning.txt";
inline constexpr const char* kFqiCurve = "convergence.csv";
inline constexpr const char* kQlCurve = "convergence_ql.csv";
inline constexpr const char* kLmin = "lmin.csv";
inline constexpr const char* kMetrics = "metrics.json";
inline constexpr const char* kTraces = "traces.csv";
inline constexpr const char* kQuantiles = "hb_quantiles.csv";
inline constexpr const char* kMonthly = "monthly_hb.csv";
inline constexpr const char* kPatients = "patient_summary.csv";
inline constexpr const char* kConfig = "config.effective";
}  // namespace files

namespace fs = std::filesystem;

inline void write_text_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  body(out);
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing input file " + path.string() + " (run the earlier stage first)");
  return in;
}

// ---------------------------------------------------------------------------
// Cohorts

struct Cohorts {
  std::vector<CohortRow> train;
  std::vector<CohortRow> eval;
  ClusterModel clusters;
  std::vector<std::pair<std::size_t, double>> silhouette;
};

/// Seed population from the parameter statistics, training cohort by
/// interpolation up to n_train_patients, clustering of the training cohort,
/// and a disjoint evaluation cohort interpolated from the same seed
/// population on its own random stream.
inline Cohorts build_cohorts(const ExperimentConfig& cfg) {
  cfg.validate();
  Rng seed_rng = make_rng(cfg.cohort_seed, 0);
  const auto base = sample_seed_population(cfg.cohort, cfg.n_seed_patients, seed_rng);

  std::vector<PatientParams> train;
  if (cfg.n_train_patients <= base.size()) {
    train.assign(base.begin(), base.begin() + static_cast<std::ptrdiff_t>(cfg.n_train_patients));
  } else {
    Rng aug_rng = make_rng(cfg.cohort_seed, 1);
    train = augment_by_interpolation(base, cfg.n_train_patients, aug_rng, cfg.neighbours);
  }

  Rng cluster_rng = make_rng(cfg.cohort_seed, 2);
  auto sel = cluster_patients(train, cluster_rng, cfg.clustering);

  Rng eval_rng = make_rng(cfg.cohort_seed, 3);
  const auto eval = interpolate_patients(base, cfg.n_eval_patients, cfg.neighbours, eval_rng);

  Cohorts c;
  c.clusters = std::move(sel.model);
  c.silhouette = std::move(sel.scores);
  for (std::size_t i = 0; i < train.size(); ++i)
    c.train.push_back({i, train[i], static_cast<long>(c.clusters.assign[i])});
  for (std::size_t i = 0; i < eval.size(); ++i)
    c.eval.push_back({i, eval[i], static_cast<long>(c.clusters.group_of(eval[i]))});
  return c;
}

inline void save_cohorts(const fs::path& dir, const Cohorts& c) {
  write_text_file(dir / files::kTrainCohort, [&](std::ostream& o) { write_cohort_csv(o, c.train); });
  write_text_file(dir / files::kEvalCohort, [&](std::ostream& o) { write_cohort_csv(o, c.eval); });
  write_text_file(dir / files::kClusters, [&](std::ostream& o) { write_cluster_model(o, c.clusters); });
  write_text_file(dir / files::kSilhouette, [&](std::ostream& o) {
    o << "q,mean_silhouette\n";
    for (const auto& [q, s] : c.silhouette) o << q << ',' << format_double(s) << '\n';
  });
}

inline std::vector<CohortRow> load_cohort(const fs::path& path) {
  auto in = open_input(path);
  return read_cohort_csv(in);
}

inline ClusterModel load_clusters(const fs::path& path) {
  auto in = open_input(path);
  return read_cluster_model(in);
}

// ---------------------------------------------------------------------------
// Experience

inline std::size_t group_of(const CohortRow& row) {
  if (row.cluster < 0) throw InputError("cohort row without a cluster assignment");
  return static_cast<std::size_t>(row.cluster);
}

/// Month-end Hb for each dose, continuing from `state`.
inline std::vector<double> simulate_series(const ErythropoiesisModel& model, SimState& state,
                                           const PatientParams& params,
                                           std::span<const double> doses) {
  std::vector<double> hb;
  hb.reserve(doses.size());
  for (double d : doses) hb.push_back(simulate_month(model, state, params, d));
  return hb;
}

/// Random-dose treatment of every training patient. Patient i draws its
/// doses from stream i of the treatment seed, so the result does not depend
/// on the thread count.
inline TransitionDataset generate_experience(const ExperimentConfig& cfg,
                                             std::span<const CohortRow> cohort) {
  const ActionSet actions = cfg.action_set();
  const ErythropoiesisModel model(cfg.model);
  std::vector<Episode> episodes(cohort.size());
  parallel_for(cohort.size(), cfg.resolved_threads(), [&](std::size_t i) {
    const auto& row = cohort[i];
    Rng rng = make_rng(cfg.treatment_seed, row.patient_id);
    std::vector<double> doses(cfg.train_months);
    for (auto& d : doses) d = actions.dose(uniform_index(rng, actions.size()));
    SimState state = model.initial_state(row.params, cfg.pre_history);
    const PriorHistory prior{{state.hb(row.params)}, {}};
    const auto hb = simulate_series(model, state, row.params, doses);

    Episode ep;
    ep.states = build_states(hb, doses, group_of(row), prior);
    for (std::size_t k = 0; k + 1 < hb.size(); ++k) {
      ep.actions.push_back(actions.index_of(doses[k + 1]));
      ep.rewards.push_back(reward(hb[k], hb[k + 1]));
    }
    episodes[i] = std::move(ep);
  });
  auto ds = episodes_to_transitions(episodes, cfg.hb_filter);
  ds.seed = cfg.treatment_seed;
  return ds;
}

// ---------------------------------------------------------------------------
// Policy artifacts

enum class PolicyKind { fqi, qlearning };

inline std::string to_string(PolicyKind k) { return k == PolicyKind::fqi ? "fqi" : "qlearning"; }

struct PolicyArtifact {
  PolicyKind kind = PolicyKind::fqi;
  ActionSet actions;
  ClusterModel clusters;
  std::variant<QModel, LinearQModel> model;

  const QFunction& q() const {
    return std::visit([](const auto& m) -> const QFunction& { return m; }, model);
  }
};

inline void write_policy_artifact(std::ostream& out, const PolicyArtifact& a) {
  out << "policy-artifact v1\n";
  out << "kind " << to_string(a.kind) << '\n';
  out << "actions";
  for (double d : a.actions.doses()) out << ' ' << format_double(d);
  out << '\n';
  write_cluster_model(out, a.clusters);
  if (a.kind == PolicyKind::fqi)
    write_qmodel(out, std::get<QModel>(a.model));
  else
    write_linear_qmodel(out, std::get<LinearQModel>(a.model));
}

inline PolicyArtifact read_policy_artifact(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "policy-artifact v1")
    throw InputError("policy artifact: bad header");
  PolicyArtifact a;
  if (!std::getline(in, line)) throw InputError("policy artifact: truncated");
  auto f = split(trim(line), ' ');
  if (f.size() != 2 || f[0] != "kind") throw InputError("policy artifact: expected kind");
  if (f[1] == "fqi")
    a.kind = PolicyKind::fqi;
  else if (f[1] == "qlearning")
    a.kind = PolicyKind::qlearning;
  else
    throw InputError("policy artifact: unknown kind");
  if (!std::getline(in, line)) throw InputError("policy artifact: truncated");
  f = split(trim(line), ' ');
  if (f.size() < 2 || f[0] != "actions") throw InputError("policy artifact: expected actions");
  std::vector<double> doses;
  for (std::size_t i = 1; i < f.size(); ++i) doses.push_back(parse_double(f[i]));
  a.actions = ActionSet(doses);
  a.clusters = read_cluster_model(in);
  if (a.kind == PolicyKind::fqi)
    a.model = read_qmodel(in);
  else
    a.model = read_linear_qmodel(in);
  if (a.q().n_actions() != a.actions.size())
    throw InputError("policy artifact: model and action set disagree");
  return a;
}

inline PolicyArtifact load_policy_artifact(const fs::path& path) {
  auto in = open_input(path);
  return read_policy_artifact(in);
}

// ---------------------------------------------------------------------------
// Learning stages

inline TransitionDataset load_transitions(const fs::path& path, const ActionSet& actions) {
  auto in = open_input(path);
  return read_transitions_csv(in, actions);
}

inline void write_curve(std::ostream& out, std::span<const CurvePoint> curve) {
  out << "iteration,distance\n";
  for (const auto& p : curve) out << p.iteration << ',' << format_double(p.distance) << '\n';
}

inline FqiConfig fqi_config_for(const ExperimentConfig& cfg) {
  FqiConfig f = cfg.fqi;
  f.seed = derive_seed(cfg.learning_seed, 1);
  f.trees.threads = cfg.resolved_threads();
  return f;
}

inline QlConfig ql_config_for(const ExperimentConfig& cfg) {
  QlConfig q = cfg.ql;
  q.seed = derive_seed(cfg.learning_seed, 2);
  return q;
}

// ---------------------------------------------------------------------------
// Policies for evaluation

struct PatientStart {
  std::size_t group = 0;
  std::vector<double> hb_before;  // Hb history before the latest reading, oldest first
  std::vector<double> doses;      // every dose given so far, oldest first
};

/// Per-patient decision state. next_dose receives the latest monthly Hb and
/// returns the dose for the coming month.
class PolicySession {
 public:
  virtual ~PolicySession() = default;
  virtual double next_dose(double hb_now) = 0;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  virtual std::unique_ptr<PolicySession> begin(const PatientStart& start) const = 0;
};

class GreedyQPolicy final : public Policy {
 public:
  GreedyQPolicy(std::string name, std::shared_ptr<const PolicyArtifact> artifact)
      : name_(std::move(name)), art_(std::move(artifact)) {}

  std::string name() const override { return name_; }

  std::unique_ptr<PolicySession> begin(const PatientStart& start) const override {
    return std::make_unique<Session>(*art_, start);
  }

 private:
  class Session final : public PolicySession {
   public:
    Session(const PolicyArtifact& a, PatientStart s) : a_(a), s_(std::move(s)) {}
    double next_dose(double hb_now) override {
      StateVec st;
      st.hb = hb_now;
      st.d_hb = s_.hb_before.empty() ? 0.0 : hb_now - s_.hb_before.back();
      const auto n = s_.doses.size();
      st.da_0 = n >= 1 ? s_.doses[n - 1] : 0.0;
      st.da_1 = n >= 2 ? s_.doses[n - 2] : 0.0;
      st.da_2 = n >= 3 ? s_.doses[n - 3] : 0.0;
      st.group = s_.group;
      const double dose = a_.actions.dose(greedy_action(a_.q(), st));
      s_.hb_before.push_back(hb_now);
      s_.doses.push_back(dose);
      return dose;
    }

   private:
    const PolicyArtifact& a_;
    PatientStart s_;
  };

  std::string name_;
  std::shared_ptr<const PolicyArtifact> art_;
};

/// The rule-based protocol. A patient arriving with earlier doses keeps the
/// last of them for the first month and compares later readings against the
/// Hb observed at entry; without earlier doses it starts from protocol_init.
class ProtocolPolicy final : public Policy {
 public:
  explicit ProtocolPolicy(ProtocolOptions opt = {}) : opt_(opt) { opt_.validate(); }
  std::string name() const override { return "protocol"; }

  std::unique_ptr<PolicySession> begin(const PatientStart& start) const override {
    return std::make_unique<Session>(opt_, start.doses.empty() ? std::nullopt
                                                               : std::optional(start.doses.back()));
  }

 private:
  class Session final : public PolicySession {
   public:
    Session(const ProtocolOptions& opt, std::optional<double> entry_dose)
        : opt_(opt), entry_dose_(entry_dose) {}
    double next_dose(double hb_now) override {
      if (!started_) {
        started_ = true;
        if (entry_dose_) {
          state_ = protocol_resume(*entry_dose_, hb_now);
          return state_.dose;
        }
        state_ = protocol_init(opt_);
      }
      auto d = protocol_step(state_, hb_now, opt_);
      state_ = d.state;
      return d.dose;
    }

   private:
    const ProtocolOptions& opt_;
    std::optional<double> entry_dose_;
    ProtocolState state_;
    bool started_ = false;
  };

  ProtocolOptions opt_;
};

/// Always the same dose; handy for tests and sanity runs.
class ConstantPolicy final : public Policy {
 public:
  explicit ConstantPolicy(double dose, std::string name = "constant")
      : dose_(dose), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::unique_ptr<PolicySession> begin(const PatientStart&) const override {
    struct S final : PolicySession {
      double d;
      explicit S(double x) : d(x) {}
      double next_dose(double) override { return d; }
    };
    return std::make_unique<S>(dose_);
  }

 private:
  double dose_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct TraceRow {
  std::size_t patient_id = 0;
  long month = 0;  // <= 0: warm-up, 1..eval_months: scored
  double hb = 0.0;
  double dose = 0.0;
};

struct PolicyTraces {
  std::string policy;
  std::vector<TraceRow> rows;  // grouped by patient, months ascending
};

struct Warmup {
  SimState state;  // after the warm-up months
  PatientStart start;
  std::vector<double> hb;
};

/// Random warm-up for evaluation patient `patient_id`; shared by every policy.
inline Warmup run_warmup(const ExperimentConfig& cfg, const ErythropoiesisModel& model,
                         const CohortRow& row, std::size_t group) {
  const ActionSet actions = cfg.action_set();
  Rng rng = make_rng(derive_seed(cfg.treatment_seed, 0xe7a1), row.patient_id);
  Warmup w;
  w.state = model.initial_state(row.params, cfg.pre_history);
  w.start.group = group;
  w.start.hb_before.push_back(w.state.hb(row.params));
  for (std::size_t m = 0; m < cfg.warmup_months; ++m)
    w.start.doses.push_back(actions.dose(uniform_index(rng, actions.size())));
  w.hb = simulate_series(model, w.state, row.params, w.start.doses);
  w.start.hb_before.insert(w.start.hb_before.end(), w.hb.begin(), w.hb.end() - 1);
  return w;
}

/// Paired evaluation: every patient's warm-up is simulated once and each
/// policy continues from a copy of the same state for eval_months.
/// `group_for` maps a cohort row to its response group.
inline std::vector<PolicyTraces> evaluate_policies(
    const ExperimentConfig& cfg, std::span<const CohortRow> cohort,
    std::span<const Policy* const> policies,
    const std::function<std::size_t(const CohortRow&)>& group_for = group_of) {
  if (cohort.empty()) throw ConfigError("evaluate: empty cohort");
  const ErythropoiesisModel model(cfg.model);
  const long w = static_cast<long>(cfg.warmup_months);
  const std::size_t per_patient = cfg.warmup_months + cfg.eval_months;

  std::vector<PolicyTraces> out(policies.size());
  for (std::size_t p = 0; p < policies.size(); ++p) {
    out[p].policy = policies[p]->name();
    out[p].rows.resize(cohort.size() * per_patient);
  }
  parallel_for(cohort.size(), cfg.resolved_threads(), [&](std::size_t i) {
    const auto& row = cohort[i];
    const auto warm = run_warmup(cfg, model, row, group_for(row));
    for (std::size_t p = 0; p < policies.size(); ++p) {
      auto* rows = out[p].rows.data() + i * per_patient;
      for (long m = 0; m < w; ++m)
        rows[m] = {row.patient_id, m - w + 1, warm.hb[static_cast<std::size_t>(m)],
                   warm.start.doses[static_cast<std::size_t>(m)]};
      SimState state = warm.state;
      auto session = policies[p]->begin(warm.start);
      double hb = warm.hb.back();
      for (std::size_t m = 0; m < cfg.eval_months; ++m) {
        const double dose = session->next_dose(hb);
        if (!(dose >= 0.0) || !std::isfinite(dose))
          throw DomainError(policies[p]->name() + " produced an invalid dose");
        hb = simulate_month(model, state, row.params, dose);
        rows[static_cast<std::size_t>(w) + m] = {row.patient_id, static_cast<long>(m + 1), hb, dose};
      }
    }
  });
  return out;
}

inline void write_traces_csv(std::ostream& out, std::span<const PolicyTraces> traces) {
  out << "patient_id,month,hb,dose,policy\n";
  for (const auto& t : traces)
    for (const auto& r : t.rows)
      out << r.patient_id << ',' << r.month << ',' << format_double(r.hb) << ','
          << format_double(r.dose) << ',' << t.policy << '\n';
}

inline std::vector<PolicyTraces> read_traces_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "patient_id,month,hb,dose,policy")
    throw InputError("traces csv: unexpected header");
  std::vector<PolicyTraces> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 5) throw InputError("traces csv: expected 5 columns");
    const std::string policy(f[4]);
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& t) { return t.policy == policy; });
    if (it == out.end()) {
      out.push_back({policy, {}});
      it = out.end() - 1;
    }
    it->rows.push_back({parse_int<std::size_t>(f[0]), parse_int<long>(f[1]), parse_double(f[2]),
                        parse_double(f[3])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kRangeLow = 11.0;
inline constexpr double kRangeHigh = 12.0;
inline constexpr double kAbruptChange = 2.0;

struct CategoryFractions {
  double below_10 = 0.0;
  double from_10_to_11 = 0.0;  // [10, 11)
  double in_range = 0.0;       // [11, 12]
  double from_12_to_13 = 0.0;  // (12, 13]
  double above_13 = 0.0;
};

inline std::size_t hb_category(double hb) {
  if (hb < 10.0) return 0;
  if (hb < kRangeLow) return 1;
  if (hb <= kRangeHigh) return 2;
  if (hb <= 13.0) return 3;
  return 4;
}

struct MetricsReport {
  std::string policy;
  std::size_t n_patients = 0;
  std::size_t n_observations = 0;
  std::size_t n_transitions = 0;
  double in_range_fraction = 0.0;
  CategoryFractions categories;
  double mean_dose = 0.0;
  double dose_sd = 0.0;
  double abrupt_change_fraction = 0.0;
  std::vector<double> per_month_hb_mean;
  std::vector<double> per_month_hb_sd;
  std::vector<std::size_t> patient_ids;
  std::vector<double> per_patient_in_range;
  std::vector<double> per_patient_mean_dose;
  std::vector<double> per_patient_hb_sd;
};

namespace detail {
// Population mean and SD.
inline std::pair<double, double> mean_sd(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}
}  // namespace detail

/// Metrics over scored months (month >= 1). Fractions pool every patient and
/// month; abrupt changes compare consecutive scored months of one patient.
/// Patients are processed in id order, so row order does not matter.
inline MetricsReport compute_metrics(const PolicyTraces& traces) {
  std::map<std::size_t, std::vector<TraceRow>> by_patient;
  for (const auto& r : traces.rows)
    if (r.month >= 1) by_patient[r.patient_id].push_back(r);
  if (by_patient.empty()) throw InputError("compute_metrics: no scored observations");

  MetricsReport m;
  m.policy = traces.policy;
  m.n_patients = by_patient.size();
  std::array<std::size_t, 5> cat{};
  std::size_t abrupt = 0;
  std::vector<double> doses;
  std::map<long, std::vector<double>> by_month;
  for (auto& [id, rows] : by_patient) {
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.month < b.month; });
    std::size_t in = 0;
    std::vector<double> pd, ph;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto& r = rows[k];
      ++cat[hb_category(r.hb)];
      in += hb_category(r.hb) == 2;
      doses.push_back(r.dose);
      pd.push_back(r.dose);
      ph.push_back(r.hb);
      by_month[r.month].push_back(r.hb);
      if (k > 0 && rows[k - 1].month + 1 == r.month) {
        ++m.n_transitions;
        abrupt += std::fabs(r.hb - rows[k - 1].hb) >= kAbruptChange;
      }
    }
    m.n_observations += rows.size();
    m.patient_ids.push_back(id);
    m.per_patient_in_range.push_back(static_cast<double>(in) / static_cast<double>(rows.size()));
    m.per_patient_mean_dose.push_back(detail::mean_sd(pd).first);
    m.per_patient_hb_sd.push_back(detail::mean_sd(ph).second);
  }
  const double n = static_cast<double>(m.n_observations);
  m.categories = {cat[0] / n, cat[1] / n, cat[2] / n, cat[3] / n, cat[4] / n};
  m.in_range_fraction = m.categories.in_range;
  std::tie(m.mean_dose, m.dose_sd) = detail::mean_sd(doses);
  m.abrupt_change_fraction =
      m.n_transitions ? static_cast<double>(abrupt) / static_cast<double>(m.n_transitions) : 0.0;
  for (const auto& [month, hbs] : by_month) {
    const auto [mean, sd] = detail::mean_sd(hbs);
    m.per_month_hb_mean.push_back(mean);
    m.per_month_hb_sd.push_back(sd);
  }
  return m;
}

inline nlohmann::ordered_json to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["n_patients"] = m.n_patients;
  j["n_observations"] = m.n_observations;
  j["n_transitions"] = m.n_transitions;
  j["in_range_fraction"] = m.in_range_fraction;
  j["category_fractions"] = {{"below_10", m.categories.below_10},
                             {"from_10_to_11", m.categories.from_10_to_11},
                             {"from_11_to_12", m.categories.in_range},
                             {"from_12_to_13", m.categories.from_12_to_13},
                             {"above_13", m.categories.above_13}};
  j["mean_dose"] = m.mean_dose;
  j["dose_sd"] = m.dose_sd;
  j["abrupt_change_fraction"] = m.abrupt_change_fraction;
  j["per_month_hb_mean"] = m.per_month_hb_mean;
  j["per_month_hb_sd"] = m.per_month_hb_sd;
  j["patient_ids"] = m.patient_ids;
  j["per_patient_in_range_fraction"] = m.per_patient_in_range;
  j["per_patient_mean_dose"] = m.per_patient_mean_dose;
  j["per_patient_hb_sd"] = m.per_patient_hb_sd;
  j["traces_file"] = files::kTraces;
  return j;
}

inline void write_metrics_json(std::ostream& out, std::span<const MetricsReport> reports) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& m : reports) j[m.policy] = to_json(m);
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Report data (box-plot quantiles and monthly mean/SD per policy)

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InputError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline void write_report_files(const fs::path& dir, std::span<const PolicyTraces> traces) {
  std::vector<MetricsReport> reports;
  for (const auto& t : traces) reports.push_back(compute_metrics(t));

  write_text_file(dir / files::kQuantiles, [&](std::ostream& o) {
    o << "policy,n,min,q1,median,q3,max,whisker_low,whisker_high,outliers\n";
    for (const auto& t : traces) {
      std::vector<double> hb;
      for (const auto& r : t.rows)
        if (r.month >= 1) hb.push_back(r.hb);
      std::sort(hb.begin(), hb.end());
      const double q1 = quantile_sorted(hb, 0.25), q3 = quantile_sorted(hb, 0.75);
      const double iqr = q3 - q1;
      const double lo_fence = q1 - 1.5 * iqr, hi_fence = q3 + 1.5 * iqr;
      double wl = hb.back(), wh = hb.front();
      std::size_t outliers = 0;
      for (double h : hb) {
        if (h < lo_fence || h > hi_fence) {
          ++outliers;
          continue;
        }
        wl = std::min(wl, h);
        wh = std::max(wh, h);
      }
      o << t.policy << ',' << hb.size() << ',' << format_double(hb.front()) << ','
        << format_double(q1) << ',' << format_double(quantile_sorted(hb, 0.5)) << ','
        << format_double(q3) << ',' << format_double(hb.back()) << ',' << format_double(wl) << ','
        << format_double(wh) << ',' << outliers << '\n';
    }
  });
  write_text_file(dir / files::kMonthly, [&](std::ostream& o) {
    o << "policy,month,hb_mean,hb_sd\n";
    for (const auto& m : reports)
      for (std::size_t k = 0; k < m.per_month_hb_mean.size(); ++k)
        o << m.policy << ',' << k + 1 << ',' << format_double(m.per_month_hb_mean[k]) << ','
          << format_double(m.per_month_hb_sd[k]) << '\n';
  });
  write_text_file(dir / files::kPatients, [&](std::ostream& o) {
    o << "patient_id,policy,in_range_fraction,mean_dose,hb_sd\n";
    for (const auto& m : reports)
      for (std::size_t k = 0; k < m.patient_ids.size(); ++k)
        o << m.patient_ids[k] << ',' << m.policy << ',' << format_double(m.per_patient_in_range[k])
          << ',' << format_double(m.per_patient_mean_dose[k]) << ','
          << format_double(m.per_patient_hb_sd[k]) << '\n';
  });
}

// ---------------------------------------------------------------------------
// Stage drivers used by the CLI and the end-to-end tests

inline void log_line(const Logger& log, const std::string& s) {
  if (log) log(s);
}

inline Cohorts stage_cohort(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  auto c = build_cohorts(cfg);
  save_cohorts(dir, c);
  write_text_file(dir / files::kConfig, [&](std::ostream& o) { write_config(o, cfg); });
  log_line(log, "cohort: " + std::to_string(c.train.size()) + " training, " +
                    std::to_string(c.eval.size()) + " evaluation patients, q = " +
                    std::to_string(c.clusters.q));
  return c;
}

inline TransitionDataset stage_simulate(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  const auto cohort = load_cohort(dir / files::kTrainCohort);
  auto ds = generate_experience(cfg, cohort);
  const auto actions = cfg.action_set();
  write_text_file(dir / files::kTransitions,
                  [&](std::ostream& o) { write_transitions_csv(o, ds, actions); });
  write_text_file(dir / files::kExperience, [&](std::ostream& o) {
    nlohmann::ordered_json j;
    j["episodes"] = ds.n_episodes;
    j["months_per_episode"] = cfg.train_months;
    j["transitions"] = ds.size();
    j["dropped_by_filter"] = ds.dropped_by_filter;
    j["hb_filter"] = cfg.hb_filter;
    j["treatment_seed"] = cfg.treatment_seed;
    o << j.dump(2) << '\n';
  });
  log_line(log, "simulate: " + std::to_string(ds.size()) + " transitions, " +
                    std::to_string(ds.dropped_by_filter) + " dropped by the Hb filter");
  return ds;
}

inline PolicyArtifact stage_train_fqi(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  const auto actions = cfg.action_set();
  const auto data = load_transitions(dir / files::kTransitions, actions);
  const auto fc = fqi_config_for(cfg);
  auto res = fqi_train(data, actions.size(), fc, [&](const CurvePoint& p) {
    log_line(log, "fqi: iteration " + std::to_string(p.iteration) + " distance " +
                      format_double(p.distance));
  });
  PolicyArtifact art{PolicyKind::fqi, actions, load_clusters(dir / files::kClusters),
                     std::move(res.model)};
  write_text_file(dir / files::kFqiPolicy, [&](std::ostream& o) { write_policy_artifact(o, art); });
  write_text_file(dir / files::kFqiCurve, [&](std::ostream& o) { write_curve(o, res.curve); });
  write_text_file(dir / files::kLmin, [&](std::ostream& o) {
    o << "iteration,action,l_min\n";
    for (std::size_t n = 0; n < res.lmin_history.size(); ++n)
      for (std::size_t a = 0; a < res.lmin_history[n].size(); ++a)
        o << n + 1 << ',' << a << ',' << res.lmin_history[n][a] << '\n';
  });
  return art;
}

inline PolicyArtifact stage_train_ql(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  const auto actions = cfg.action_set();
  const auto data = load_transitions(dir / files::kTransitions, actions);
  auto res = ql_train(data, actions.size(), ql_config_for(cfg));
  log_line(log, "train-ql: " + std::to_string(data.size()) + " updates, final probe distance " +
                    (res.curve.empty() ? std::string("n/a") : format_double(res.curve.back().distance)));
  PolicyArtifact art{PolicyKind::qlearning, actions, load_clusters(dir / files::kClusters),
                     std::move(res.model)};
  write_text_file(dir / files::kQlPolicy, [&](std::ostream& o) { write_policy_artifact(o, art); });
  write_text_file(dir / files::kQlCurve, [&](std::ostream& o) { write_curve(o, res.curve); });
  return art;
}

/// Evaluates the protocol plus every learned policy whose artifact exists
/// in the output directory. Artifacts must share the cohort's cluster model
/// and the configured action set.
inline std::vector<MetricsReport> stage_evaluate(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  const auto cohort = load_cohort(dir / files::kEvalCohort);
  const auto clusters = load_clusters(dir / files::kClusters);
  const auto actions = cfg.action_set();

  std::vector<std::unique_ptr<Policy>> owned;
  for (auto [name, file] : {std::pair{"fqi", files::kFqiPolicy}, std::pair{"qlearning", files::kQlPolicy}}) {
    if (!fs::exists(dir / file)) continue;
    auto art = std::make_shared<const PolicyArtifact>(load_policy_artifact(dir / file));
    if (!art->clusters.compatible_with(clusters))
      throw ConfigError(std::string(name) + " policy was trained with a different cluster model");
    if (!(art->actions == actions))
      throw ConfigError(std::string(name) + " policy uses a different action set");
    owned.push_back(std::make_unique<GreedyQPolicy>(name, art));
  }
  owned.push_back(std::make_unique<ProtocolPolicy>(cfg.protocol));
  std::vector<const Policy*> policies;
  for (const auto& p : owned) policies.push_back(p.get());

  const auto traces = evaluate_policies(cfg, cohort, policies,
                                        [&](const CohortRow& r) { return clusters.group_of(r.params); });
  std::vector<MetricsReport> reports;
  for (const auto& t : traces) {
    reports.push_back(compute_metrics(t));
    const auto& m = reports.back();
    log_line(log, "evaluate: " + m.policy + " in range " + format_double(m.in_range_fraction) +
                      ", mean dose " + format_double(m.mean_dose) + ", abrupt " +
                      format_double(m.abrupt_change_fraction));
  }
  write_text_file(dir / files::kTraces, [&](std::ostream& o) { write_traces_csv(o, traces); });
  write_text_file(dir / files::kMetrics, [&](std::ostream& o) { write_metrics_json(o, reports); });
  return reports;
}

inline void stage_report(const ExperimentConfig& cfg, const Logger& log = {}) {
  const fs::path dir = cfg.out_dir;
  auto in = open_input(dir / files::kTraces);
  const auto traces = read_traces_csv(in);
  write_report_files(dir, traces);
  log_line(log, "report: wrote " + std::string(files::kQuantiles) + ", " + files::kMonthly + ", " +
                    files::kPatients);
}

inline std::vector<MetricsReport> run_all_stages(const ExperimentConfig& cfg, const Logger& log = {}) {
  stage_cohort(cfg, log);
  stage_simulate(cfg, log);
  stage_train_fqi(cfg, log);
  stage_train_ql(cfg, log);
  auto reports = stage_evaluate(cfg, log);
  stage_report(cfg, log);
  return reports;
}

}  // namespace anemia

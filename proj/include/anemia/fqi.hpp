#pragma once

// Fitted Q Iteration with one Extra-Trees ensemble per discrete action.

#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"
#include "anemia/extra_trees.hpp"
#include "anemia/mdp.hpp"

namespace anemia {

/// Anything that scores (state, action) pairs.
class QFunction {
 public:
  virtual ~QFunction() = default;
  virtual std::size_t n_actions() const = 0;
  virtual double evaluate(const Features& s, std::size_t a) const = 0;
};

/// Action maximizing Q; exact ties go to the lower index (lower dose).
inline std::size_t greedy_action(const QFunction& q, const Features& s) {
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < q.n_actions(); ++a) {
    const double v = q.evaluate(s, a);
    if (v > best_v) {
      best_v = v;
      best = a;
    }
  }
  return best;
}

inline std::size_t greedy_action(const QFunction& q, const StateVec& s) {
  return greedy_action(q, s.features());
}

inline double max_q(const QFunction& q, const Features& s) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < q.n_actions(); ++a) best = std::max(best, q.evaluate(s, a));
  return best;
}

/// Q-model made of one regression ensemble per action. An action without an
/// ensemble (never seen in the data, or iteration 0) evaluates to 0.
class QModel final : public QFunction {
 public:
  QModel() = default;
  explicit QModel(std::size_t n_actions) : per_action_(n_actions) {}

  std::size_t n_actions() const override { return per_action_.size(); }
  double evaluate(const Features& s, std::size_t a) const override {
    const auto& e = per_action_.at(a);
    return e ? e->predict(s) : 0.0;
  }

  std::optional<Ensemble>& ensemble(std::size_t a) { return per_action_.at(a); }
  const std::optional<Ensemble>& ensemble(std::size_t a) const { return per_action_.at(a); }

  std::size_t iteration = 0;

 private:
  std::vector<std::optional<Ensemble>> per_action_;
};

struct FqiConfig {
  double gamma = 0.9;
  std::size_t max_iters = 40;
  std::optional<double> stop_eps;  // stop once the distance drops below this
  EnsembleConfig trees;            // l_min here is the fallback when CV is off
  std::vector<std::size_t> lmin_candidates{5, 10, 50, 100};
  std::size_t cv_folds = 5;
  std::size_t cv_every = 1;  // reselect l_min every n iterations; 0 disables CV
  bool bootstrap_terminal = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("FqiConfig: gamma must be in [0, 1)");
    if (max_iters < 1) throw ConfigError("FqiConfig: max_iters >= 1");
    if (stop_eps && !(*stop_eps > 0.0)) throw ConfigError("FqiConfig: stop_eps must be > 0");
    if (cv_every > 0 && (lmin_candidates.empty() || cv_folds < 2))
      throw ConfigError("FqiConfig: cross-validation needs candidates and >= 2 folds");
  }
};

/// Mean over the dataset's (s, a) pairs of (Q_n - Q_prev)^2.
inline double convergence_distance(const QFunction& q_n, const QFunction& q_prev,
                                   const TransitionDataset& data) {
  if (data.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& t : data.transitions) {
    const auto f = t.s.features();
    const double d = q_n.evaluate(f, t.a) - q_prev.evaluate(f, t.a);
    acc += d * d;
  }
  return acc / static_cast<double>(data.size());
}

struct CurvePoint {
  std::size_t iteration = 0;
  double distance = 0.0;
};

struct FqiResult {
  QModel model;
  std::vector<CurvePoint> curve;
  std::vector<std::vector<std::size_t>> lmin_history;  // per iteration, per action
};

/// Runs FQI from Q_0 = 0. `progress` (optional) is called after every
/// iteration.
inline FqiResult fqi_train(const TransitionDataset& data, std::size_t n_actions,
                           const FqiConfig& cfg,
                           const std::function<void(const CurvePoint&)>& progress = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("fqi_train: empty transition dataset");
  if (n_actions == 0) throw ConfigError("fqi_train: empty action set");

  // Inputs grouped by action; fixed across iterations.
  std::vector<Matrix> inputs(n_actions);
  std::vector<std::vector<std::size_t>> rows_of(n_actions);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& t = data.transitions[i];
    if (t.a >= n_actions) throw InputError("fqi_train: action index outside the action set");
    const auto f = t.s.features();
    inputs[t.a].push_row(f);
    rows_of[t.a].push_back(i);
  }
  std::vector<Features> next_states;
  next_states.reserve(data.size());
  for (const auto& t : data.transitions) next_states.push_back(t.s_next.features());

  FqiResult result;
  QModel prev(n_actions);
  std::vector<std::size_t> lmin(n_actions, cfg.trees.l_min);
  std::vector<double> targets(data.size());

  for (std::size_t n = 1; n <= cfg.max_iters; ++n) {
    parallel_for(data.size(), cfg.trees.threads, [&](std::size_t i) {
      const auto& t = data.transitions[i];
      const bool bootstrap = !t.terminal || cfg.bootstrap_terminal;
      targets[i] = t.r + (bootstrap ? cfg.gamma * max_q(prev, next_states[i]) : 0.0);
    });

    QModel next(n_actions);
    next.iteration = n;
    const bool reselect = cfg.cv_every > 0 && (n - 1) % cfg.cv_every == 0;
    for (std::size_t a = 0; a < n_actions; ++a) {
      if (rows_of[a].empty()) continue;
      std::vector<double> y;
      y.reserve(rows_of[a].size());
      for (auto i : rows_of[a]) y.push_back(targets[i]);

      EnsembleConfig ec = cfg.trees;
      ec.seed = derive_seed(cfg.seed, n * 1000 + a);
      if (reselect && inputs[a].rows >= cfg.cv_folds) {
        Rng cv_rng = make_rng(cfg.seed ^ 0x5eedcafeULL, n * 1000 + a);
        lmin[a] = cv_select_lmin(inputs[a], y, cfg.lmin_candidates, cfg.cv_folds, cv_rng, ec).l_min;
      }
      ec.l_min = lmin[a];
      next.ensemble(a) = fit_ensemble(inputs[a], y, ec);
    }
    result.lmin_history.push_back(lmin);

    const CurvePoint point{n, convergence_distance(next, prev, data)};
    result.curve.push_back(point);
    if (progress) progress(point);
    prev = std::move(next);
    if (cfg.stop_eps && point.distance < *cfg.stop_eps) break;
  }
  result.model = std::move(prev);
  return result;
}

inline void write_qmodel(std::ostream& out, const QModel& q) {
  out << "qmodel v1\n";
  out << "actions " << q.n_actions() << " iteration " << q.iteration << '\n';
  for (std::size_t a = 0; a < q.n_actions(); ++a) {
    if (q.ensemble(a)) {
      out << "action " << a << " fitted\n";
      write_ensemble(out, *q.ensemble(a));
    } else {
      out << "action " << a << " empty\n";
    }
  }
}

inline QModel read_qmodel(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "qmodel v1") throw InputError("qmodel: bad header");
  if (!std::getline(in, line)) throw InputError("qmodel: truncated");
  auto f = split(trim(line), ' ');
  if (f.size() != 4 || f[0] != "actions" || f[2] != "iteration")
    throw InputError("qmodel: bad actions line");
  QModel q(parse_int<std::size_t>(f[1]));
  q.iteration = parse_int<std::size_t>(f[3]);
  for (std::size_t a = 0; a < q.n_actions(); ++a) {
    if (!std::getline(in, line)) throw InputError("qmodel: truncated");
    auto g = split(trim(line), ' ');
    if (g.size() != 3 || g[0] != "action" || parse_int<std::size_t>(g[1]) != a)
      throw InputError("qmodel: bad action line");
    if (g[2] == "fitted")
      q.ensemble(a) = read_ensemble(in);
    else if (g[2] != "empty")
      throw InputError("qmodel: bad action state");
  }
  return q;
}

}  // namespace anemia

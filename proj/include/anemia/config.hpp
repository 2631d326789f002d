#pragma once

// Experiment configuration and its key = value file format.
//
//   # comment
//   cohort.train_patients = 1000
//   experiment.actions = 0, 0.25, 0.5, 0.75, 1
//
// Unknown keys and malformed values are configuration errors.

#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "anemia/cohort.hpp"
#include "anemia/common.hpp"
#include "anemia/fqi.hpp"
#include "anemia/mdp.hpp"
#include "anemia/protocol.hpp"
#include "anemia/qlearning.hpp"
#include "anemia/sim.hpp"

namespace anemia {

struct ExperimentConfig {
  std::uint64_t cohort_seed = 20160101;
  std::uint64_t treatment_seed = 20160202;
  std::uint64_t learning_seed = 20160303;

  std::size_t n_seed_patients = 69;
  std::size_t n_train_patients = 1000;
  std::size_t n_eval_patients = 60;
  std::size_t neighbours = 10;
  std::size_t train_months = 30;
  std::size_t eval_months = 30;
  std::size_t warmup_months = 4;
  double hb_filter = kMaxPlausibleHb;
  std::vector<double> actions{0.0, 0.25, 0.5, 0.75, 1.0};

  CohortSpec cohort;
  ClusteringOptions clustering;
  ModelConstants model = [] {
    ModelConstants c;
    c.concentration_scale = 8.75;
    return c;
  }();
  PreHistory pre_history = PreHistory::steady;

  FqiConfig fqi;
  QlConfig ql;
  ProtocolOptions protocol;

  unsigned threads = 0;  // 0: all hardware threads
  std::string out_dir = "out";

  unsigned resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
  }

  ActionSet action_set() const { return ActionSet(actions); }

  /// Replaces the three stage seeds with streams derived from one value.
  void set_master_seed(std::uint64_t seed) {
    cohort_seed = derive_seed(seed, 1);
    treatment_seed = derive_seed(seed, 2);
    learning_seed = derive_seed(seed, 3);
  }

  void validate() const {
    if (n_seed_patients < 1 || n_train_patients < 1 || n_eval_patients < 1)
      throw ConfigError("patient counts must be >= 1");
    if (train_months < 2 || eval_months < 1) throw ConfigError("train_months >= 2 and eval_months >= 1");
    if (warmup_months < 1) throw ConfigError("warmup_months must be >= 1");
    if (n_seed_patients < neighbours + 1)
      throw ConfigError("seed population must exceed the neighbour count");
    if (n_train_patients < clustering.q_max + 1)
      throw ConfigError("training cohort must be larger than the largest cluster count");
    if (!(hb_filter > 0.0)) throw ConfigError("hb_filter must be > 0");
    (void)action_set();
    model.validate();
    fqi.validate();
    ql.validate();
    protocol.validate();
  }
};

namespace detail {

inline bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + std::string(v) + "'");
}

template <class T>
std::vector<T> parse_list(std::string_view v) {
  std::vector<T> out;
  for (auto f : split(v, ',')) {
    if constexpr (std::is_floating_point_v<T>)
      out.push_back(parse_double(f));
    else
      out.push_back(parse_int<T>(f));
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>)
      s += format_double(xs[i]);
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

struct ConfigKey {
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
ConfigKey number_key(T ExperimentConfig::*field) {
  return {[field](ExperimentConfig& c, std::string_view v) {
            if constexpr (std::is_floating_point_v<T>)
              c.*field = parse_double(v);
            else
              c.*field = parse_int<T>(v);
          },
          [field](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*field);
            else
              return std::to_string(c.*field);
          }};
}

// Nested fields: `access` returns a reference to the field inside the config.
template <class Access>
ConfigKey nested_key(Access access) {
  using T = std::remove_reference_t<decltype(access(std::declval<ExperimentConfig&>()))>;
  return {[access](ExperimentConfig& c, std::string_view v) {
            auto& f = access(c);
            if constexpr (std::is_same_v<T, bool>)
              f = parse_bool(v);
            else if constexpr (std::is_floating_point_v<T>)
              f = parse_double(v);
            else
              f = parse_int<T>(v);
          },
          [access](const ExperimentConfig& c) {
            auto& f = access(const_cast<ExperimentConfig&>(c));
            if constexpr (std::is_same_v<T, bool>)
              return std::string(f ? "true" : "false");
            else if constexpr (std::is_floating_point_v<T>)
              return format_double(f);
            else
              return std::to_string(f);
          }};
}

inline const std::map<std::string, ConfigKey, std::less<>>& config_keys() {
  static const auto keys = [] {
    std::map<std::string, ConfigKey, std::less<>> k;
    using C = ExperimentConfig;
    k["seed.cohort"] = number_key(&C::cohort_seed);
    k["seed.treatment"] = number_key(&C::treatment_seed);
    k["seed.learning"] = number_key(&C::learning_seed);

    k["cohort.seed_patients"] = number_key(&C::n_seed_patients);
    k["cohort.train_patients"] = number_key(&C::n_train_patients);
    k["cohort.eval_patients"] = number_key(&C::n_eval_patients);
    k["cohort.neighbours"] = number_key(&C::neighbours);
    k["cohort.ep_mean"] = nested_key([](C& c) -> double& { return c.cohort.ep_mean; });
    k["cohort.ep_sd"] = nested_key([](C& c) -> double& { return c.cohort.ep_sd; });
    k["cohort.cp_mean"] = nested_key([](C& c) -> double& { return c.cohort.cp_mean; });
    k["cohort.cp_sd"] = nested_key([](C& c) -> double& { return c.cohort.cp_sd; });
    k["cohort.cr_mean"] = nested_key([](C& c) -> double& { return c.cohort.cr_mean; });
    k["cohort.cr_sd"] = nested_key([](C& c) -> double& { return c.cohort.cr_sd; });
    k["cohort.weight_mean"] = nested_key([](C& c) -> double& { return c.cohort.weight_mean; });
    k["cohort.weight_sd"] = nested_key([](C& c) -> double& { return c.cohort.weight_sd; });
    k["cohort.sex"] = {[](C& c, std::string_view v) {
                         if (v == "male")
                           c.cohort.sex = Sex::male;
                         else if (v == "female")
                           c.cohort.sex = Sex::female;
                         else
                           throw ConfigError("cohort.sex must be male or female");
                       },
                       [](const C& c) { return std::string(c.cohort.sex == Sex::male ? "male" : "female"); }};

    k["cluster.q_min"] = nested_key([](C& c) -> std::size_t& { return c.clustering.q_min; });
    k["cluster.q_max"] = nested_key([](C& c) -> std::size_t& { return c.clustering.q_max; });
    k["cluster.restarts"] = nested_key([](C& c) -> std::size_t& { return c.clustering.restarts; });
    k["cluster.max_iters"] = nested_key([](C& c) -> std::size_t& { return c.clustering.max_iters; });

    k["sim.t_p"] = nested_key([](C& c) -> int& { return c.model.t_p; });
    k["sim.t_m"] = nested_key([](C& c) -> int& { return c.model.t_m; });
    k["sim.t_r"] = nested_key([](C& c) -> int& { return c.model.t_r; });
    k["sim.v_d"] = nested_key([](C& c) -> double& { return c.model.v_d; });
    k["sim.senescence_spread"] = nested_key([](C& c) -> double& { return c.model.senescence_spread; });
    k["sim.spread_is_sd"] = nested_key([](C& c) -> bool& { return c.model.spread_is_sd; });
    k["sim.substeps"] = nested_key([](C& c) -> int& { return c.model.substeps; });
    k["sim.concentration_scale"] =
        nested_key([](C& c) -> double& { return c.model.concentration_scale; });
    k["sim.pre_history"] = {[](C& c, std::string_view v) {
                              if (v == "steady")
                                c.pre_history = PreHistory::steady;
                              else if (v == "quiescent")
                                c.pre_history = PreHistory::quiescent;
                              else
                                throw ConfigError("sim.pre_history must be steady or quiescent");
                            },
                            [](const C& c) {
                              return std::string(c.pre_history == PreHistory::steady ? "steady"
                                                                                     : "quiescent");
                            }};

    k["experiment.train_months"] = number_key(&C::train_months);
    k["experiment.eval_months"] = number_key(&C::eval_months);
    k["experiment.warmup_months"] = number_key(&C::warmup_months);
    k["experiment.hb_filter"] = number_key(&C::hb_filter);
    k["experiment.actions"] = {[](C& c, std::string_view v) { c.actions = parse_list<double>(v); },
                               [](const C& c) { return join(c.actions); }};

    k["fqi.gamma"] = nested_key([](C& c) -> double& { return c.fqi.gamma; });
    k["fqi.max_iters"] = nested_key([](C& c) -> std::size_t& { return c.fqi.max_iters; });
    k["fqi.stop_eps"] = {[](C& c, std::string_view v) {
                           if (v == "none")
                             c.fqi.stop_eps.reset();
                           else
                             c.fqi.stop_eps = parse_double(v);
                         },
                         [](const C& c) {
                           return c.fqi.stop_eps ? format_double(*c.fqi.stop_eps) : std::string("none");
                         }};
    k["fqi.trees"] = nested_key([](C& c) -> std::size_t& { return c.fqi.trees.m_trees; });
    k["fqi.k"] = nested_key([](C& c) -> std::size_t& { return c.fqi.trees.k_candidates; });
    k["fqi.l_min"] = nested_key([](C& c) -> std::size_t& { return c.fqi.trees.l_min; });
    k["fqi.lmin_candidates"] = {
        [](C& c, std::string_view v) { c.fqi.lmin_candidates = parse_list<std::size_t>(v); },
        [](const C& c) { return join(c.fqi.lmin_candidates); }};
    k["fqi.cv_folds"] = nested_key([](C& c) -> std::size_t& { return c.fqi.cv_folds; });
    k["fqi.cv_every"] = nested_key([](C& c) -> std::size_t& { return c.fqi.cv_every; });
    k["fqi.bootstrap_terminal"] = nested_key([](C& c) -> bool& { return c.fqi.bootstrap_terminal; });

    k["ql.alpha"] = nested_key([](C& c) -> double& { return c.ql.alpha; });
    k["ql.gamma"] = nested_key([](C& c) -> double& { return c.ql.gamma; });
    k["ql.grid_per_dim"] = nested_key([](C& c) -> std::size_t& { return c.ql.grid_per_dim; });
    k["ql.sigma"] = nested_key([](C& c) -> double& { return c.ql.sigma; });
    k["ql.normalize_features"] = nested_key([](C& c) -> bool& { return c.ql.normalize_features; });
    k["ql.probe_size"] = nested_key([](C& c) -> std::size_t& { return c.ql.probe_size; });
    k["ql.probe_interval"] = nested_key([](C& c) -> std::size_t& { return c.ql.probe_interval; });
    k["ql.shuffle"] = nested_key([](C& c) -> bool& { return c.ql.shuffle; });
    k["ql.bootstrap_terminal"] = nested_key([](C& c) -> bool& { return c.ql.bootstrap_terminal; });

    k["protocol.initial_dose"] = nested_key([](C& c) -> double& { return c.protocol.initial_dose; });
    k["protocol.dose_cap"] = {[](C& c, std::string_view v) {
                                if (v == "none")
                                  c.protocol.dose_cap.reset();
                                else
                                  c.protocol.dose_cap = parse_double(v);
                              },
                              [](const C& c) {
                                return c.protocol.dose_cap ? format_double(*c.protocol.dose_cap)
                                                           : std::string("none");
                              }};

    k["run.threads"] = number_key(&C::threads);
    k["run.out"] = {[](C& c, std::string_view v) { c.out_dir = std::string(v); },
                    [](const C& c) { return c.out_dir; }};
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

/// Applies every `key = value` line of `in` on top of `cfg`.
inline void read_config(std::istream& in, ExperimentConfig& cfg) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(body.substr(0, eq));
    const auto value = trim(body.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  ExperimentConfig cfg;
  read_config(in, cfg);
  return cfg;
}

/// Writes every key with its current value; read_config of the output
/// reproduces `cfg`. run.threads and run.out are left out because they do not
/// affect results.
inline void write_config(std::ostream& out, const ExperimentConfig& cfg) {
  for (const auto& [key, k] : detail::config_keys()) {
    if (key.starts_with("run.")) continue;
    out << key << " = " << k.get(cfg) << '\n';
  }
}

}  // namespace anemia

#pragma once

// Q-learning baseline: linear Q over Gaussian radial basis features on a
// regular grid in the normalized state cube, one weight vector per action,
// trained in a single pass over the transitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"
#include "anemia/fqi.hpp"
#include "anemia/mdp.hpp"

namespace anemia {

/// Per-dimension affine map of raw state values onto [-1, 1] (clamped).
struct StateBounds {
  Features lo{};
  Features hi{};

  static StateBounds unit() {
    StateBounds b;
    b.lo.fill(0.0);
    b.hi.fill(1.0);
    return b;
  }

  /// Min/max over both endpoints of every transition.
  static StateBounds from_data(const TransitionDataset& data) {
    if (data.empty()) return unit();
    StateBounds b;
    b.lo.fill(std::numeric_limits<double>::infinity());
    b.hi.fill(-std::numeric_limits<double>::infinity());
    auto take = [&b](const Features& f) {
      for (std::size_t d = 0; d < kStateDim; ++d) {
        b.lo[d] = std::min(b.lo[d], f[d]);
        b.hi[d] = std::max(b.hi[d], f[d]);
      }
    };
    for (const auto& t : data.transitions) {
      take(t.s.features());
      take(t.s_next.features());
    }
    return b;
  }

  Features normalize(const Features& x) const {
    Features z{};
    for (std::size_t d = 0; d < kStateDim; ++d) {
      const double span = hi[d] - lo[d];
      z[d] = span > 0.0 ? std::clamp(2.0 * (x[d] - lo[d]) / span - 1.0, -1.0, 1.0) : 0.0;
    }
    return z;
  }
  friend bool operator==(const StateBounds&, const StateBounds&) = default;
};

/// Gaussian RBF feature map. Centers are in normalized coordinates.
struct RbfNet {
  std::vector<Features> centers;
  double sigma = 1.1;
  StateBounds bounds = StateBounds::unit();
  std::size_t grid_per_dim = 0;  // 0: centers given explicitly
  // Divide each feature vector by its sum. Keeps ||phi|| <= 1, so a fixed
  // learning rate cannot overshoot however many centers overlap.
  bool normalized = false;

  std::size_t size() const noexcept { return centers.size(); }

  /// per_dim^6 centers: Cartesian product of per_dim evenly spaced values
  /// spanning [-1, 1] (first dimension varies slowest).
  static RbfNet grid(const StateBounds& bounds, std::size_t per_dim = 4, double sigma = 1.1) {
    if (per_dim < 2) throw ConfigError("RbfNet::grid: need at least 2 centers per dimension");
    if (!(sigma > 0.0)) throw ConfigError("RbfNet::grid: sigma must be > 0");
    RbfNet net;
    net.sigma = sigma;
    net.bounds = bounds;
    net.grid_per_dim = per_dim;
    std::size_t total = 1;
    for (std::size_t d = 0; d < kStateDim; ++d) total *= per_dim;
    net.centers.resize(total);
    for (std::size_t i = 0; i < total; ++i) {
      std::size_t rem = i;
      for (std::size_t d = kStateDim; d-- > 0;) {
        const std::size_t k = rem % per_dim;
        rem /= per_dim;
        net.centers[i][d] = -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(per_dim - 1);
      }
    }
    return net;
  }
};

/// exp(-||z - c||^2 / (2 sigma^2)) for every center, z the normalized state.
inline void featurize(const Features& s, const RbfNet& net, std::span<double> out) {
  const Features z = net.bounds.normalize(s);
  const double inv = 1.0 / (2.0 * net.sigma * net.sigma);
  for (std::size_t j = 0; j < net.size(); ++j) {
    double d2 = 0.0;
    for (std::size_t d = 0; d < kStateDim; ++d) {
      const double diff = z[d] - net.centers[j][d];
      d2 += diff * diff;
    }
    out[j] = std::exp(-d2 * inv);
  }
  if (net.normalized) {
    const double total = std::accumulate(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(net.size()), 0.0);
    if (total > 0.0)
      for (std::size_t j = 0; j < net.size(); ++j) out[j] /= total;
  }
}

inline std::vector<double> featurize(const StateVec& s, const RbfNet& net) {
  std::vector<double> phi(net.size());
  featurize(s.features(), net, phi);
  return phi;
}

struct QlConfig {
  double alpha = 0.2;
  double gamma = 0.9;
  std::size_t grid_per_dim = 4;
  double sigma = 1.1;
  bool normalize_features = false;
  std::size_t probe_size = 1000;      // transitions in the convergence probe set
  std::size_t probe_interval = 1000;  // updates between probe evaluations
  bool shuffle = false;
  bool bootstrap_terminal = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("QlConfig: alpha must be > 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("QlConfig: gamma must be in [0, 1)");
    if (probe_interval < 1) throw ConfigError("QlConfig: probe_interval >= 1");
  }
};

/// Linear Q-function: Q(s, a) = phi(s) . theta_a.
class LinearQModel final : public QFunction {
 public:
  LinearQModel() = default;
  LinearQModel(RbfNet net, std::size_t n_actions)
      : net_(std::move(net)), weights_(n_actions, std::vector<double>(net_.size(), 0.0)) {}

  std::size_t n_actions() const override { return weights_.size(); }
  double evaluate(const Features& s, std::size_t a) const override {
    std::vector<double> phi(net_.size());
    featurize(s, net_, phi);
    return value(phi, a);
  }

  double value(std::span<const double> phi, std::size_t a) const {
    const auto& w = weights_.at(a);
    return std::inner_product(phi.begin(), phi.end(), w.begin(), 0.0);
  }

  const RbfNet& net() const noexcept { return net_; }
  std::vector<std::vector<double>>& weights() noexcept { return weights_; }
  const std::vector<std::vector<double>>& weights() const noexcept { return weights_; }

 private:
  RbfNet net_;
  std::vector<std::vector<double>> weights_;
};

/// One temporal-difference step on the taken action's weights:
/// theta_a += alpha * (r + gamma * max_b phi(s')theta_b - phi(s)theta_a) * phi(s).
/// Returns the TD error.
inline double ql_update(LinearQModel& model, const Transition& t, const QlConfig& cfg,
                        std::span<const double> phi_s, std::span<const double> phi_next) {
  if (t.a >= model.n_actions()) throw InputError("ql_update: action outside the action set");
  double best_next = 0.0;
  if (!t.terminal || cfg.bootstrap_terminal) {
    best_next = -std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < model.n_actions(); ++b)
      best_next = std::max(best_next, model.value(phi_next, b));
  }
  const double td = t.r + cfg.gamma * best_next - model.value(phi_s, t.a);
  auto& w = model.weights()[t.a];
  const double step = cfg.alpha * td;
  for (std::size_t j = 0; j < w.size(); ++j) w[j] += step * phi_s[j];
  return td;
}

inline double ql_update(LinearQModel& model, const Transition& t, const QlConfig& cfg) {
  const auto phi_s = featurize(t.s, model.net());
  const auto phi_n = featurize(t.s_next, model.net());
  return ql_update(model, t, cfg, phi_s, phi_n);
}

struct QlResult {
  LinearQModel model;
  std::vector<CurvePoint> curve;  // iteration = number of updates applied
};

/// Single pass over the dataset (generation order unless cfg.shuffle). Every
/// probe_interval updates, records the mean squared change of Q over a fixed
/// probe subset of (s, a) pairs since the previous probe.
inline QlResult ql_train(const TransitionDataset& data, std::size_t n_actions, const QlConfig& cfg) {
  cfg.validate();
  if (n_actions == 0) throw ConfigError("ql_train: empty action set");
  const auto bounds = StateBounds::from_data(data);
  auto net = RbfNet::grid(bounds, cfg.grid_per_dim, cfg.sigma);
  net.normalized = cfg.normalize_features;
  QlResult result{LinearQModel(std::move(net), n_actions), {}};
  auto& model = result.model;
  const std::size_t m = model.net().size();

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.shuffle) {
    Rng rng = make_rng(cfg.seed, 0x9e11);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }

  // Evenly strided probe subset, features cached.
  const std::size_t probes = std::min(cfg.probe_size, data.size());
  std::vector<std::vector<double>> probe_phi;
  std::vector<std::size_t> probe_action;
  for (std::size_t k = 0; k < probes; ++k) {
    const auto& t = data.transitions[k * data.size() / probes];
    probe_phi.push_back(featurize(t.s, model.net()));
    probe_action.push_back(t.a);
  }
  auto probe_values = [&] {
    std::vector<double> v(probes);
    for (std::size_t k = 0; k < probes; ++k) v[k] = model.value(probe_phi[k], probe_action[k]);
    return v;
  };
  auto last = probe_values();

  std::vector<double> phi_s(m), phi_n(m);
  for (std::size_t j = 0; j < order.size(); ++j) {
    const auto& t = data.transitions[order[j]];
    if (t.a >= n_actions) throw InputError("ql_train: action outside the action set");
    featurize(t.s.features(), model.net(), phi_s);
    featurize(t.s_next.features(), model.net(), phi_n);
    ql_update(model, t, cfg, phi_s, phi_n);
    if ((j + 1) % cfg.probe_interval == 0 || j + 1 == order.size()) {
      auto now = probe_values();
      double acc = 0.0;
      for (std::size_t k = 0; k < probes; ++k) acc += (now[k] - last[k]) * (now[k] - last[k]);
      result.curve.push_back({j + 1, probes ? acc / static_cast<double>(probes) : 0.0});
      last = std::move(now);
    }
  }
  return result;
}

inline void write_linear_qmodel(std::ostream& out, const LinearQModel& q) {
  const auto& net = q.net();
  out << "rbf-qmodel v1\n";
  out << "sigma " << format_double(net.sigma) << '\n';
  out << "lo";
  for (double v : net.bounds.lo) out << ' ' << format_double(v);
  out << "\nhi";
  for (double v : net.bounds.hi) out << ' ' << format_double(v);
  out << '\n';
  if (net.normalized) out << "normalized\n";
  if (net.grid_per_dim > 0) {
    out << "grid " << net.grid_per_dim << '\n';
  } else {
    out << "centers " << net.size() << '\n';
    for (const auto& c : net.centers) {
      for (std::size_t d = 0; d < kStateDim; ++d) out << (d ? " " : "") << format_double(c[d]);
      out << '\n';
    }
  }
  out << "actions " << q.n_actions() << '\n';
  for (const auto& w : q.weights()) {
    for (std::size_t j = 0; j < w.size(); ++j) out << (j ? " " : "") << format_double(w[j]);
    out << '\n';
  }
}

inline LinearQModel read_linear_qmodel(std::istream& in) {
  std::string line;
  auto next = [&]() {
    if (!std::getline(in, line)) throw InputError("rbf-qmodel: truncated");
    return split(trim(line), ' ');
  };
  if (!std::getline(in, line) || trim(line) != "rbf-qmodel v1")
    throw InputError("rbf-qmodel: bad header");
  auto f = next();
  if (f.size() != 2 || f[0] != "sigma") throw InputError("rbf-qmodel: expected sigma");
  const double sigma = parse_double(f[1]);
  StateBounds b;
  f = next();
  if (f.size() != kStateDim + 1 || f[0] != "lo") throw InputError("rbf-qmodel: expected lo");
  for (std::size_t d = 0; d < kStateDim; ++d) b.lo[d] = parse_double(f[d + 1]);
  f = next();
  if (f.size() != kStateDim + 1 || f[0] != "hi") throw InputError("rbf-qmodel: expected hi");
  for (std::size_t d = 0; d < kStateDim; ++d) b.hi[d] = parse_double(f[d + 1]);
  RbfNet net;
  f = next();
  const bool normalized = f.size() == 1 && f[0] == "normalized";
  if (normalized) f = next();
  if (f.size() == 2 && f[0] == "grid") {
    net = RbfNet::grid(b, parse_int<std::size_t>(f[1]), sigma);
  } else if (f.size() == 2 && f[0] == "centers") {
    net.sigma = sigma;
    net.bounds = b;
    const auto n = parse_int<std::size_t>(f[1]);
    for (std::size_t j = 0; j < n; ++j) {
      auto c = next();
      if (c.size() != kStateDim) throw InputError("rbf-qmodel: bad center");
      Features x{};
      for (std::size_t d = 0; d < kStateDim; ++d) x[d] = parse_double(c[d]);
      net.centers.push_back(x);
    }
  } else {
    throw InputError("rbf-qmodel: expected grid or centers");
  }
  net.normalized = normalized;
  f = next();
  if (f.size() != 2 || f[0] != "actions") throw InputError("rbf-qmodel: expected actions");
  LinearQModel q(std::move(net), parse_int<std::size_t>(f[1]));
  for (auto& w : q.weights()) {
    auto v = next();
    if (v.size() != w.size()) throw InputError("rbf-qmodel: weight count mismatch");
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = parse_double(v[j]);
  }
  return q;
}

}  // namespace anemia

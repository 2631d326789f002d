#pragma once

// Synthetic patient populations: sampling from summary statistics,
// nearest-neighbour interpolation, and grouping by response type with
// k-means plus silhouette-based choice of the cluster count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"
#include "anemia/sim.hpp"

namespace anemia {

struct CohortSpec {
  std::size_t n_patients = 5000;
  std::uint64_t seed = 1;
  double ep_mean = 0.3588, ep_sd = 0.0753;
  double cr_mean = 0.1372, cr_sd = 0.0520;
  double cp_mean = 0.2014, cp_sd = 0.0640;
  double weight_mean = 67.97, weight_sd = 12.61;
  Sex sex = Sex::male;
};

using Point3 = std::array<double, 3>;

inline Point3 response_features(const PatientParams& p) { return {p.ep, p.cp, p.cr}; }

inline double squared_distance(const Point3& a, const Point3& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

namespace detail {
// Normal draw truncated below at 10% of the mean (resampled on violation).
inline double truncated_normal(Rng& rng, double mean, double sd) {
  if (sd == 0.0) return mean;
  const double floor = 0.1 * mean;
  for (;;) {
    const double x = mean + sd * standard_normal(rng);
    if (x >= floor) return x;
  }
}
}  // namespace detail

inline std::vector<PatientParams> sample_seed_population(const CohortSpec& spec, std::size_t size,
                                                         Rng& rng) {
  if (size < 1) throw ConfigError("sample_seed_population: size must be >= 1");
  if (spec.ep_sd < 0 || spec.cp_sd < 0 || spec.cr_sd < 0 || spec.weight_sd < 0)
    throw ConfigError("sample_seed_population: standard deviations must be >= 0");
  if (!(spec.ep_mean >= 0) || !(spec.cp_mean > 0) || !(spec.cr_mean > 0) || !(spec.weight_mean > 0))
    throw ConfigError("sample_seed_population: means must be positive");
  std::vector<PatientParams> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    PatientParams p;
    p.ep = detail::truncated_normal(rng, spec.ep_mean, spec.ep_sd);
    p.cp = detail::truncated_normal(rng, spec.cp_mean, spec.cp_sd);
    p.cr = detail::truncated_normal(rng, spec.cr_mean, spec.cr_sd);
    p.weight_kg = detail::truncated_normal(rng, spec.weight_mean, spec.weight_sd);
    p.mch = mch_for(spec.sex);
    out.push_back(p);
  }
  return out;
}

/// Indices of the k nearest neighbours of every point (self excluded, ties
/// broken by index).
inline std::vector<std::vector<std::size_t>> nearest_neighbours(std::span<const Point3> pts,
                                                                std::size_t k) {
  std::vector<std::vector<std::size_t>> out(pts.size());
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    d.clear();
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d.emplace_back(squared_distance(pts[i], pts[j]), j);
    const std::size_t kk = std::min(k, d.size());
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
    out[i].reserve(kk);
    for (std::size_t t = 0; t < kk; ++t) out[i].push_back(d[t].second);
  }
  return out;
}

/// `count` new patients, each a random convex combination of a random base
/// patient and one of its k nearest neighbours in (Ep, Cp, Cr).
inline std::vector<PatientParams> interpolate_patients(std::span<const PatientParams> base,
                                                       std::size_t count, std::size_t k, Rng& rng) {
  if (k < 1) throw ConfigError("interpolate_patients: k must be >= 1");
  if (base.size() < k + 1)
    throw ConfigError("interpolate_patients: base population needs at least k+1 patients");
  std::vector<Point3> pts;
  pts.reserve(base.size());
  for (const auto& p : base) pts.push_back(response_features(p));
  const auto nn = nearest_neighbours(pts, k);

  std::vector<PatientParams> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t i = uniform_index(rng, base.size());
    const std::size_t j = nn[i][uniform_index(rng, nn[i].size())];
    const double lambda = uniform01(rng);
    const auto& a = base[i];
    const auto& b = base[j];
    auto mix = [lambda](double x, double y) { return lambda * x + (1.0 - lambda) * y; };
    PatientParams p;
    p.ep = mix(a.ep, b.ep);
    p.cp = mix(a.cp, b.cp);
    p.cr = mix(a.cr, b.cr);
    p.weight_kg = mix(a.weight_kg, b.weight_kg);
    p.mch = a.mch;
    out.push_back(p);
  }
  return out;
}

inline std::vector<PatientParams> augment_by_interpolation(std::span<const PatientParams> base,
                                                           std::size_t target_n, Rng& rng,
                                                           std::size_t k = 10) {
  if (target_n < base.size())
    throw ConfigError("augment_by_interpolation: target smaller than base population");
  std::vector<PatientParams> out(base.begin(), base.end());
  if (target_n == base.size()) return out;
  auto extra = interpolate_patients(base, target_n - base.size(), k, rng);
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

// ---------------------------------------------------------------------------
// k-means

/// Per-feature z-score transform fitted on a point set.
struct Standardizer {
  Point3 mean{0, 0, 0};
  Point3 scale{1, 1, 1};

  static Standardizer fit(std::span<const Point3> pts) {
    Standardizer s;
    if (pts.empty()) return s;
    for (std::size_t f = 0; f < 3; ++f) {
      double m = 0.0;
      for (const auto& p : pts) m += p[f];
      m /= static_cast<double>(pts.size());
      double v = 0.0;
      for (const auto& p : pts) v += (p[f] - m) * (p[f] - m);
      v /= static_cast<double>(pts.size());
      s.mean[f] = m;
      s.scale[f] = v > 0.0 ? std::sqrt(v) : 1.0;
    }
    return s;
  }

  Point3 apply(const Point3& p) const {
    return {(p[0] - mean[0]) / scale[0], (p[1] - mean[1]) / scale[1], (p[2] - mean[2]) / scale[2]};
  }
  Point3 invert(const Point3& z) const {
    return {z[0] * scale[0] + mean[0], z[1] * scale[1] + mean[1], z[2] * scale[2] + mean[2]};
  }
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Fitted clustering. Centroids live in the standardized feature space of
/// `scaler`; an identity scaler means raw coordinates.
struct ClusterModel {
  std::size_t q = 0;
  std::vector<Point3> centroids;
  std::vector<std::size_t> assign;
  Standardizer scaler;
  double inertia = 0.0;

  std::size_t nearest(const Point3& raw) const {
    const Point3 z = scaler.apply(raw);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_distance(z, centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }

  std::size_t group_of(const PatientParams& p) const { return nearest(response_features(p)); }

  std::vector<Point3> centroids_raw() const {
    std::vector<Point3> out;
    for (const auto& c : centroids) out.push_back(scaler.invert(c));
    return out;
  }

  /// Same partition of feature space (q, centroids and scaling all equal).
  bool compatible_with(const ClusterModel& other) const {
    return q == other.q && centroids == other.centroids && scaler == other.scaler;
  }
};

struct KMeansResult {
  ClusterModel model;
  std::vector<double> inertia_history;  // after every assignment step
  std::size_t iterations = 0;
};

namespace detail {

// Distinct points (first-occurrence order) with multiplicities; k-means runs
// on this weighted set so duplicating the data changes nothing.
struct WeightedPoints {
  std::vector<Point3> pts;
  std::vector<double> weight;
  std::vector<std::size_t> index_of;  // original point -> distinct index
};

inline WeightedPoints deduplicate(std::span<const Point3> points) {
  WeightedPoints w;
  std::map<Point3, std::size_t> seen;
  w.index_of.reserve(points.size());
  for (const auto& p : points) {
    auto [it, inserted] = seen.try_emplace(p, w.pts.size());
    if (inserted) {
      w.pts.push_back(p);
      w.weight.push_back(0.0);
    }
    w.weight[it->second] += 1.0;
    w.index_of.push_back(it->second);
  }
  return w;
}

inline std::size_t nearest_centroid(const Point3& p, std::span<const Point3> centroids,
                                    double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

}  // namespace detail

/// Lloyd's algorithm from q distinct randomly chosen data points. An empty
/// cluster is re-seeded at the point farthest from its current centroid
/// (lowest index on ties).
inline KMeansResult kmeans_fit(std::span<const Point3> points, std::size_t q, Rng& rng,
                               std::size_t max_iters = 300) {
  if (q < 2) throw ConfigError("kmeans_fit: q must be >= 2");
  const auto w = detail::deduplicate(points);
  if (w.pts.size() < q) throw ConfigError("kmeans_fit: fewer distinct points than clusters");

  // Partial Fisher-Yates over distinct points.
  std::vector<std::size_t> order(w.pts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Point3> centroids(q);
  for (std::size_t c = 0; c < q; ++c) {
    const std::size_t j = c + uniform_index(rng, order.size() - c);
    std::swap(order[c], order[j]);
    centroids[c] = w.pts[order[c]];
  }

  const std::size_t n = w.pts.size();
  std::vector<std::size_t> label(n, q);
  std::vector<double> dist(n, 0.0);
  KMeansResult result;

  auto assign_all = [&] {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = detail::nearest_centroid(w.pts[i], centroids, &dist[i]);
      if (c != label[i]) changed = true;
      label[i] = c;
      inertia += w.weight[i] * dist[i];
    }
    result.inertia_history.push_back(inertia);
    return changed;
  };

  bool changed = assign_all();
  std::size_t iter = 0;
  while (changed && iter < max_iters) {
    ++iter;
    std::vector<Point3> sum(q, Point3{0, 0, 0});
    std::vector<double> mass(q, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < 3; ++f) sum[label[i]][f] += w.weight[i] * w.pts[i][f];
      mass[label[i]] += w.weight[i];
    }
    for (std::size_t c = 0; c < q; ++c) {
      if (mass[c] > 0.0) {
        for (std::size_t f = 0; f < 3; ++f) centroids[c][f] = sum[c][f] / mass[c];
        continue;
      }
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      centroids[c] = w.pts[far];
      dist[far] = 0.0;
    }
    changed = assign_all();
  }

  result.iterations = iter;
  auto& m = result.model;
  m.q = q;
  m.centroids = centroids;
  m.inertia = result.inertia_history.back();
  m.assign.reserve(points.size());
  for (std::size_t idx : w.index_of) m.assign.push_back(label[idx]);
  return result;
}

/// Mean silhouette coefficient (Rousseeuw); singleton clusters score 0.
inline double mean_silhouette(std::span<const Point3> points, std::span<const std::size_t> labels,
                              std::size_t q) {
  const std::size_t n = points.size();
  if (n == 0) return 0.0;
  std::vector<std::size_t> size(q, 0);
  for (auto l : labels) ++size[l];
  std::vector<double> acc(q);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) acc[labels[j]] += std::sqrt(squared_distance(points[i], points[j]));
    const std::size_t own = labels[i];
    if (size[own] <= 1) continue;
    const double a = acc[own] / static_cast<double>(size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < q; ++c)
      if (c != own && size[c] > 0) b = std::min(b, acc[c] / static_cast<double>(size[c]));
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

struct SilhouetteSelection {
  std::size_t q = 0;
  ClusterModel model;
  std::vector<std::pair<std::size_t, double>> scores;  // (q, mean silhouette)
};

/// Best-of-`restarts` k-means for each q in [q_min, q_max]; picks the q with
/// the highest mean silhouette, ties toward smaller q.
inline SilhouetteSelection select_q_by_silhouette(std::span<const Point3> points, Rng& rng,
                                                  std::size_t q_min = 3, std::size_t q_max = 10,
                                                  std::size_t restarts = 10,
                                                  std::size_t max_iters = 300) {
  if (q_min < 2 || q_max < q_min) throw ConfigError("select_q_by_silhouette: bad q range");
  if (points.size() < q_max + 1)
    throw ConfigError("select_q_by_silhouette: need more points than the largest q");
  if (restarts < 1) throw ConfigError("select_q_by_silhouette: restarts >= 1");
  SilhouetteSelection sel;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t q = q_min; q <= q_max; ++q) {
    ClusterModel best;
    double best_inertia = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < restarts; ++r) {
      auto fit = kmeans_fit(points, q, rng, max_iters);
      if (fit.model.inertia < best_inertia) {
        best_inertia = fit.model.inertia;
        best = std::move(fit.model);
      }
    }
    const double score = mean_silhouette(points, best.assign, q);
    sel.scores.emplace_back(q, score);
    if (score > best_score) {
      best_score = score;
      sel.q = q;
      sel.model = std::move(best);
    }
  }
  return sel;
}

struct ClusteringOptions {
  std::size_t q_min = 3;
  std::size_t q_max = 10;
  std::size_t restarts = 10;
  std::size_t max_iters = 300;
};

/// Standardizes (Ep, Cp, Cr), then selects q by silhouette. The returned
/// model carries the scaler so unseen patients can be grouped.
inline SilhouetteSelection cluster_patients(std::span<const PatientParams> patients, Rng& rng,
                                            const ClusteringOptions& opt = {}) {
  std::vector<Point3> raw;
  raw.reserve(patients.size());
  for (const auto& p : patients) raw.push_back(response_features(p));
  const auto scaler = Standardizer::fit(raw);
  std::vector<Point3> z;
  z.reserve(raw.size());
  for (const auto& p : raw) z.push_back(scaler.apply(p));
  auto sel = select_q_by_silhouette(z, rng, opt.q_min, opt.q_max, opt.restarts, opt.max_iters);
  sel.model.scaler = scaler;
  return sel;
}

// ---------------------------------------------------------------------------
// Cohort CSV: patient_id,ep,cp,cr,mch,weight_kg,cluster

struct CohortRow {
  std::size_t patient_id = 0;
  PatientParams params;
  long cluster = -1;
};

inline void write_cohort_csv(std::ostream& out, std::span<const CohortRow> rows) {
  out << "patient_id,ep,cp,cr,mch,weight_kg,cluster\n";
  for (const auto& r : rows)
    out << r.patient_id << ',' << format_double(r.params.ep) << ',' << format_double(r.params.cp)
        << ',' << format_double(r.params.cr) << ',' << format_double(r.params.mch) << ','
        << format_double(r.params.weight_kg) << ',' << r.cluster << '\n';
}

inline std::vector<CohortRow> read_cohort_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "patient_id,ep,cp,cr,mch,weight_kg,cluster")
    throw InputError("cohort csv: unexpected header");
  std::vector<CohortRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 7) throw InputError("cohort csv: expected 7 columns");
    CohortRow r;
    r.patient_id = parse_int<std::size_t>(f[0]);
    r.params.ep = parse_double(f[1]);
    r.params.cp = parse_double(f[2]);
    r.params.cr = parse_double(f[3]);
    r.params.mch = parse_double(f[4]);
    r.params.weight_kg = parse_double(f[5]);
    r.cluster = parse_int<long>(f[6]);
    r.params.validate();
    rows.push_back(r);
  }
  return rows;
}

/// Plain-text cluster model: scaler, then one centroid per line.
inline void write_cluster_model(std::ostream& out, const ClusterModel& m) {
  out << "cluster-model v1\n";
  out << "q " << m.q << '\n';
  out << "mean";
  for (double v : m.scaler.mean) out << ' ' << format_double(v);
  out << "\nscale";
  for (double v : m.scaler.scale) out << ' ' << format_double(v);
  out << '\n';
  for (const auto& c : m.centroids)
    out << "centroid " << format_double(c[0]) << ' ' << format_double(c[1]) << ' '
        << format_double(c[2]) << '\n';
}

inline ClusterModel read_cluster_model(std::istream& in) {
  auto next_fields = [&in](std::string_view key, std::size_t count) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("cluster model: truncated");
    auto f = split(trim(line), ' ');
    if (f.empty() || f[0] != key || f.size() != count + 1)
      throw InputError("cluster model: expected '" + std::string(key) + "'");
    return std::vector<std::string>(f.begin() + 1, f.end());
  };
  std::string header;
  if (!std::getline(in, header) || trim(header) != "cluster-model v1")
    throw InputError("cluster model: bad header");
  ClusterModel m;
  m.q = parse_int<std::size_t>(next_fields("q", 1)[0]);
  auto mean = next_fields("mean", 3);
  auto scale = next_fields("scale", 3);
  for (std::size_t f = 0; f < 3; ++f) {
    m.scaler.mean[f] = parse_double(mean[f]);
    m.scaler.scale[f] = parse_double(scale[f]);
  }
  for (std::size_t c = 0; c < m.q; ++c) {
    auto v = next_fields("centroid", 3);
    m.centroids.push_back({parse_double(v[0]), parse_double(v[1]), parse_double(v[2])});
  }
  return m;
}

}  // namespace anemia

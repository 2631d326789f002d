#pragma once

// Extremely randomized regression trees. Every tree sees the full training
// set; each split picks the best of K random (feature, random cut) pairs by
// relative variance reduction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "anemia/common.hpp"

namespace anemia {

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }

  void push_row(std::span<const double> r) {
    if (rows == 0 && cols == 0) cols = r.size();
    if (r.size() != cols) throw InputError("Matrix: row width mismatch");
    data.insert(data.end(), r.begin(), r.end());
    ++rows;
  }
};

struct EnsembleConfig {
  std::size_t m_trees = 50;
  std::size_t k_candidates = 6;
  std::size_t l_min = 5;
  std::uint64_t seed = 0;
  unsigned threads = 1;  // not part of the model; only affects wall time

  void validate(std::size_t dim) const {
    if (m_trees < 1) throw ConfigError("EnsembleConfig: m_trees >= 1");
    if (k_candidates < 1 || k_candidates > dim)
      throw ConfigError("EnsembleConfig: k_candidates must be in [1, input dimension]");
    if (l_min < 1) throw ConfigError("EnsembleConfig: l_min >= 1");
  }
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double cut = 0.0;  // x[feature] < cut goes left
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // leaf: mean target
  std::uint32_t count = 0;
  double score = 0.0;  // split: relative variance reduction

  bool is_leaf() const noexcept { return feature < 0; }
};

class RegressionTree {
 public:
  std::vector<TreeNode> nodes;

  const TreeNode& leaf_for(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf())
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] < nodes[i].cut
                                       ? nodes[i].left
                                       : nodes[i].right);
    return nodes[i];
  }
  double predict(std::span<const double> x) const { return leaf_for(x).value; }
  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
  }
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, std::span<const double> y, const EnsembleConfig& cfg, Rng rng)
      : x_(x), y_(y), cfg_(cfg), rng_(std::move(rng)) {}

  RegressionTree build() {
    RegressionTree tree;
    idx_.resize(x_.rows);
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    struct Task {
      std::size_t node, begin, end;
    };
    std::vector<Task> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, 0, x_.rows});
    features_.resize(x_.cols);

    while (!stack.empty()) {
      const Task t = stack.back();
      stack.pop_back();
      const std::size_t n = t.end - t.begin;
      double ymin = std::numeric_limits<double>::infinity();
      double ymax = -ymin;
      double sum = 0.0;
      for (std::size_t i = t.begin; i < t.end; ++i) {
        const double v = y_[idx_[i]];
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
        sum += v;
      }
      const double mean = sum / static_cast<double>(n);
      auto make_leaf = [&] {
        auto& node = tree.nodes[t.node];
        node.feature = -1;
        // Constant targets keep their exact value; otherwise clamp rounding.
        node.value = ymin == ymax ? ymin : std::clamp(mean, ymin, ymax);
        node.count = static_cast<std::uint32_t>(n);
      };
      if (n < cfg_.l_min || ymin == ymax) {
        make_leaf();
        continue;
      }

      const auto best = choose_split(t.begin, t.end, mean);
      if (best.feature < 0) {
        make_leaf();
        continue;
      }

      auto mid_it = std::partition(idx_.begin() + static_cast<std::ptrdiff_t>(t.begin),
                                   idx_.begin() + static_cast<std::ptrdiff_t>(t.end),
                                   [&](std::size_t r) {
                                     return x_(r, static_cast<std::size_t>(best.feature)) < best.cut;
                                   });
      const std::size_t mid = static_cast<std::size_t>(mid_it - idx_.begin());
      const auto left = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& node = tree.nodes[t.node];
      node.feature = best.feature;
      node.cut = best.cut;
      node.left = left;
      node.right = left + 1;
      node.count = static_cast<std::uint32_t>(n);
      node.score = best.score;
      // Right child first so the left subtree is expanded next (depth-first).
      stack.push_back({static_cast<std::size_t>(left + 1), mid, t.end});
      stack.push_back({static_cast<std::size_t>(left), t.begin, mid});
    }
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double cut = 0.0;
    double score = -1.0;
  };

  std::pair<double, double> feature_range(std::size_t f, std::size_t b, std::size_t e) const {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = b; i < e; ++i) {
      const double v = x_(idx_[i], f);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    return {lo, hi};
  }

  double draw_cut(double lo, double hi) {
    for (int attempt = 0; attempt < 16; ++attempt) {
      const double c = uniform(rng_, lo, hi);
      if (c > lo && c <= hi) return c;
    }
    return hi;
  }

  Split choose_split(std::size_t b, std::size_t e, double mean) {
    std::iota(features_.begin(), features_.end(), std::size_t{0});
    const std::size_t d = features_.size();
    std::size_t drawn = 0;  // features_[0, drawn) have been used
    auto draw_feature = [&]() -> std::ptrdiff_t {
      if (drawn >= d) return -1;
      const std::size_t j = drawn + uniform_index(rng_, d - drawn);
      std::swap(features_[drawn], features_[j]);
      return static_cast<std::ptrdiff_t>(features_[drawn++]);
    };

    double sse = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      const double dy = y_[idx_[i]] - mean;
      sse += dy * dy;
    }
    Split best;
    if (!(sse > 0.0)) return best;
    const double n = static_cast<double>(e - b);

    for (std::size_t k = 0; k < cfg_.k_candidates; ++k) {
      auto f = draw_feature();
      if (f < 0) break;
      auto [lo, hi] = feature_range(static_cast<std::size_t>(f), b, e);
      if (lo == hi) {  // constant here: one redraw
        f = draw_feature();
        if (f < 0) break;
        std::tie(lo, hi) = feature_range(static_cast<std::size_t>(f), b, e);
        if (lo == hi) continue;
      }
      const double cut = draw_cut(lo, hi);
      double nl = 0.0, sl = 0.0, ql = 0.0, sr = 0.0, qr = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const double dy = y_[idx_[i]] - mean;
        if (x_(idx_[i], static_cast<std::size_t>(f)) < cut) {
          nl += 1.0;
          sl += dy;
          ql += dy * dy;
        } else {
          sr += dy;
          qr += dy * dy;
        }
      }
      const double nr = n - nl;
      const double sse_l = std::max(0.0, ql - sl * sl / nl);
      const double sse_r = std::max(0.0, qr - sr * sr / nr);
      const double score = std::clamp((sse - sse_l - sse_r) / sse, 0.0, 1.0);
      if (score > best.score) best = {static_cast<int>(f), cut, score};
    }
    return best;
  }

  const Matrix& x_;
  std::span<const double> y_;
  const EnsembleConfig& cfg_;
  Rng rng_;
  std::vector<std::size_t> idx_;
  std::vector<std::size_t> features_;
};

inline void check_training_data(const Matrix& x, std::span<const double> y) {
  if (x.rows == 0 || x.cols == 0) throw InputError("extra-trees: empty training set");
  if (y.size() != x.rows) throw InputError("extra-trees: target count differs from row count");
  for (double v : x.data)
    if (!std::isfinite(v)) throw InputError("extra-trees: non-finite input value");
  for (double v : y)
    if (!std::isfinite(v)) throw InputError("extra-trees: non-finite target value");
}

}  // namespace detail

class Ensemble {
 public:
  Ensemble() = default;
  Ensemble(EnsembleConfig cfg, std::size_t dim, std::vector<RegressionTree> trees)
      : cfg_(cfg), dim_(dim), trees_(std::move(trees)) {}

  /// Mean of the trees' leaf values, clamped to the range of those values.
  double predict(std::span<const double> x) const {
    if (x.size() != dim_) throw InputError("Ensemble::predict: dimension mismatch");
    if (trees_.empty()) throw std::logic_error("Ensemble::predict: untrained ensemble");
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& t : trees_) {
      const double v = t.predict(x);
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    return std::clamp(sum / static_cast<double>(trees_.size()), lo, hi);
  }

  const EnsembleConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const RegressionTree> trees() const noexcept { return trees_; }
  bool empty() const noexcept { return trees_.empty(); }

 private:
  EnsembleConfig cfg_;
  std::size_t dim_ = 0;
  std::vector<RegressionTree> trees_;
};

/// Tree i draws from stream derive_seed(cfg.seed, i), so results do not
/// depend on thread count.
inline Ensemble fit_ensemble(const Matrix& x, std::span<const double> y, const EnsembleConfig& cfg) {
  detail::check_training_data(x, y);
  cfg.validate(x.cols);
  std::vector<RegressionTree> trees(cfg.m_trees);
  parallel_for(cfg.m_trees, cfg.threads, [&](std::size_t i) {
    trees[i] = detail::TreeBuilder(x, y, cfg, make_rng(cfg.seed, i)).build();
  });
  return Ensemble(cfg, x.cols, std::move(trees));
}

struct LminSelection {
  std::size_t l_min = 0;
  std::vector<std::pair<std::size_t, double>> cv_mse;  // per candidate
};

/// k-fold cross-validation over leaf-size candidates; the lowest mean squared
/// error wins, ties toward the larger l_min.
inline LminSelection cv_select_lmin(const Matrix& x, std::span<const double> y,
                                    std::span<const std::size_t> candidates, std::size_t folds,
                                    Rng& rng, EnsembleConfig base = {}) {
  detail::check_training_data(x, y);
  if (candidates.empty()) throw ConfigError("cv_select_lmin: no candidates");
  if (folds < 2) throw ConfigError("cv_select_lmin: folds >= 2");
  if (x.rows < folds) throw ConfigError("cv_select_lmin: fewer rows than folds");
  LminSelection sel;
  if (candidates.size() == 1) {
    sel.l_min = candidates[0];
    return sel;
  }

  std::vector<std::size_t> perm(x.rows);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
  std::vector<std::size_t> fold_of(x.rows);
  for (std::size_t i = 0; i < perm.size(); ++i) fold_of[perm[i]] = i % folds;

  struct Split {
    Matrix xtr, xte;
    std::vector<double> ytr, yte;
  };
  std::vector<Split> splits(folds);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t f = 0; f < folds; ++f) {
      auto& s = splits[f];
      if (fold_of[r] == f) {
        s.xte.push_row(x.row(r));
        s.yte.push_back(y[r]);
      } else {
        s.xtr.push_row(x.row(r));
        s.ytr.push_back(y[r]);
      }
    }
  std::vector<std::uint64_t> fold_seeds(folds);
  for (auto& s : fold_seeds) s = rng();

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t lmin : candidates) {
    double se = 0.0;
    for (std::size_t f = 0; f < folds; ++f) {
      EnsembleConfig cfg = base;
      cfg.l_min = lmin;
      cfg.seed = fold_seeds[f];
      const auto model = fit_ensemble(splits[f].xtr, splits[f].ytr, cfg);
      for (std::size_t i = 0; i < splits[f].yte.size(); ++i) {
        const double d = model.predict(splits[f].xte.row(i)) - splits[f].yte[i];
        se += d * d;
      }
    }
    const double mse = se / static_cast<double>(x.rows);
    sel.cv_mse.emplace_back(lmin, mse);
    if (mse < best || (mse == best && lmin > sel.l_min)) {
      best = mse;
      sel.l_min = lmin;
    }
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Text serialization. Doubles use shortest round-trip decimal, so reloaded
// ensembles predict bit-identically.

inline void write_ensemble(std::ostream& out, const Ensemble& e) {
  const auto& c = e.config();
  out << "extra-trees v1\n";
  out << "dim " << e.dim() << '\n';
  out << "config " << c.m_trees << ' ' << c.k_candidates << ' ' << c.l_min << ' ' << c.seed << '\n';
  out << "trees " << e.trees().size() << '\n';
  for (const auto& t : e.trees()) {
    out << "tree " << t.nodes.size() << '\n';
    for (const auto& n : t.nodes)
      out << n.feature << ' ' << format_double(n.cut) << ' ' << n.left << ' ' << n.right << ' '
          << format_double(n.value) << ' ' << n.count << ' ' << format_double(n.score) << '\n';
  }
}

inline Ensemble read_ensemble(std::istream& in) {
  std::string line;
  auto fields = [&](std::string_view key, std::size_t count) {
    if (!std::getline(in, line)) throw InputError("ensemble: truncated input");
    auto f = split(trim(line), ' ');
    if (f.size() != count + 1 || f[0] != key)
      throw InputError("ensemble: expected '" + std::string(key) + "' line");
    return std::vector<std::string>(f.begin() + 1, f.end());
  };
  if (!std::getline(in, line) || trim(line) != "extra-trees v1")
    throw InputError("ensemble: unsupported header");
  const auto dim = parse_int<std::size_t>(fields("dim", 1)[0]);
  const auto cf = fields("config", 4);
  EnsembleConfig cfg;
  cfg.m_trees = parse_int<std::size_t>(cf[0]);
  cfg.k_candidates = parse_int<std::size_t>(cf[1]);
  cfg.l_min = parse_int<std::size_t>(cf[2]);
  cfg.seed = parse_int<std::uint64_t>(cf[3]);
  const auto n_trees = parse_int<std::size_t>(fields("trees", 1)[0]);
  std::vector<RegressionTree> trees(n_trees);
  for (auto& t : trees) {
    const auto n_nodes = parse_int<std::size_t>(fields("tree", 1)[0]);
    t.nodes.resize(n_nodes);
    for (std::size_t i = 0; i < n_nodes; ++i) {
      auto& n = t.nodes[i];
      if (!std::getline(in, line)) throw InputError("ensemble: truncated tree");
      const auto f = split(trim(line), ' ');
      if (f.size() != 7) throw InputError("ensemble: bad node line");
      n.feature = parse_int<int>(f[0]);
      n.cut = parse_double(f[1]);
      n.left = parse_int<std::int32_t>(f[2]);
      n.right = parse_int<std::int32_t>(f[3]);
      n.value = parse_double(f[4]);
      n.count = parse_int<std::uint32_t>(f[5]);
      n.score = parse_double(f[6]);
      // Children always follow their parent, which rules out cycles.
      if (!n.is_leaf() && (n.feature >= static_cast<int>(dim) ||
                           static_cast<std::size_t>(std::min(n.left, n.right)) <= i ||
                           static_cast<std::size_t>(std::max(n.left, n.right)) >= n_nodes))
        throw InputError("ensemble: node references out of range");
    }
    if (t.nodes.empty()) throw InputError("ensemble: empty tree");
  }
  return Ensemble(cfg, dim, std::move(trees));
}

}  // namespace anemia

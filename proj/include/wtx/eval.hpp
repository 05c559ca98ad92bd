#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wtx/bench.hpp"
#include "wtx/errors.hpp"
#include "wtx/matrix.hpp"
#include "wtx/model.hpp"

namespace wtx {

/// Classification proxies for detection AP/AR: top-1 accuracy and hit@k
/// (any true label among the k highest logits).
struct MetricReport {
  std::string split;
  std::size_t examples = 0;
  std::size_t universe_size = 0;
  double top1 = 0.0;
  std::size_t recall_k = 5;
  double recall_at_k = 0.0;
  std::map<std::size_t, std::size_t> per_class_count;  // by primary class id
  std::map<std::size_t, std::size_t> per_class_correct;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& [c, n] : r.per_class_count) {
    per_class.push_back({{"class", c}, {"count", n}, {"correct", r.per_class_correct.at(c)}});
  }
  return {{"split", r.split},
          {"metric_kind", "proxy: classification top-1 / hit@k"},
          {"examples", r.examples},
          {"universe_size", r.universe_size},
          {"top1", r.top1},
          {"recall_k", r.recall_k},
          {"recall_at_k", r.recall_at_k},
          {"per_class", per_class}};
}

/// Column indices of `logits_row` sorted by decreasing logit; ties go to the
/// lower index.
inline std::vector<std::size_t> rank_columns(std::span<const double> logits_row) {
  std::vector<std::size_t> idx(logits_row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return logits_row[a] > logits_row[b]; });
  return idx;
}

/// Scores `split` against `class_weights`, whose row k is the weight of
/// class `split.universe[k]`.
inline MetricReport evaluate(const Matrix& class_weights, const Split& split,
                             std::size_t recall_k = 5) {
  if (class_weights.rows() != split.universe.size()) {
    throw StateError("evaluate: " + std::to_string(class_weights.rows()) +
                     " class weights for a universe of " + std::to_string(split.universe.size()));
  }
  if (class_weights.cols() != split.features.cols()) {
    throw StateError("evaluate: weight dimension does not match feature dimension");
  }
  if (recall_k == 0) throw DomainError("evaluate: recall k must be positive");
  MetricReport rep;
  rep.split = split.name;
  rep.examples = split.size();
  rep.universe_size = split.universe.size();
  rep.recall_k = recall_k;
  if (split.size() == 0) return rep;

  const Matrix logits = matmul_bt(split.features, class_weights);
  std::size_t top1 = 0, hits = 0;
  const std::size_t k = std::min(recall_k, split.universe.size());
  for (std::size_t n = 0; n < split.size(); ++n) {
    const auto ranked = rank_columns(logits.row(n));
    auto is_true = [&](std::size_t col) {
      const auto& l = split.labels[n];
      return std::find(l.begin(), l.end(), split.universe[col]) != l.end();
    };
    const bool correct = is_true(ranked[0]);
    top1 += correct;
    for (std::size_t r = 0; r < k; ++r) {
      if (is_true(ranked[r])) {
        ++hits;
        break;
      }
    }
    rep.per_class_count[split.primary[n]] += 1;
    rep.per_class_correct[split.primary[n]] += correct;
  }
  rep.top1 = static_cast<double>(top1) / static_cast<double>(split.size());
  rep.recall_at_k = static_cast<double>(hits) / static_cast<double>(split.size());
  return rep;
}

/// Class weights for the full universe of a benchmark: transferred (or
/// baseline) rows for every source class in id order, then "other" rows.
inline Matrix full_universe_weights(const Matrix& source_class_rows, const Matrix& other) {
  return concat_rows(source_class_rows, other);
}

/// Class weights for the seen universe: shared rows then "other" rows.
inline Matrix seen_universe_weights(const Matrix& source_class_rows, const SourceWeights& source,
                                    const Matrix& other) {
  return concat_rows(select_rows(source_class_rows, source.shared_ids()), other);
}

// ---------------------------------------------------------------------------
// Neighbour-overlap curve.

struct OverlapCurve {
  std::vector<std::size_t> k_values;
  std::vector<double> mean_overlap;
  std::vector<std::size_t> sampled_classes;

  [[nodiscard]] double at(std::size_t k) const {
    for (std::size_t i = 0; i < k_values.size(); ++i)
      if (k_values[i] == k) return mean_overlap[i];
    throw DomainError("overlap curve has no entry for k=" + std::to_string(k));
  }
};

inline nlohmann::json to_json(const OverlapCurve& c) {
  return {{"k", c.k_values}, {"mean_overlap", c.mean_overlap},
          {"sampled_classes", c.sampled_classes}};
}

/// Other rows of `w` ordered by Euclidean distance to row `c` (self
/// excluded, ties by index).
inline std::vector<std::size_t> neighbours_by_distance(const Matrix& w, std::size_t c) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(w.rows());
  for (std::size_t j = 0; j < w.rows(); ++j)
    if (j != c) d.emplace_back(detail::sq_dist(w.row(c), w.row(j)), j);
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  out.reserve(d.size());
  for (const auto& p : d) out.push_back(p.second);
  return out;
}

/// Mean size of the intersection between each sampled class's top-k
/// neighbours in `w_ref` and in `w_test`, for every k in `k_list`.
inline OverlapCurve nn_overlap(const Matrix& w_ref, const Matrix& w_test,
                               std::vector<std::size_t> k_list, std::size_t n_sample_classes,
                               Rng& rng) {
  if (w_ref.rows() != w_test.rows()) throw ShapeError("nn_overlap: row counts differ");
  const std::size_t n = w_ref.rows();
  for (auto k : k_list)
    if (k == 0 || k >= n) throw DomainError("nn_overlap: k must be in [1, |C|)");
  if (n_sample_classes == 0 || n_sample_classes > n) {
    throw DomainError("nn_overlap: sample size must be in [1, |C|]");
  }
  std::sort(k_list.begin(), k_list.end());
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  rng.shuffle(ids);
  ids.resize(n_sample_classes);

  OverlapCurve curve{k_list, std::vector<double>(k_list.size(), 0.0), ids};
  for (std::size_t c : ids) {
    const auto a = neighbours_by_distance(w_ref, c);
    const auto b = neighbours_by_distance(w_test, c);
    std::vector<char> in_a(n, 0);
    std::size_t filled = 0, common = 0;
    // grow both prefixes together; an element joins `common` when it has
    // appeared in both prefixes
    std::vector<char> in_b(n, 0);
    for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
      for (; filled < k_list[ki]; ++filled) {
        const auto x = a[filled], y = b[filled];
        in_a[x] = 1;
        if (in_b[x]) ++common;
        in_b[y] = 1;
        if (in_a[y]) ++common;
      }
      curve.mean_overlap[ki] += static_cast<double>(common);
    }
  }
  for (double& v : curve.mean_overlap) v /= static_cast<double>(n_sample_classes);
  return curve;
}

// ---------------------------------------------------------------------------
// Post-ReLU activation-norm statistics.

struct NormStats {
  double shared_mean = 0.0;
  double shared_variance = 0.0;
  double novel_mean = 0.0;
  double novel_variance = 0.0;

  [[nodiscard]] double variance_ratio() const {
    return shared_variance > 0.0 ? novel_variance / shared_variance : INFINITY;
  }
};

inline nlohmann::json to_json(const NormStats& s) {
  return {{"shared_mean", s.shared_mean}, {"shared_variance", s.shared_variance},
          {"novel_mean", s.novel_mean},   {"novel_variance", s.novel_variance},
          {"variance_ratio", s.variance_ratio()}};
}

/// Mean and population variance of row L2 norms, split by the shared mask.
inline NormStats activation_norm_stats(const Matrix& activations, const SourceWeights& source) {
  if (activations.rows() != source.num_classes()) {
    throw ShapeError("norm_stats: one activation row per source class expected");
  }
  const Matrix norms = row_l2_norms(activations);
  auto moments = [&](bool shared, double& mean, double& var) {
    std::vector<double> v;
    for (std::size_t c = 0; c < norms.rows(); ++c)
      if (source.is_shared(c) == shared) v.push_back(norms(c, 0));
    mean = var = 0.0;
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
  };
  NormStats s;
  moments(true, s.shared_mean, s.shared_variance);
  moments(false, s.novel_mean, s.novel_variance);
  return s;
}

/// Norm statistics at the encoder's post-ReLU point, all classes forwarded
/// together (class-batch normalization sees the full class batch).
inline NormStats norm_stats(const TransferModel& model, const SourceWeights& source) {
  return activation_norm_stats(model.hidden_activations(source.weights), source);
}

// ---------------------------------------------------------------------------
// Comparison table.

struct TableRow {
  std::string method;
  std::uint64_t seed = 0;
  double seen_top1 = 0.0;
  double novel_top1 = 0.0;
  double novel_recall5 = 0.0;
  nlohmann::json benchmark;  // config echo; must agree across rows
  std::optional<bool> input_norm;
  std::optional<bool> group_norm;
  bool median = false;
};

struct ComparisonTable {
  std::vector<TableRow> rows;
  bool grid = false;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Builds the method comparison table. With `with_medians`, appends one
/// median row per method (in first-appearance order). With `grid`, rows carry
/// the input-norm / group-norm flags of the normalization ablation.
inline ComparisonTable comparison_table(const std::vector<TableRow>& reports, bool with_medians,
                                        bool grid) {
  if (reports.empty()) throw ConfigError("comparison_table: no reports");
  for (const auto& r : reports) {
    if (r.benchmark != reports.front().benchmark) {
      throw ConfigError("comparison_table: reports come from different benchmark configs");
    }
    if (grid && (!r.input_norm || !r.group_norm)) {
      throw ConfigError("comparison_table: grid rows need input_norm/group_norm flags");
    }
  }
  ComparisonTable t{reports, grid};
  if (with_medians) {
    std::vector<std::string> order;
    for (const auto& r : reports)
      if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
    for (const auto& m : order) {
      std::vector<double> s, n, r5;
      TableRow med;
      for (const auto& r : reports) {
        if (r.method != m) continue;
        s.push_back(r.seen_top1);
        n.push_back(r.novel_top1);
        r5.push_back(r.novel_recall5);
        med.input_norm = r.input_norm;
        med.group_norm = r.group_norm;
      }
      med.method = m;
      med.median = true;
      med.seen_top1 = median(s);
      med.novel_top1 = median(n);
      med.novel_recall5 = median(r5);
      med.benchmark = reports.front().benchmark;
      t.rows.push_back(std::move(med));
    }
  }
  return t;
}

inline std::string to_csv(const ComparisonTable& t) {
  std::string out = "method,seed";
  if (t.grid) out += ",input_norm,group_norm";
  out += ",seen_top1,novel_top1,novel_recall5\n";
  for (const auto& r : t.rows) {
    out += r.method + ',' + (r.median ? std::string("median") : std::to_string(r.seed));
    if (t.grid) {
      out += std::string(",") + (*r.input_norm ? "1" : "0") + ',' + (*r.group_norm ? "1" : "0");
    }
    out += ',' + format_double(r.seen_top1) + ',' + format_double(r.novel_top1) + ',' +
           format_double(r.novel_recall5) + '\n';
  }
  return out;
}

inline nlohmann::json to_json(const ComparisonTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json j{{"method", r.method},         {"seed", r.median ? nlohmann::json("median") : nlohmann::json(r.seed)},
                     {"seen_top1", r.seen_top1},   {"novel_top1", r.novel_top1},
                     {"novel_recall5", r.novel_recall5}};
    if (t.grid) {
      j["input_norm"] = *r.input_norm;
      j["group_norm"] = *r.group_norm;
    }
    rows.push_back(std::move(j));
  }
  return {{"benchmark", t.rows.front().benchmark}, {"grid", t.grid}, {"rows", rows}};
}

}  // namespace wtx

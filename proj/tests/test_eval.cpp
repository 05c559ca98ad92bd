#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <tuple>

#include <gtest/gtest.h>

#include "wtx/experiment.hpp"

using namespace wtx;

namespace {

Split labelled_split(const Matrix& x, const std::vector<std::size_t>& primary,
                     std::vector<std::size_t> universe) {
  Split s;
  s.name = "test";
  s.features = x;
  s.primary = primary;
  for (auto c : primary) s.labels.push_back({c});
  s.universe = std::move(universe);
  return s;
}

// Brute-force top-k neighbour sets: full sort of all distances.
std::vector<std::size_t> brute_topk(const Matrix& w, std::size_t c, std::size_t k) {
  std::vector<std::tuple<double, std::size_t>> d;
  for (std::size_t j = 0; j < w.rows(); ++j) {
    if (j == c) continue;
    double s = 0.0;
    for (std::size_t t = 0; t < w.cols(); ++t) s += (w(c, t) - w(j, t)) * (w(c, t) - w(j, t));
    d.emplace_back(s, j);
  }
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(std::get<1>(d[i]));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Evaluate, OracleWeightsOnSeparableDataArePerfect) {
  const Matrix protos{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const Split s = labelled_split(protos, {0, 1, 2}, {0, 1, 2});
  const auto r = evaluate(protos, s);
  EXPECT_EQ(r.top1, 1.0);
  EXPECT_EQ(r.recall_at_k, 1.0);
}

TEST(Evaluate, RandomWeightsAreAtChance) {
  Rng rng(1);
  const std::size_t n_cls = 10, n = 4000;
  std::vector<std::size_t> primary(n), universe(n_cls);
  std::iota(universe.begin(), universe.end(), std::size_t{0});
  for (auto& p : primary) p = rng.uniform_index(n_cls);
  const Split s = labelled_split(gaussian_sample(rng, n, 16, 0.0, 1.0), primary, universe);
  const auto r = evaluate(gaussian_sample(rng, n_cls, 16, 0.0, 1.0), s);
  const double p = 0.1, sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  EXPECT_LT(std::abs(r.top1 - p), 3.0 * sigma);
}

TEST(Evaluate, RecallAtUniverseSizeIsOne) {
  Rng rng(2);
  std::vector<std::size_t> primary(50);
  for (auto& p : primary) p = rng.uniform_index(6);
  const Split s = labelled_split(gaussian_sample(rng, 50, 4, 0.0, 1.0), primary, {0, 1, 2, 3, 4, 5});
  const auto r = evaluate(gaussian_sample(rng, 6, 4, 0.0, 1.0), s, 6);
  EXPECT_EQ(r.recall_at_k, 1.0);
  EXPECT_LE(r.top1, r.recall_at_k);
  std::size_t total = 0;
  for (const auto& [c, n] : r.per_class_count) total += n;
  EXPECT_EQ(total, 50u);
}

TEST(Evaluate, TiesGoToLowestIndex) {
  const Split s = labelled_split(Matrix{{1, 1}}, {0}, {0, 1});
  const auto r = evaluate(Matrix{{1, 0}, {1, 0}}, s);
  EXPECT_EQ(r.top1, 1.0);
  const Split s2 = labelled_split(Matrix{{1, 1}}, {1}, {0, 1});
  EXPECT_EQ(evaluate(Matrix{{1, 0}, {1, 0}}, s2).top1, 0.0);
}

TEST(Evaluate, MismatchIsStateError) {
  const Split s = labelled_split(Matrix{{1, 1}}, {0}, {0, 1});
  EXPECT_THROW((void)evaluate(Matrix(3, 2), s), StateError);
  EXPECT_THROW((void)evaluate(Matrix(2, 3), s), StateError);
}

TEST(Evaluate, Deterministic) {
  Rng rng(3);
  std::vector<std::size_t> primary(30);
  for (auto& p : primary) p = rng.uniform_index(5);
  const Split s = labelled_split(gaussian_sample(rng, 30, 4, 0.0, 1.0), primary, {0, 1, 2, 3, 4});
  const Matrix w = gaussian_sample(rng, 5, 4, 0.0, 1.0);
  EXPECT_EQ(evaluate(w, s), evaluate(w, s));
}

TEST(Overlap, IdentityIsExactlyK) {
  Rng rng(4);
  const Matrix w = gaussian_sample(rng, 40, 8, 0.0, 1.0);
  Rng r2(5);
  const auto c = nn_overlap(w, w, {1, 5, 10, 20}, 20, r2);
  for (std::size_t i = 0; i < c.k_values.size(); ++i)
    EXPECT_EQ(c.mean_overlap[i], static_cast<double>(c.k_values[i]));
}

TEST(Overlap, RotationPreservesNeighbours) {
  Rng rng(6);
  const Matrix w = gaussian_sample(rng, 30, 8, 0.0, 1.0);
  Rng qr(7);
  const Matrix q = detail::orthonormal_rows(8, 9, qr);  // 8 orthonormal rows in R^9
  const Matrix rotated = matmul(w, q);                   // isometric embedding into R^9
  for (bool swap : {false, true}) {
    Rng r2(8);
    const auto c = swap ? nn_overlap(rotated, w, {3, 10}, 30, r2) : nn_overlap(w, rotated, {3, 10}, 30, r2);
    EXPECT_NEAR(c.at(3), 3.0, 1e-12);
    EXPECT_NEAR(c.at(10), 10.0, 1e-12);
  }
}

TEST(Overlap, MatchesBruteForceOracle) {
  Rng rng(9);
  const Matrix a = gaussian_sample(rng, 30, 8, 0.0, 1.0);
  const Matrix b = gaussian_sample(rng, 30, 8, 0.0, 1.0);
  const std::vector<std::size_t> ks{1, 4, 7, 15, 29};
  Rng r2(10);
  const auto c = nn_overlap(a, b, ks, 30, r2);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    double total = 0.0;
    for (std::size_t cls = 0; cls < 30; ++cls) {
      const auto x = brute_topk(a, cls, ks[i]);
      const auto y = brute_topk(b, cls, ks[i]);
      std::vector<std::size_t> common;
      std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
      total += static_cast<double>(common.size());
    }
    EXPECT_DOUBLE_EQ(c.mean_overlap[i], total / 30.0);
  }
}

TEST(Overlap, BoundedAndMonotone) {
  Rng rng(11);
  const Matrix a = gaussian_sample(rng, 50, 6, 0.0, 1.0);
  const Matrix b = gaussian_sample(rng, 50, 6, 0.0, 1.0);
  Rng r2(12);
  const auto c = nn_overlap(a, b, {20, 5, 10, 40}, 20, r2);
  EXPECT_EQ(c.k_values, (std::vector<std::size_t>{5, 10, 20, 40}));
  for (std::size_t i = 0; i < c.k_values.size(); ++i) {
    EXPECT_LE(c.mean_overlap[i], static_cast<double>(c.k_values[i]));
    if (i > 0) {
      EXPECT_LE(c.mean_overlap[i - 1], c.mean_overlap[i]);
    }
  }
}

TEST(Overlap, KOutOfRangeIsDomainError) {
  Rng rng(13);
  const Matrix a = gaussian_sample(rng, 10, 3, 0.0, 1.0);
  EXPECT_THROW(nn_overlap(a, a, {10}, 5, rng), DomainError);
  EXPECT_THROW(nn_overlap(a, a, {0}, 5, rng), DomainError);
}

TEST(NormStats, ZeroActivations) {
  SourceWeights src;
  src.weights = Matrix(4, 2);
  src.shared_mask = {true, false, true, false};
  const auto s = activation_norm_stats(Matrix(4, 6), src);
  EXPECT_EQ(s.shared_mean, 0.0);
  EXPECT_EQ(s.shared_variance, 0.0);
  EXPECT_EQ(s.novel_mean, 0.0);
  EXPECT_EQ(s.novel_variance, 0.0);
}

TEST(NormStats, MatchesHandComputation) {
  SourceWeights src;
  src.weights = Matrix(4, 2);
  src.shared_mask = {true, true, false, false};
  // norms 5, 1 (shared) and 2, 4 (novel)
  const auto s = activation_norm_stats(Matrix{{3, 4}, {1, 0}, {0, 2}, {4, 0}}, src);
  EXPECT_DOUBLE_EQ(s.shared_mean, 3.0);
  EXPECT_DOUBLE_EQ(s.shared_variance, 4.0);
  EXPECT_DOUBLE_EQ(s.novel_mean, 3.0);
  EXPECT_DOUBLE_EQ(s.novel_variance, 1.0);
  EXPECT_DOUBLE_EQ(s.variance_ratio(), 0.25);
}

TEST(ComparisonTable, SingleReportSingleRow) {
  TableRow r{"wtn", 1, 0.5, 0.2, 0.4, nlohmann::json{{"a", 1}}, {}, {}};
  const auto t = comparison_table({r}, false, false);
  EXPECT_EQ(t.rows.size(), 1u);
  const std::string csv = to_csv(t);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(ComparisonTable, GridRowsCarryFlags) {
  std::vector<TableRow> rows;
  for (bool in : {false, true})
    for (bool gn : {false, true}) {
      TableRow r{"m", 1, 0.5, 0.2, 0.4, nlohmann::json{{"a", 1}}, {}, {}};
      r.input_norm = in;
      r.group_norm = gn;
      rows.push_back(r);
    }
  const auto t = comparison_table(rows, false, true);
  EXPECT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(to_csv(t).substr(0, 33), "method,seed,input_norm,group_norm");
  EXPECT_EQ(to_json(t).at("rows").size(), 4u);
}

TEST(ComparisonTable, MediansPerMethod) {
  std::vector<TableRow> rows;
  for (const char* m : {"wtn", "wtn_plus", "ae_wtn"})
    for (std::uint64_t s = 1; s <= 5; ++s)
      rows.push_back({m, s, 0.1 * static_cast<double>(s), 0.0, 0.0, nlohmann::json{{"a", 1}}, {}, {}});
  const auto t = comparison_table(rows, true, false);
  ASSERT_EQ(t.rows.size(), 18u);
  for (std::size_t i = 15; i < 18; ++i) {
    EXPECT_TRUE(t.rows[i].median);
    EXPECT_DOUBLE_EQ(t.rows[i].seen_top1, 0.3);
  }
}

TEST(ComparisonTable, InconsistentConfigsRejected) {
  TableRow a{"wtn", 1, 0, 0, 0, nlohmann::json{{"a", 1}}, {}, {}};
  TableRow b{"wtn", 2, 0, 0, 0, nlohmann::json{{"a", 2}}, {}, {}};
  EXPECT_THROW(comparison_table({a, b}, false, false), ConfigError);
}

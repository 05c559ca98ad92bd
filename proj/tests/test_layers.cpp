#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "wtx/gradcheck.hpp"
#include "wtx/layers.hpp"

using namespace wtx;

namespace {

// Population mean / std of column j, computed in two passes.
std::pair<double, double> column_moments(const Matrix& m, std::size_t j) {
  double mean = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) mean += m(i, j);
  mean /= static_cast<double>(m.rows());
  double var = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) var += (m(i, j) - mean) * (m(i, j) - mean);
  return {mean, std::sqrt(var / static_cast<double>(m.rows()))};
}

}  // namespace

TEST(Linear, IdentityWeightZeroBias) {
  LinearLayer l(3, 3);
  for (std::size_t i = 0; i < 3; ++i) l.weight().value(i, i) = 1.0;
  const Matrix x{{1, -2, 3}, {0.5, 4, -1}};
  EXPECT_EQ(l.forward(x), x);
}

TEST(Linear, ZeroWeightGivesBiasRows) {
  LinearLayer l(2, 3);
  l.bias().value = Matrix{{1}, {2}, {3}};
  const Matrix y = l.forward(Matrix{{5, 6}, {7, 8}});
  EXPECT_EQ(y, (Matrix{{1, 2, 3}, {1, 2, 3}}));
}

TEST(Linear, MatchesDotProductOracle) {
  Rng rng(21);
  LinearLayer l(6, 4, rng);
  for (double& b : l.bias().value.values()) b = rng.normal();
  const Matrix x = gaussian_sample(rng, 5, 6, 0.0, 1.0);
  const Matrix y = l.forward(x);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = l.bias().value(o, 0);
      for (std::size_t k = 0; k < 6; ++k) s += x(i, k) * l.weight().value(o, k);
      EXPECT_LT(std::abs(y(i, o) - s), 1e-12 * std::max(1.0, std::abs(s)));
    }
}

TEST(Linear, HeUniformInitBoundsAndZeroBias) {
  Rng rng(1);
  LinearLayer l(64, 32, rng);
  const double bound = std::sqrt(6.0 / 64.0);
  for (double w : l.weight().value.values()) EXPECT_LE(std::abs(w), bound);
  for (double b : l.bias().value.values()) EXPECT_EQ(b, 0.0);
}

TEST(Linear, ShapeMismatchAndBackwardBeforeForward) {
  LinearLayer l(3, 2);
  EXPECT_THROW(l.forward(Matrix(1, 4)), ShapeError);
  EXPECT_THROW(l.backward(Matrix(1, 2)), StateError);
}

TEST(Linear, GradientOnFourByEight) {
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Rng rng(s);
    Rng init = rng.fork(1);
    LinearLayer l(8, 5, init);
    const auto r = check_layer(l, gaussian_sample(rng, 4, 8, 0.0, 1.0), rng, "linear");
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << s;
  }
}

TEST(Relu, Examples) {
  ReluLayer r;
  EXPECT_EQ(r.forward(Matrix{{-1, 2}}), (Matrix{{0, 2}}));
  EXPECT_EQ(r.forward(Matrix{{-1, -2}, {-0.5, -3}}), Matrix(2, 2));
}

TEST(Relu, Idempotent) {
  Rng rng(2);
  const Matrix x = gaussian_sample(rng, 4, 5, 0.0, 1.0);
  ReluLayer a, b;
  const Matrix once = a.forward(x);
  EXPECT_EQ(b.forward(once), once);
}

TEST(Relu, BackwardMasksNegativeInputs) {
  ReluLayer r;
  r.forward(Matrix{{-1, 2, 0}});
  EXPECT_EQ(r.backward(Matrix{{5, 6, 7}}), (Matrix{{0, 6, 0}}));
}

TEST(Standardizer, PopulationStd) {
  const auto s = InputStandardizer::fit(Matrix{{1}, {2}, {3}}, 1e-5);
  EXPECT_DOUBLE_EQ(s.mu()[0], 2.0);
  EXPECT_NEAR(s.sigma()[0], std::sqrt(2.0 / 3.0), 1e-15);
}

TEST(Standardizer, ConstantChannelMapsToZero) {
  const auto s = InputStandardizer::fit(Matrix{{4, 1}, {4, 2}, {4, 3}}, 1e-5);
  EXPECT_EQ(s.sigma()[0], 0.0);
  const Matrix y = s.apply(Matrix{{4, 2}});
  EXPECT_EQ(y(0, 0), 0.0);
}

TEST(Standardizer, FewerThanTwoRowsIsDomainError) {
  EXPECT_THROW((void)InputStandardizer::fit(Matrix{{1, 2}}, 1e-5), DomainError);
}

TEST(Standardizer, MatchesTwoPassOracle) {
  Rng rng(31);
  const Matrix w = gaussian_sample(rng, 50, 8, 0.7, 2.0);
  const auto s = InputStandardizer::fit(w, 1e-5);
  for (std::size_t j = 0; j < 8; ++j) {
    const auto [mean, sd] = column_moments(w, j);
    EXPECT_LT(std::abs(s.mu()[j] - mean), 1e-12 * std::max(1.0, std::abs(mean)));
    EXPECT_LT(std::abs(s.sigma()[j] - sd), 1e-12 * sd);
  }
}

TEST(Standardizer, ApplyToFittingMatrix) {
  Rng rng(32);
  const Matrix w = gaussian_sample(rng, 40, 6, -1.0, 3.0);
  const double eps = 1e-5;
  const auto s = InputStandardizer::fit(w, eps);
  const Matrix y = s.apply(w);
  for (std::size_t j = 0; j < 6; ++j) {
    const auto [mean, sd] = column_moments(y, j);
    EXPECT_LT(std::abs(mean), 1e-10);
    EXPECT_LT(std::abs(sd - s.sigma()[j] / (s.sigma()[j] + eps)), 1e-10);
  }
}

TEST(Standardizer, IdentityWhenUnitStatistics) {
  InputStandardizer s(std::vector<double>(3, 0.0), std::vector<double>(3, 1.0), 0.0);
  const Matrix x{{1, -2, 3.5}};
  EXPECT_EQ(s.apply(x), x);
}

TEST(Standardizer, EqualizesChannelsWithTwentyEightFoldScaleSpread) {
  Rng rng(33);
  Matrix w = gaussian_sample(rng, 200, 8, 0.0, 1.0);
  // channel scales spread geometrically from 1 to 28
  for (std::size_t j = 0; j < 8; ++j) {
    const double scale = std::pow(28.0, static_cast<double>(j) / 7.0);
    for (std::size_t i = 0; i < w.rows(); ++i) w(i, j) *= scale * 0.01;
  }
  const auto s = InputStandardizer::fit(w, 1e-5);
  const Matrix y = s.apply(w);
  for (std::size_t j = 0; j < 8; ++j) {
    const double var = std::pow(column_moments(y, j).second, 2);
    EXPECT_GE(var, 0.9) << "channel " << j;
    EXPECT_LE(var, 1.0) << "channel " << j;
  }
}

TEST(Standardizer, RefitOnStandardizedOutput) {
  Rng rng(34);
  const Matrix w = gaussian_sample(rng, 64, 16, 2.0, 5.0);
  const double eps = 1e-5;
  const auto s = InputStandardizer::fit(w, eps);
  const auto s2 = InputStandardizer::fit(s.apply(w), eps);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_LT(std::abs(s2.mu()[j]), 1e-10);
    EXPECT_LT(std::abs(s2.sigma()[j] - s.sigma()[j] / (s.sigma()[j] + eps)), 1e-6);
  }
}

TEST(Standardizer, BackwardScalesAndHasNoParameters) {
  auto s = InputStandardizer::fit(Matrix{{0, 0}, {2, 4}}, 0.0);
  EXPECT_TRUE(s.parameters().empty());
  EXPECT_THROW(s.backward(Matrix(1, 2)), StateError);
  s.forward(Matrix{{1, 1}});
  EXPECT_EQ(s.backward(Matrix{{2, 2}}), (Matrix{{2, 1}}));
}

TEST(Standardizer, InverseRoundTrip) {
  Rng rng(35);
  const Matrix w = gaussian_sample(rng, 10, 4, 0.5, 2.0);
  const auto s = InputStandardizer::fit(w, 1e-5);
  EXPECT_LT(max_abs_diff(s.invert(s.apply(w)), w), 1e-12);
}

TEST(GroupNorm, ConstantRowNormalizesToZero) {
  GroupNormLayer gn(4, 2);
  const Matrix y = gn.forward(Matrix{{3, 3, 3, 3}});
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(GroupNorm, SingleGroupIsLayerNorm) {
  Rng rng(41);
  const Matrix x = gaussian_sample(rng, 5, 8, 1.0, 2.0);
  const double eps = 1e-5;
  GroupNormLayer gn(8, 1, eps);
  const Matrix y = gn.forward(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += x(i, j);
    mean /= 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= 8.0;
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_LT(std::abs(y(i, j) - (x(i, j) - mean) / std::sqrt(var + eps)), 1e-12);
  }
}

TEST(GroupNorm, SingletonGroupsOutputBeta) {
  Rng rng(42);
  GroupNormLayer gn(6, 6);
  for (double& g : gn.gamma().value.values()) g = rng.normal();
  for (double& b : gn.beta().value.values()) b = rng.normal();
  const Matrix y = gn.forward(gaussian_sample(rng, 3, 6, 0.0, 1.0));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y(i, j), gn.beta().value(0, j));
}

TEST(GroupNorm, IndivisibleChannelsIsConfigError) {
  EXPECT_THROW(GroupNormLayer(10, 4), ConfigError);
  EXPECT_THROW(GroupNormLayer(8, 0), ConfigError);
}

TEST(GroupNorm, PreAffineSliceMoments) {
  Rng rng(43);
  const Matrix x = gaussian_sample(rng, 6, 16, 3.0, 4.0);
  // exact normalization (epsilon 0) has unit variance per slice
  GroupNormLayer exact(16, 4, 0.0);
  exact.forward(x);
  GroupNormLayer eps(16, 4, 1e-5);
  eps.forward(x);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t g = 0; g < 4; ++g) {
      double m = 0.0, v = 0.0, raw_var = 0.0, raw_mean = 0.0, ve = 0.0;
      for (std::size_t j = 4 * g; j < 4 * g + 4; ++j) {
        m += exact.normalized()(i, j) / 4.0;
        raw_mean += x(i, j) / 4.0;
      }
      for (std::size_t j = 4 * g; j < 4 * g + 4; ++j) {
        v += std::pow(exact.normalized()(i, j) - m, 2) / 4.0;
        raw_var += std::pow(x(i, j) - raw_mean, 2) / 4.0;
        ve += std::pow(eps.normalized()(i, j), 2) / 4.0;
      }
      EXPECT_LT(std::abs(m), 1e-10);
      EXPECT_LT(std::abs(v - 1.0), 1e-8);
      EXPECT_LT(std::abs(ve - raw_var / (raw_var + 1e-5)), 1e-12);
    }
}

TEST(GroupNorm, ScaleInvariantPerGroup) {
  Rng rng(44);
  Matrix x = gaussian_sample(rng, 3, 8, 0.0, 1.0);
  GroupNormLayer gn(8, 2, 0.0);
  gn.forward(x);
  const Matrix before = gn.normalized();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) x(i, j) *= 37.5;
  gn.forward(x);
  EXPECT_LT(max_abs_diff(before, gn.normalized()), 1e-8);
}

TEST(GroupNorm, GradientTwoGroupsFourChannels) {
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Rng rng(s);
    GroupNormLayer gn(4, 2);
    for (double& g : gn.gamma().value.values()) g = rng.uniform(0.5, 2.0);
    for (double& b : gn.beta().value.values()) b = rng.normal();
    const auto r = check_layer(gn, gaussian_sample(rng, 3, 4, 0.0, 1.0), rng, "groupnorm");
    EXPECT_LT(r.max_rel_error, 1e-5) << "seed " << s;
  }
}

TEST(ClassBatchNorm, IdenticalRowsGiveBeta) {
  ClassBatchNorm bn(3);
  bn.beta().value = Matrix{{1, 2, 3}};
  const Matrix y = bn.forward(Matrix{{5, 6, 7}, {5, 6, 7}});
  EXPECT_EQ(y, (Matrix{{1, 2, 3}, {1, 2, 3}}));
}

TEST(ClassBatchNorm, SingleRowIsDomainError) {
  ClassBatchNorm bn(3);
  EXPECT_THROW(bn.forward(Matrix(1, 3)), DomainError);
}

TEST(ClassBatchNorm, PerChannelMoments) {
  Rng rng(51);
  ClassBatchNorm bn(5, 0.0);
  const Matrix y = bn.forward(gaussian_sample(rng, 30, 5, 2.0, 3.0));
  for (std::size_t j = 0; j < 5; ++j) {
    const auto [mean, sd] = column_moments(y, j);
    EXPECT_LT(std::abs(mean), 1e-10);
    EXPECT_LT(std::abs(sd * sd - 1.0), 1e-8);
  }
}

TEST(ClassBatchNorm, AgreesWithStandardizerOnSameBatch) {
  Rng rng(52);
  const Matrix x = gaussian_sample(rng, 20, 6, -1.0, 2.0);
  // both with epsilon 0, so sqrt(var + eps) and sigma + eps coincide
  ClassBatchNorm bn(6, 0.0);
  const Matrix y = bn.forward(x);
  const Matrix z = InputStandardizer::fit(x, 0.0).apply(x);
  EXPECT_LT(max_abs_diff(y, z), 1e-12);
}

TEST(ClassBatchNorm, RowPermutationEquivariant) {
  Rng rng(53);
  const Matrix x = gaussian_sample(rng, 7, 4, 0.0, 1.0);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  ClassBatchNorm a(4), b(4);
  const Matrix y = a.forward(x);
  const Matrix yp = b.forward(select_rows(x, perm));
  EXPECT_LT(max_abs_diff(select_rows(y, perm), yp), 1e-12);
}

TEST(LayerGradients, EveryLayerKindOverTenSeeds) {
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Rng rng(s);
    {
      Rng init = rng.fork(1);
      LinearLayer l(7, 5, init);
      for (double& b : l.bias().value.values()) b = rng.normal();
      EXPECT_LT(check_layer(l, gaussian_sample(rng, 4, 7, 0.0, 1.0), rng, "linear").max_rel_error,
                1e-5);
    }
    {
      ReluLayer l;
      EXPECT_LT(check_layer(l, away_from_zero(rng, 4, 6), rng, "relu").max_rel_error, 1e-5);
    }
    {
      auto l = InputStandardizer::fit(gaussian_sample(rng, 10, 6, 0.3, 2.0), 1e-5);
      EXPECT_LT(
          check_layer(l, gaussian_sample(rng, 4, 6, 0.0, 1.0), rng, "standardizer").max_rel_error,
          1e-5);
    }
    {
      ClassBatchNorm l(5);
      for (double& g : l.gamma().value.values()) g = rng.uniform(0.5, 1.5);
      EXPECT_LT(check_layer(l, gaussian_sample(rng, 6, 5, 0.0, 1.0), rng, "classbn").max_rel_error,
                1e-5);
    }
    {
      GroupNormLayer l(8, 4);
      for (double& g : l.gamma().value.values()) g = rng.uniform(0.5, 1.5);
      EXPECT_LT(
          check_layer(l, gaussian_sample(rng, 3, 8, 0.0, 1.0), rng, "groupnorm").max_rel_error,
          1e-5);
    }
  }
}

TEST(Dropout, IdentityAtInferenceAndScaledInTraining) {
  DropoutLayer d(0.5, 3);
  const Matrix x(4, 50, 2.0);
  d.set_training(false);
  EXPECT_EQ(d.forward(x), x);
  d.set_training(true);
  const Matrix y = d.forward(x);
  for (double v : y.values()) EXPECT_TRUE(v == 0.0 || v == 4.0);
  EXPECT_THROW(DropoutLayer(1.0, 1), ConfigError);
}

TEST(LayerStack, CopyIsDeep) {
  Rng rng(61);
  LayerStack a;
  a.add(LinearLayer(3, 3, rng));
  LayerStack b = a;
  auto* w = a.parameters()[0];
  w->value(0, 0) += 1.0;
  EXPECT_NE(b.parameters()[0]->value, w->value);
}

// Apache License, Version 2.0, refer to LICENSE.txt

#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "dialectmix/errors.hpp"
#include "dialectmix/priors.hpp"
#include "dialectmix/tsv.hpp"
#include "test_util.hpp"

namespace dialectmix {
namespace {

const FeatureTable& features() {
  static const FeatureTable table = FeatureTable::load_default();
  return table;
}

TEST(SoftmaxPartitioned, ClosedForms) {
  const auto p = BlockPartition::from_sizes({2});
  auto s = softmax_partitioned(std::vector<double>{0, 0}, p);
  EXPECT_DOUBLE_EQ(s.values[0], 0.5);
  EXPECT_DOUBLE_EQ(s.values[1], 0.5);
  s = softmax_partitioned(std::vector<double>{1, 0}, p);
  EXPECT_NEAR(s.values[0], std::exp(1.0) / (1 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(s.values[1], 1 / (1 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(s.values[0], 0.7311, 1e-4);
}

TEST(SoftmaxPartitioned, BlocksAreIndependent) {
  const auto s = softmax_partitioned(std::vector<double>{0, 0, std::log(3.0), 0}, BlockPartition::from_sizes({2, 2}));
  EXPECT_NEAR(s.values[0], 0.5, 1e-15);
  EXPECT_NEAR(s.values[1], 0.5, 1e-15);
  EXPECT_NEAR(s.values[2], 0.75, 1e-15);
  EXPECT_NEAR(s.values[3], 0.25, 1e-15);
}

TEST(SoftmaxPartitioned, StableAndIdempotentThroughLog) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 30);
  const auto p = BlockPartition::from_sizes({2, 3, 4, 2});
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> latent(p.flat_size());
    for (auto& x : latent) x = n(rng);
    latent[0] = 800.0;  // overflow without max subtraction
    const auto s = softmax_partitioned(latent, p);
    for (std::size_t b = 0; b < p.num_blocks(); ++b) {
      double sum = 0;
      for (std::size_t i = p.offsets[b]; i < p.offsets[b + 1]; ++i) {
        ASSERT_GE(s.values[i], 0.0);
        ASSERT_LE(s.values[i], 1.0);
        sum += s.values[i];
      }
      ASSERT_NEAR(sum, 1.0, 1e-12);
    }
    std::vector<double> logs(s.values.size());
    for (std::size_t i = 0; i < logs.size(); ++i) logs[i] = std::log(std::max(s.values[i], 1e-300));
    const auto again = softmax_partitioned(logs, p);
    for (std::size_t i = 0; i < logs.size(); ++i) ASSERT_NEAR(again.values[i], s.values[i], 1e-12);

    auto inplace = latent;
    log_softmax_partitioned(inplace, p);
    for (std::size_t i = 0; i < logs.size(); ++i) {
      if (s.values[i] > 1e-300) { ASSERT_NEAR(std::exp(inplace[i]), s.values[i], 1e-12); }
    }
  }
}

// ---------------------------------------------------------------------------

TEST(FeatureMismatch, Examples) {
  const RewriteRule a{"t", "t", "a", "a"};
  EXPECT_EQ(feature_mismatch(a, a, features()), 0);
  EXPECT_DOUBLE_EQ(dissimilarity(a, a, features()), 1.0);
  // t and d differ in voicing only.
  const RewriteRule voiced{"t", "d", "a", "a"};
  EXPECT_EQ(feature_mismatch(a, voiced, features()), 1);
  EXPECT_NEAR(dissimilarity(a, voiced, features()), 0.3679, 1e-4);
  // Every feature differs in both terms.
  const RewriteRule x{"a", "a", "a", "a"};
  const RewriteRule y{"m", "t", "#", "#"};
  EXPECT_EQ(feature_mismatch(x, y, features()), 10);
  EXPECT_NEAR(dissimilarity(x, y, features()), 4.54e-5, 1e-7);
}

TEST(FeatureMismatch, SymmetricAndMissingSegmentNamed) {
  const RewriteRule a{"s", "h", "a", "#"}, b{"n", "ɳ", "i", "a"};
  EXPECT_EQ(feature_mismatch(a, b, features()), feature_mismatch(b, a, features()));
  EXPECT_GT(dissimilarity(RewriteRule{"t", "d", "a", "a"}, RewriteRule{"t", "t", "a", "a"}, features()),
            dissimilarity(a, b, features()));
  try {
    feature_mismatch(RewriteRule{"Q", "t", "a", "a"}, a, features());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("Q"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

ChangeCollection two_pair_collection() {
  // Pair 0 and pair 1 differ only in the right environment (a vs aː, manner).
  return ChangeCollection({{"t", "a", "a", {"d", "t"}, {6, 6}}, {"t", "a", "aː", {"d", "t"}, {6, 6}}});
}

TEST(Covariance, HandValues) {
  const auto sigma = covariance_matrix(two_pair_collection(), features());
  ASSERT_EQ(sigma.rows(), 4);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(sigma(i, i), 101.0);
  EXPECT_NEAR(sigma(0, 1), std::exp(-1.0), 1e-15);           // within pair, voicing
  EXPECT_NEAR(sigma(0, 2), 4 * std::exp(-1.0), 1e-15);       // across, environment manner
  EXPECT_NEAR(sigma(0, 2), 1.4715, 1e-4);
  EXPECT_NEAR(sigma(0, 3), 4 * std::exp(-2.0), 1e-15);       // voicing and environment
  EXPECT_EQ(sigma, sigma.transpose());
}

TEST(Covariance, BuildRepairsAndFactors) {
  const auto spec = build_covariance(two_pair_collection(), features());
  EXPECT_EQ(spec.dim(), 4u);
  EXPECT_GE(smallest_eigenvalue(spec.sigma), 1e-8);
  EXPECT_TRUE((spec.cholesky_lower * spec.cholesky_lower.transpose()).isApprox(spec.sigma, 1e-12));
  EXPECT_TRUE((spec.precision * spec.sigma).isIdentity(1e-10));
  EXPECT_NEAR(spec.log_det, std::log(spec.sigma.determinant()), 1e-9);
}

TEST(Covariance, RidgeRepairOnSingularMatrix) {
  Eigen::MatrixXd singular = Eigen::MatrixXd::Ones(3, 3);
  const auto spec = make_covariance_spec(singular, BlockPartition::from_sizes({3}));
  EXPECT_GT(spec.ridge, 0.0);
  EXPECT_GE(smallest_eigenvalue(spec.sigma), 1e-8);
  // Beyond the reach of the ridge schedule.
  Eigen::MatrixXd negative = -1e30 * Eigen::MatrixXd::Identity(2, 2);
  EXPECT_THROW(make_covariance_spec(negative, BlockPartition::from_sizes({2})), DataError);
}

TEST(Covariance, CacheRoundTripAndKeyMismatch) {
  testing::TempDir dir;
  const auto spec = build_covariance(two_pair_collection(), features());
  const auto path = dir / "cov.bin";
  save_covariance_cache(path, spec, "key-1");
  const auto back = load_covariance_cache(path, "key-1");
  ASSERT_TRUE(back);
  EXPECT_EQ(back->sigma, spec.sigma);
  EXPECT_EQ(back->precision, spec.precision);
  EXPECT_EQ(back->log_det, spec.log_det);
  EXPECT_EQ(back->partition, spec.partition);
  EXPECT_FALSE(load_covariance_cache(path, "key-2"));
  EXPECT_FALSE(load_covariance_cache(dir / "missing.bin", "key-1"));
  const auto k1 = covariance_cache_key(two_pair_collection(), data_file("features.tsv"), 4, 100);
  EXPECT_NE(k1, covariance_cache_key(two_pair_collection(), data_file("features.tsv"), 4, 101));
}

// ---------------------------------------------------------------------------

TEST(Dirichlet, ConcentrationLimit) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto v = sample_dirichlet(1e6, 2, rng);
    EXPECT_NEAR(v[0], 0.5, 0.01);
    EXPECT_NEAR(v[0] + v[1], 1.0, 1e-12);
  }
}

TEST(Dirichlet, SparseDrawsConcentrate) {
  Rng rng(4);
  double total = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto v = sample_dirichlet(0.01, 3, rng);
    double sum = 0;
    for (double x : v) {
      ASSERT_GE(x, 0.0);
      sum += x;
    }
    ASSERT_NEAR(sum, 1.0, 1e-12);
    total += *std::max_element(v.begin(), v.end());
  }
  EXPECT_GT(total / 1000, 0.95);
}

TEST(Dirichlet, LogGammaMatchesGammaMoments) {
  // E[X] = shape for X ~ Gamma(shape, 1), including tiny shapes.
  Rng rng(5);
  for (double shape : {0.05, 0.5, 3.0}) {
    double sum = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) sum += std::exp(sample_log_gamma(shape, rng));
    EXPECT_NEAR(sum / n, shape, 5 * std::sqrt(shape / n)) << shape;
  }
}

TEST(Dirichlet, UniformDensityIsZero) {
  CollectionSimplex s{{0.3, 0.7, 0.9, 0.1}, BlockPartition::from_sizes({2, 2})};
  EXPECT_NEAR(dirichlet_log_density(s, 1.0), 0.0, 1e-12);
  // Beta(2,2) at 0.3: density 6 * 0.3 * 0.7.
  CollectionSimplex one{{0.3, 0.7}, BlockPartition::from_sizes({2})};
  EXPECT_NEAR(dirichlet_log_density(one, 2.0), std::log(6 * 0.3 * 0.7), 1e-12);
  // Zeros are clamped rather than producing infinities.
  CollectionSimplex corner{{0.0, 1.0}, BlockPartition::from_sizes({2})};
  EXPECT_TRUE(std::isfinite(dirichlet_log_density(corner, 0.01)));
}

CovarianceSpec toy_spec() {
  Eigen::MatrixXd s(2, 2);
  s << 1.0, 0.5, 0.5, 2.0;
  return make_covariance_spec(s, BlockPartition::from_sizes({2}));
}

TEST(LogisticNormal, DensityAtMean) {
  const auto spec = toy_spec();
  const double expected = -0.5 * std::log((2 * std::numbers::pi * spec.sigma).determinant());
  EXPECT_NEAR(logistic_normal_log_density(std::vector<double>{0, 0}, spec), expected, 1e-12);
}

TEST(LogisticNormal, DensityMatchesClosedFormAndIntegratesToOne) {
  const auto spec = toy_spec();
  const double det = 1.0 * 2.0 - 0.25;
  auto direct = [&](double x, double y) {
    const double q = (2.0 * x * x - 2 * 0.5 * x * y + 1.0 * y * y) / det;
    return std::exp(-0.5 * q) / (2 * std::numbers::pi * std::sqrt(det));
  };
  EXPECT_NEAR(std::exp(logistic_normal_log_density(std::vector<double>{0.3, -1.2}, spec)), direct(0.3, -1.2),
              1e-14);
  // Trapezoid quadrature over +-10 sd.
  const double h = 0.02;
  double mass = 0;
  for (double x = -10; x <= 10 + 1e-9; x += h) {
    for (double y = -14.2; y <= 14.2 + 1e-9; y += h) {
      mass += std::exp(logistic_normal_log_density(std::vector<double>{x, y}, spec));
    }
  }
  EXPECT_NEAR(mass * h * h, 1.0, 1e-6);
}

TEST(LogisticNormal, IsotropicDrawsAreUniformOnAverage) {
  Eigen::MatrixXd s = 2.0 * Eigen::MatrixXd::Identity(5, 5);
  PriorSpec prior{PriorKind::kLogisticNormal, {},
                  std::make_shared<CovarianceSpec>(make_covariance_spec(s, BlockPartition::from_sizes({2, 3})))};
  Rng rng(6);
  std::vector<double> mean(5, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto draw = sample_collection(prior, prior.covariance->partition, rng);
    for (int k = 0; k < 5; ++k) mean[k] += draw.values[k] / n;
  }
  EXPECT_NEAR(mean[0], 0.5, 0.02);
  EXPECT_NEAR(mean[1], 0.5, 0.02);
  for (int k = 2; k < 5; ++k) EXPECT_NEAR(mean[k], 1.0 / 3, 0.02);
}

TEST(LogisticNormal, CrossBlockCovarianceLinksOutcomes) {
  Eigen::MatrixXd s = 100.0 * Eigen::MatrixXd::Identity(4, 4);
  s(0, 2) = s(2, 0) = 90.0;
  s(1, 3) = s(3, 1) = 90.0;
  PriorSpec prior{PriorKind::kLogisticNormal, {},
                  std::make_shared<CovarianceSpec>(make_covariance_spec(s, BlockPartition::from_sizes({2, 2})))};
  Rng rng(7);
  const int n = 10000;
  int a = 0, b = 0, both = 0;
  for (int i = 0; i < n; ++i) {
    const auto d = sample_collection(prior, prior.covariance->partition, rng);
    const bool x = d.values[0] > 0.9, y = d.values[2] > 0.9;
    a += x;
    b += y;
    both += x && y;
  }
  EXPECT_GE(double(both) / n - (double(a) / n) * (double(b) / n), 0.05);
}

TEST(PriorKind, Names) {
  EXPECT_EQ(parse_prior_kind("dirichlet"), PriorKind::kDirichlet);
  EXPECT_EQ(parse_prior_kind(to_string(PriorKind::kLogisticNormal)), PriorKind::kLogisticNormal);
  EXPECT_ANY_THROW(parse_prior_kind("gamma"));
}

}  // namespace
}  // namespace dialectmix

// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "dialectmix/changes.hpp"

namespace dialectmix {

using Rng = std::mt19937_64;

/// Block layout of a flat vector: block b covers [offsets[b], offsets[b+1]).
struct BlockPartition {
  std::vector<std::size_t> offsets{0};

  static BlockPartition from_collection(const ChangeCollection& collection);
  static BlockPartition from_sizes(const std::vector<std::size_t>& sizes);

  std::size_t num_blocks() const { return offsets.size() - 1; }
  std::size_t flat_size() const { return offsets.back(); }
  std::size_t block_size(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  friend bool operator==(const BlockPartition&, const BlockPartition&) = default;
};

/// Flat probabilities; each block is a simplex.
struct CollectionSimplex {
  std::vector<double> values;
  BlockPartition partition;
};

/// Blockwise softmax with max subtraction.
CollectionSimplex softmax_partitioned(std::span<const double> latent, const BlockPartition& partition);

/// In-place blockwise log-softmax.
void log_softmax_partitioned(std::span<double> values, const BlockPartition& partition);

// ---------------------------------------------------------------------------
// Features and dissimilarity

inline constexpr std::size_t kNumFeatures = 5;
using FeatureVector = std::array<std::string, kNumFeatures>;

/// Segment -> (consonance, place, manner, voicing, nasality). Rows for "#" and
/// the deletion token are expected. Nasalized vowels reuse their oral row
/// with nasality "nasal".
class FeatureTable {
 public:
  static FeatureTable load(const std::filesystem::path& path);
  static FeatureTable load_default();

  /// Throws DataError naming the segment when it has no row.
  FeatureVector features(const std::string& segment) const;

 private:
  std::unordered_map<std::string, FeatureVector> rows_;
};

/// Sum over the five features of f(source_a, source_b; reflex_a, reflex_b) +
/// f(left_a, left_b; right_a, right_b), each term 0 on a match and 1 otherwise.
/// Range [0, 10].
int feature_mismatch(const RewriteRule& a, const RewriteRule& b, const FeatureTable& features);

/// exp(-feature_mismatch).
double dissimilarity(const RewriteRule& a, const RewriteRule& b, const FeatureTable& features);

// ---------------------------------------------------------------------------
// Prior specifications

struct DirichletSpec {
  double alpha = 0.01;
};

struct CovarianceSpec {
  Eigen::MatrixXd sigma;           // repaired, symmetric positive definite
  Eigen::MatrixXd cholesky_lower;  // sigma = L L^T
  Eigen::MatrixXd precision;       // sigma^{-1}
  double log_det = 0.0;            // log det sigma
  double eta_dispersion = 4.0;
  double diag_sigma = 100.0;
  double ridge = 0.0;  // c added to the diagonal during repair (0 if none)
  BlockPartition partition;

  std::size_t dim() const { return static_cast<std::size_t>(sigma.rows()); }
};

/// Sigma before repair: delta within a pair, eta * delta across pairs, plus
/// diag_sigma on the diagonal.
Eigen::MatrixXd covariance_matrix(const ChangeCollection& collection, const FeatureTable& features,
                                  double eta_dispersion = 4.0, double diag_sigma = 100.0);

/// Adds the smallest ridge c*I (c = 1e-8, 2e-8, ...) for which the Cholesky
/// factorization succeeds and the smallest eigenvalue is at least 1e-8, then
/// factors. Throws DataError with the smallest eigenvalue if no ridge works.
CovarianceSpec make_covariance_spec(Eigen::MatrixXd sigma, BlockPartition partition,
                                    double eta_dispersion = 4.0, double diag_sigma = 100.0);

CovarianceSpec build_covariance(const ChangeCollection& collection, const FeatureTable& features,
                                double eta_dispersion = 4.0, double diag_sigma = 100.0);

double smallest_eigenvalue(const Eigen::MatrixXd& m);

/// Binary cache of a CovarianceSpec, keyed by a caller-supplied hash.
void save_covariance_cache(const std::filesystem::path& path, const CovarianceSpec& spec,
                           const std::string& key);
/// Returns nullptr if the file is missing, unreadable or keyed differently.
std::unique_ptr<CovarianceSpec> load_covariance_cache(const std::filesystem::path& path,
                                                      const std::string& key);

/// Cache key: hash of the collection JSON and the feature file contents.
std::string covariance_cache_key(const ChangeCollection& collection,
                                 const std::filesystem::path& feature_file, double eta_dispersion,
                                 double diag_sigma);

enum class PriorKind { kDirichlet, kLogisticNormal };

std::string to_string(PriorKind kind);
PriorKind parse_prior_kind(std::string_view name);

struct PriorSpec {
  PriorKind kind = PriorKind::kDirichlet;
  DirichletSpec dirichlet;
  std::shared_ptr<const CovarianceSpec> covariance;  // logistic normal only
};

/// Log of a Gamma(shape, 1) draw, stable for tiny shapes.
double sample_log_gamma(double shape, Rng& rng);

/// A Dirichlet(alpha) draw over one block of the given size.
std::vector<double> sample_dirichlet(double alpha, std::size_t size, Rng& rng);

/// Dirichlet branch: independent symmetric Dirichlet draw per block.
/// Logistic normal branch: one N(0, Sigma) draw, then softmax_partitioned.
CollectionSimplex sample_collection(const PriorSpec& prior, const BlockPartition& partition,
                                    Rng& rng);

/// Sum of blockwise Dirichlet(alpha) log densities. Values are clamped at
/// 1e-12 before taking logs.
double dirichlet_log_density(const CollectionSimplex& simplex, double alpha);

/// Log density of the pre-softmax latent vector under N(0, Sigma).
double logistic_normal_log_density(std::span<const double> latent, const CovarianceSpec& cov);

}  // namespace dialectmix

// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dialectmix/changes.hpp"
#include "dialectmix/model.hpp"
#include "dialectmix/priors.hpp"

namespace dialectmix {

/// P(z_i = k | theta, phi, word), from one jointly drawn sample.
struct AssignmentPosterior {
  std::size_t word_id = 0;
  std::vector<double> probs;
  bool fallback = false;  // every component had zero likelihood; probs uniform
};

AssignmentPosterior reconstruct_assignment(const WordObservation& word, const Eigen::MatrixXd& theta,
                                           const Eigen::MatrixXd& phi, const BlockPartition& partition);

/// Natural-log entropy of one simplex.
double entropy(std::span<const double> probs);
/// Entropy of the row-wise mean.
double entropy_of_averages(const std::vector<std::vector<double>>& rows);
/// Mean of the row entropies.
double average_of_entropies(const std::vector<std::vector<double>>& rows);

struct EntropyReport {
  std::vector<double> entropy_of_averages;  // per word
  std::vector<double> average_of_entropies;
};

/// For each of `iterations` sample indices drawn from the pooled traces,
/// reconstructs every word's assignment and reduces per word.
EntropyReport assignment_entropies(const ModelData& data, const std::vector<PosteriorTrace>& traces,
                                   std::size_t iterations, std::uint64_t seed, std::size_t threads = 1);

struct Histogram {
  double low = 0.0;
  double high = 1.0;
  std::vector<std::size_t> counts;
};

/// Equal-width bins over [low, high]; values outside are clamped into the end bins.
Histogram histogram(std::span<const double> values, std::size_t bins, double low, double high);

enum class PpcRegime { kFullPrior, kSparsePrior, kPosteriorNoAssignment, kPosteriorWithAssignment };

inline constexpr PpcRegime kAllRegimes[] = {PpcRegime::kFullPrior, PpcRegime::kSparsePrior,
                                            PpcRegime::kPosteriorNoAssignment,
                                            PpcRegime::kPosteriorWithAssignment};

std::string to_string(PpcRegime regime);
PpcRegime parse_regime(std::string_view name);

struct PpcConfig {
  std::size_t iterations = 100;
  PpcRegime regime = PpcRegime::kPosteriorWithAssignment;
  std::uint64_t seed = 1;
  double full_prior_beta_low = 1e-3;   // bounded stand-in for "uniform over positive reals"
  double full_prior_beta_high = 50.0;
  double sparse_prior_beta = 0.1;
  std::size_t threads = 1;
};

struct AccuracyReport {
  PpcRegime regime = PpcRegime::kPosteriorWithAssignment;
  std::size_t iterations = 0;
  std::vector<double> per_word;          // per observation, in data order
  std::vector<double> per_language;      // event-weighted, indexed by language
  std::vector<std::size_t> language_events;
  std::vector<double> per_distribution;  // per sound-environment pair
  std::vector<std::size_t> distribution_events;
  double overall_mean = 0.0;             // event-weighted
  double mean_per_word = 0.0;            // unweighted mean of per_word
  double beta_low = 0.0;                 // prior regimes: the beta range used
  double beta_high = 0.0;
};

/// Simulates each word's reflexes at its observed pairs under the regime and
/// scores agreement with the observed reflexes. Prior regimes draw beta,
/// theta and phi from the model's prior; posterior regimes draw one pooled
/// trace sample per iteration. `traces` may be empty for prior regimes.
AccuracyReport simulate_and_score(const ModelData& data, const std::vector<PosteriorTrace>& traces,
                                  const PriorSpec& prior, std::size_t num_components,
                                  const PpcConfig& config);

/// Uniform permutation of language labels over words; events untouched.
std::vector<WordObservation> shuffle_languages(const std::vector<WordObservation>& words, Rng& rng);

struct ZTest {
  double z = 0.0;
  double p = 0.5;  // upper tail
};

/// Unequal-variance z for mean(shuffled) - mean(real). Throws DataError on
/// empty input or zero pooled variance.
ZTest beta_z_test(std::span<const double> beta_real, std::span<const double> beta_shuffled);

struct ShuffleReport {
  std::vector<double> beta_real;
  std::vector<std::vector<double>> beta_shuffled;
  std::vector<ZTest> tests;
  std::vector<std::size_t> failed_chains;  // per shuffle

  std::size_t n_shuffles() const { return beta_shuffled.size(); }
};

/// Pooled beta samples of the successful chains.
std::vector<double> pooled_beta(const std::vector<PosteriorTrace>& traces);

/// Refits the model on `n_shuffles` language-shuffled copies of the data and
/// tests each against `beta_real`.
ShuffleReport shuffle_test(const ModelData& data, const ModelConfig& config, std::size_t n_shuffles,
                           std::uint64_t seed, std::vector<double> beta_real);

// ---------------------------------------------------------------------------
// Reports

nlohmann::json accuracy_to_json(const AccuracyReport& report, const std::vector<std::string>& languages,
                                const ChangeCollection& collection);
nlohmann::json entropy_to_json(const EntropyReport& report, std::size_t bins = 20);
nlohmann::json shuffle_to_json(const ShuffleReport& report);

/// One row per language, one column per labelled report.
std::string per_language_csv(const std::vector<std::pair<std::string, const AccuracyReport*>>& columns,
                             const std::vector<std::string>& languages);
/// One row per sound-environment pair (rule written as "source / left _ right").
std::string per_distribution_csv(const std::vector<std::pair<std::string, const AccuracyReport*>>& columns,
                                 const ChangeCollection& collection);

}  // namespace dialectmix

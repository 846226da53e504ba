// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "dialectmix/changes.hpp"
#include "dialectmix/priors.hpp"

namespace dialectmix {

/// Mixed-membership dialect model: K components, each a collection of reflex
/// distributions (phi); per-language component weights theta ~ Dirichlet(beta);
/// each word drawn whole from one component. The word's component is
/// marginalized during fitting.
struct ModelConfig {
  std::size_t num_components = 2;
  PriorSpec prior;
  std::size_t n_chains = 4;
  std::size_t minibatch = 500;  // clamped to the number of words
  double learning_rate = 0.01;
  double moment_weight_low = 0.7;  // Adam beta1 drawn per chain from [low, high]
  double moment_weight_high = 0.8;
  double second_moment_weight = 0.999;
  double adam_epsilon = 1e-8;
  std::optional<std::size_t> steps;  // unset: epochs * ceil(N / minibatch)
  std::size_t epochs = 50;
  std::size_t mc_samples = 4;
  std::size_t trace_samples = 500;
  std::uint64_t seed = 20190601;
  double log_beta_prior_sd = 2.0;  // log beta ~ Normal(0, sd^2)
  double init_log_sd = -1.0;
  double log_sd_floor = -12.0;
  std::size_t early_stop_window = 500;
  double early_stop_tolerance = 1e-4;  // relative improvement of the moving average
  std::size_t divergence_patience = 100;
  std::size_t threads = 1;

  /// Throws DataError on an invalid configuration.
  void validate() const;
  std::size_t effective_minibatch(std::size_t num_words) const;
  std::size_t effective_steps(std::size_t num_words) const;
};

/// Everything the likelihood needs: the observations and the block layout
/// of the reflex collection.
struct ModelData {
  std::vector<WordObservation> words;
  BlockPartition partition;
  std::size_t num_languages = 0;

  std::size_t num_words() const { return words.size(); }
};

/// One draw of the constrained parameters.
struct LatentState {
  double beta = 1.0;
  Eigen::MatrixXd theta;  // L x K, rows on the simplex
  Eigen::MatrixXd phi;    // K x S, each row a CollectionSimplex
};

/// log theta[l][k] + sum_j log phi[k][slot(x_ij, y_ij)]. Zero probabilities
/// give -infinity.
double word_loglik_given_component(const WordObservation& word, std::size_t k,
                                   const Eigen::MatrixXd& theta, const Eigen::MatrixXd& phi,
                                   const BlockPartition& partition);

/// log sum_k exp(word_loglik_given_component).
double marginal_word_loglik(const WordObservation& word, const Eigen::MatrixXd& theta,
                            const Eigen::MatrixXd& phi, const BlockPartition& partition);

/// Numerically stable log(sum(exp(values))); -inf for all -inf inputs.
double log_sum_exp(std::span<const double> values);

/// Layout of the unconstrained parameter vector:
///   [0]              log beta
///   [theta block]    L x (K-1) additive log-ratio coordinates (last = 0)
///   [phi block]      K x D_phi, where D_phi = S (logistic normal latent) or
///                    sum over blocks of (size - 1) (additive log-ratio)
class ParameterLayout {
 public:
  ParameterLayout(std::size_t num_languages, std::size_t num_components,
                  const BlockPartition& partition, PriorKind kind);

  std::size_t size() const { return total_; }
  std::size_t theta_offset() const { return 1; }
  std::size_t phi_offset(std::size_t k) const { return phi_offset_ + k * phi_dim_; }
  std::size_t phi_dim() const { return phi_dim_; }
  /// Start of block b inside one component's phi coordinates.
  std::size_t phi_block_offset(std::size_t b) const { return block_offsets_[b]; }
  std::size_t num_languages() const { return languages_; }
  std::size_t num_components() const { return components_; }
  PriorKind kind() const { return kind_; }
  const BlockPartition& partition() const { return partition_; }

 private:
  std::size_t languages_;
  std::size_t components_;
  BlockPartition partition_;
  PriorKind kind_;
  std::size_t phi_offset_ = 0;
  std::size_t phi_dim_ = 0;
  std::vector<std::size_t> block_offsets_;
  std::size_t total_ = 0;
};

/// Log joint density of the data and the unconstrained parameters (including
/// the log-Jacobian of the simplex transforms), with its analytic gradient.
class LogJoint {
 public:
  LogJoint(const ModelData& data, const ModelConfig& config);

  const ParameterLayout& layout() const { return layout_; }
  const ModelData& data() const { return *data_; }

  /// Evaluates over the words in `batch`, scaling the likelihood by `scale`
  /// (N / |batch| for an unbiased minibatch estimate). grad must have
  /// layout().size() entries and is overwritten.
  double evaluate(std::span<const double> params, std::span<const std::size_t> batch, double scale,
                  std::span<double> grad) const;

  /// Value only.
  double evaluate(std::span<const double> params, std::span<const std::size_t> batch,
                  double scale) const;

  LatentState constrain(std::span<const double> params) const;

 private:
  const ModelData* data_;
  const ModelConfig* config_;
  ParameterLayout layout_;
};

/// Mean-field Gaussian over the unconstrained parameters plus Adam state.
struct VariationalState {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_sd;
  Eigen::VectorXd adam_m;  // first moments, mean then log_sd
  Eigen::VectorXd adam_v;
  std::size_t step = 0;
  double moment_weight = 0.75;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

VariationalState init_variational_state(std::size_t dim, const ModelConfig& config, Rng& rng);

struct ElboGradient {
  double elbo = 0.0;
  Eigen::VectorXd grad_mean;
  Eigen::VectorXd grad_log_sd;
};

/// Entropy of the mean-field Gaussian.
double gaussian_entropy(const Eigen::VectorXd& log_sd);

/// Reparameterized ELBO estimate and gradient over the given standard normal
/// noise draws (one vector per Monte Carlo sample).
ElboGradient elbo_gradient(const VariationalState& state, const LogJoint& model,
                           std::span<const std::size_t> batch, double scale,
                           const std::vector<Eigen::VectorXd>& noise);

/// Same noise, value only; used for finite-difference checks.
double elbo_value(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_sd,
                  const LogJoint& model, std::span<const std::size_t> batch, double scale,
                  const std::vector<Eigen::VectorXd>& noise);

struct StepOutcome {
  double elbo = 0.0;
  bool accepted = true;
};

/// One stochastic step: draws mc_samples noise vectors, estimates the ELBO
/// gradient and applies an Adam ascent update. A non-finite gradient rejects
/// the step and applies the log-sd floor.
StepOutcome elbo_step(VariationalState& state, const LogJoint& model,
                      std::span<const std::size_t> batch, const ModelConfig& config, Rng& rng);

struct PosteriorTrace {
  std::size_t chain_id = 0;
  std::vector<LatentState> samples;
  std::vector<double> elbo_history;
};

struct ChainResult {
  VariationalState state;
  PosteriorTrace trace;
  bool failed = false;
  bool early_stopped = false;
  std::size_t steps_run = 0;
  std::size_t rejected_steps = 0;
};

/// Draws samples from the fitted variational distribution.
std::vector<LatentState> sample_variational(const VariationalState& state, const LogJoint& model,
                                            std::size_t count, Rng& rng);

/// Runs one optimization from a seeded initialization.
ChainResult fit_chain(const ModelData& data, const ModelConfig& config, std::size_t chain_id);

/// Runs config.n_chains independent chains (in parallel up to config.threads).
std::vector<ChainResult> fit(const ModelData& data, const ModelConfig& config);

/// Permutation applied to each trace by align_component_labels.
using ComponentPermutation = std::vector<std::size_t>;

/// Relabels components of every trace after the first to minimize the
/// relative entropy between its mean theta and the first trace's mean theta.
/// perm[k] is the old label that becomes label k.
std::vector<PosteriorTrace> align_component_labels(const std::vector<PosteriorTrace>& traces,
                                                   std::vector<ComponentPermutation>* perms = nullptr);

Eigen::MatrixXd mean_theta(const PosteriorTrace& trace);
Eigen::MatrixXd mean_phi(const PosteriorTrace& trace);

struct RhatValue {
  double value = 1.0;
  bool degenerate = false;  // zero within-chain variance
};

/// Gelman-Rubin potential scale reduction for one scalar, chains of equal length.
RhatValue gelman_rubin(const std::vector<std::vector<double>>& chains);

struct ConvergenceReport {
  RhatValue rhat_beta;
  std::vector<RhatValue> rhat_theta;  // L*K, row-major
  std::vector<RhatValue> rhat_phi;    // K*S, row-major
  std::size_t theta_below = 0;        // count with R-hat < 1.1
  std::size_t phi_below = 0;
};

ConvergenceReport rhat(const std::vector<PosteriorTrace>& traces, double threshold = 1.1);

// ---------------------------------------------------------------------------
// Files

/// One JSON object per sample: chain_id, beta, theta (rows), phi (rows).
std::string traces_to_jsonl(const std::vector<PosteriorTrace>& traces);
/// Groups samples by chain_id, in order of first appearance. Throws FormatError.
std::vector<PosteriorTrace> traces_from_jsonl(std::string_view text);

/// "step,chain,elbo" rows.
std::string elbo_history_csv(const std::vector<PosteriorTrace>& traces);
/// Restores elbo_history into traces matched by chain_id.
void read_elbo_history_csv(std::string_view text, std::vector<PosteriorTrace>& traces);

/// Posterior means and 95% intervals for beta, theta and phi, plus the R-hat
/// table. Expects aligned traces.
nlohmann::json summarize_fit(const std::vector<PosteriorTrace>& aligned,
                             const ConvergenceReport& convergence);

}  // namespace dialectmix

// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>

#include "dialectmix/errors.hpp"

namespace dialectmix {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Poles and overflow give non-finite values, which reject the step.
using NoThrowPolicy = boost::math::policies::policy<
    boost::math::policies::pole_error<boost::math::policies::ignore_error>,
    boost::math::policies::overflow_error<boost::math::policies::ignore_error>,
    boost::math::policies::domain_error<boost::math::policies::ignore_error>,
    boost::math::policies::evaluation_error<boost::math::policies::ignore_error>>;

double digamma(double x) { return boost::math::digamma(x, NoThrowPolicy()); }

double checked_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

// Writes log-softmax of (v[0..n-2], 0) into out[0..n-1].
void alr_log_softmax(const double* v, std::size_t n, double* out) {
  double mx = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) mx = std::max(mx, v[i]);
  double sum = std::exp(-mx);
  for (std::size_t i = 0; i + 1 < n; ++i) sum += std::exp(v[i] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i + 1 < n; ++i) out[i] = v[i] - lse;
  out[n - 1] = -lse;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_components < 2) throw DataError("K must be at least 2");
  if (n_chains < 1) throw DataError("n_chains must be positive");
  if (minibatch < 1) throw DataError("minibatch must be positive");
  if (!(learning_rate > 0.0)) throw DataError("learning_rate must be positive");
  if (!(moment_weight_low > 0.0 && moment_weight_high < 1.0 && moment_weight_low <= moment_weight_high)) {
    throw DataError("moment weight range must lie inside (0, 1)");
  }
  if (!(second_moment_weight > 0.0 && second_moment_weight < 1.0)) {
    throw DataError("second moment weight must lie inside (0, 1)");
  }
  if (mc_samples < 1) throw DataError("mc_samples must be positive");
  if (trace_samples < 1) throw DataError("trace_samples must be positive");
  if (!(log_beta_prior_sd > 0.0)) throw DataError("log_beta_prior_sd must be positive");
  if (early_stop_window < 1) throw DataError("early_stop_window must be positive");
  if (threads < 1) throw DataError("threads must be positive");
  if (prior.kind == PriorKind::kDirichlet && !(prior.dirichlet.alpha > 0.0)) {
    throw DataError("alpha must be positive");
  }
  if (prior.kind == PriorKind::kLogisticNormal && !prior.covariance) {
    throw DataError("logistic normal prior needs a covariance");
  }
}

std::size_t ModelConfig::effective_minibatch(std::size_t num_words) const {
  return std::max<std::size_t>(1, std::min(minibatch, num_words));
}

std::size_t ModelConfig::effective_steps(std::size_t num_words) const {
  if (steps) return *steps;
  const auto b = effective_minibatch(num_words);
  return epochs * ((num_words + b - 1) / b);
}

// ---------------------------------------------------------------------------

double log_sum_exp(std::span<const double> values) {
  double mx = kNegInf;
  for (double v : values) mx = std::max(mx, v);
  if (mx == kNegInf) return kNegInf;
  if (std::isinf(mx)) return mx;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

double word_loglik_given_component(const WordObservation& word, std::size_t k,
                                   const Eigen::MatrixXd& theta, const Eigen::MatrixXd& phi,
                                   const BlockPartition& partition) {
  double out = checked_log(theta(static_cast<Eigen::Index>(word.language), static_cast<Eigen::Index>(k)));
  for (const auto& e : word.events) {
    const auto slot = partition.offsets[e.pair] + e.reflex;
    out += checked_log(phi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(slot)));
  }
  return out;
}

double marginal_word_loglik(const WordObservation& word, const Eigen::MatrixXd& theta,
                            const Eigen::MatrixXd& phi, const BlockPartition& partition) {
  std::vector<double> terms(static_cast<std::size_t>(theta.cols()));
  for (std::size_t k = 0; k < terms.size(); ++k) {
    terms[k] = word_loglik_given_component(word, k, theta, phi, partition);
  }
  return log_sum_exp(terms);
}

// ---------------------------------------------------------------------------

ParameterLayout::ParameterLayout(std::size_t num_languages, std::size_t num_components,
                                 const BlockPartition& partition, PriorKind kind)
    : languages_(num_languages), components_(num_components), partition_(partition), kind_(kind) {
  phi_offset_ = 1 + languages_ * (components_ - 1);
  block_offsets_.resize(partition_.num_blocks() + 1, 0);
  for (std::size_t b = 0; b < partition_.num_blocks(); ++b) {
    const auto width = kind_ == PriorKind::kDirichlet ? partition_.block_size(b) - 1
                                                      : partition_.block_size(b);
    block_offsets_[b + 1] = block_offsets_[b] + width;
  }
  phi_dim_ = block_offsets_.back();
  total_ = phi_offset_ + components_ * phi_dim_;
}

LogJoint::LogJoint(const ModelData& data, const ModelConfig& config)
    : data_(&data),
      config_(&config),
      layout_(data.num_languages, config.num_components, data.partition, config.prior.kind) {
  for (std::size_t b = 0; b < data.partition.num_blocks(); ++b) {
    if (data.partition.block_size(b) < 2) throw DataError("every reflex block needs at least two slots");
  }
  if (config.prior.kind == PriorKind::kLogisticNormal &&
      config.prior.covariance->dim() != data.partition.flat_size()) {
    throw DataError("covariance dimension does not match the collection");
  }
  for (const auto& w : data.words) {
    if (w.language >= data.num_languages) throw DataError("observation language out of range");
    for (const auto& e : w.events) {
      if (e.pair >= data.partition.num_blocks() || e.reflex >= data.partition.block_size(e.pair)) {
        throw DataError("observation event out of range");
      }
    }
  }
}

double LogJoint::evaluate(std::span<const double> params, std::span<const std::size_t> batch,
                          double scale) const {
  std::vector<double> scratch(layout_.size());
  return evaluate(params, batch, scale, scratch);
}

double LogJoint::evaluate(std::span<const double> z, std::span<const std::size_t> batch, double scale,
                          std::span<double> grad) const {
  const auto L = layout_.num_languages();
  const auto K = layout_.num_components();
  const auto& part = layout_.partition();
  const auto S = part.flat_size();
  const auto kind = layout_.kind();
  std::fill(grad.begin(), grad.end(), 0.0);

  // log beta ~ Normal(0, sd^2)
  const double u = z[0];
  const double beta = std::exp(u);
  const double sd = config_->log_beta_prior_sd;
  double lp = -0.5 * u * u / (sd * sd) - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
  grad[0] = -u / (sd * sd);

  // theta: Dirichlet(beta) plus the log-ratio Jacobian, beta * sum log theta.
  std::vector<double> log_theta(L * K);
  std::vector<double> g_theta(L * K, 0.0);  // d/d log theta
  for (std::size_t l = 0; l < L; ++l) {
    alr_log_softmax(&z[layout_.theta_offset() + l * (K - 1)], K, &log_theta[l * K]);
  }
  double sum_log_theta = 0.0;
  for (double v : log_theta) sum_log_theta += v;
  const double Kd = static_cast<double>(K);
  lp += static_cast<double>(L) * (std::lgamma(Kd * beta) - Kd * std::lgamma(beta)) + beta * sum_log_theta;
  grad[0] += beta * (static_cast<double>(L) * Kd *
                         (digamma(Kd * beta) - digamma(beta)) +
                     sum_log_theta);
  for (auto& g : g_theta) g = beta;

  // phi
  std::vector<double> log_phi(K * S);
  std::vector<double> g_phi(K * S, 0.0);  // d/d log phi
  for (std::size_t k = 0; k < K; ++k) {
    const double* latent = &z[layout_.phi_offset(k)];
    double* out = &log_phi[k * S];
    if (kind == PriorKind::kDirichlet) {
      for (std::size_t b = 0; b < part.num_blocks(); ++b) {
        alr_log_softmax(latent + layout_.phi_block_offset(b), part.block_size(b), out + part.offsets[b]);
      }
    } else {
      std::copy(latent, latent + S, out);
      log_softmax_partitioned(std::span<double>(out, S), part);
    }
  }
  if (kind == PriorKind::kDirichlet) {
    const double alpha = config_->prior.dirichlet.alpha;
    double block_const = 0.0;
    for (std::size_t b = 0; b < part.num_blocks(); ++b) {
      const double m = static_cast<double>(part.block_size(b));
      block_const += std::lgamma(m * alpha) - m * std::lgamma(alpha);
    }
    double sum_log_phi = 0.0;
    for (double v : log_phi) sum_log_phi += v;
    lp += Kd * block_const + alpha * sum_log_phi;
    for (auto& g : g_phi) g = alpha;
  } else {
    const auto& cov = *config_->prior.covariance;
    const double norm = -0.5 * (static_cast<double>(S) * std::log(2.0 * std::numbers::pi) + cov.log_det);
    for (std::size_t k = 0; k < K; ++k) {
      Eigen::Map<const Eigen::VectorXd> eta(&z[layout_.phi_offset(k)], static_cast<Eigen::Index>(S));
      const Eigen::VectorXd p_eta = cov.precision * eta;
      lp += norm - 0.5 * eta.dot(p_eta);
      Eigen::Map<Eigen::VectorXd> g(&grad[layout_.phi_offset(k)], static_cast<Eigen::Index>(S));
      g -= p_eta;
    }
  }

  // Likelihood, component marginalized.
  std::vector<double> a(K);
  const auto& words = data_->words;
  for (std::size_t i : batch) {
    const auto& w = words[i];
    for (std::size_t k = 0; k < K; ++k) {
      double v = log_theta[w.language * K + k];
      for (const auto& e : w.events) v += log_phi[k * S + part.offsets[e.pair] + e.reflex];
      a[k] = v;
    }
    const double lse = log_sum_exp(a);
    lp += scale * lse;
    for (std::size_t k = 0; k < K; ++k) {
      const double r = scale * std::exp(a[k] - lse);
      g_theta[w.language * K + k] += r;
      for (const auto& e : w.events) g_phi[k * S + part.offsets[e.pair] + e.reflex] += r;
    }
  }

  // Back through the softmaxes: d/dv_m = g_m - p_m * sum(g).
  for (std::size_t l = 0; l < L; ++l) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += g_theta[l * K + k];
    for (std::size_t k = 0; k + 1 < K; ++k) {
      grad[layout_.theta_offset() + l * (K - 1) + k] +=
          g_theta[l * K + k] - std::exp(log_theta[l * K + k]) * total;
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    double* g = &grad[layout_.phi_offset(k)];
    for (std::size_t b = 0; b < part.num_blocks(); ++b) {
      const auto lo = part.offsets[b];
      const auto n = part.block_size(b);
      double total = 0.0;
      for (std::size_t r = 0; r < n; ++r) total += g_phi[k * S + lo + r];
      const auto width = kind == PriorKind::kDirichlet ? n - 1 : n;
      const auto dst = kind == PriorKind::kDirichlet ? layout_.phi_block_offset(b) : lo;
      for (std::size_t r = 0; r < width; ++r) {
        g[dst + r] += g_phi[k * S + lo + r] - std::exp(log_phi[k * S + lo + r]) * total;
      }
    }
  }
  return lp;
}

LatentState LogJoint::constrain(std::span<const double> z) const {
  const auto L = layout_.num_languages();
  const auto K = layout_.num_components();
  const auto& part = layout_.partition();
  const auto S = part.flat_size();
  LatentState s;
  s.beta = std::exp(z[0]);
  s.theta.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(K));
  std::vector<double> buf(std::max(K, S));
  for (std::size_t l = 0; l < L; ++l) {
    alr_log_softmax(&z[layout_.theta_offset() + l * (K - 1)], K, buf.data());
    for (std::size_t k = 0; k < K; ++k) {
      s.theta(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = std::exp(buf[k]);
    }
  }
  s.phi.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(S));
  for (std::size_t k = 0; k < K; ++k) {
    const double* latent = &z[layout_.phi_offset(k)];
    if (layout_.kind() == PriorKind::kDirichlet) {
      for (std::size_t b = 0; b < part.num_blocks(); ++b) {
        alr_log_softmax(latent + layout_.phi_block_offset(b), part.block_size(b), &buf[part.offsets[b]]);
      }
    } else {
      std::copy(latent, latent + S, buf.begin());
      log_softmax_partitioned(std::span<double>(buf.data(), S), part);
    }
    for (std::size_t j = 0; j < S; ++j) {
      s.phi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = std::exp(buf[j]);
    }
  }
  return s;
}

}  // namespace dialectmix

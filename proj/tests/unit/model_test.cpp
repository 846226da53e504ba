// Apache License, Version 2.0, refer to LICENSE.txt

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "dialectmix/errors.hpp"
#include "dialectmix/model.hpp"
#include "dialectmix/synthetic.hpp"

namespace dialectmix {
namespace {

// Two languages, four words, three reflex blocks.
ModelData toy_data() {
  ModelData d;
  d.partition = BlockPartition::from_sizes({2, 3, 2});
  d.num_languages = 2;
  d.words = {{0, 0, {{0, 0}, {1, 2}}}, {1, 0, {{1, 0}}}, {2, 1, {{0, 1}, {2, 0}, {1, 1}}}, {3, 1, {{2, 1}}}};
  return d;
}

ModelConfig dirichlet_config() {
  ModelConfig c;
  c.prior.kind = PriorKind::kDirichlet;
  c.prior.dirichlet.alpha = 0.5;
  return c;
}

ModelConfig logistic_config(const BlockPartition& p) {
  ModelConfig c;
  c.prior.kind = PriorKind::kLogisticNormal;
  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(7, 7) * 2.0;
  s(0, 3) = s(3, 0) = 0.7;
  s(2, 5) = s(5, 2) = -0.4;
  c.prior.covariance = std::make_shared<CovarianceSpec>(make_covariance_spec(s, p));
  return c;
}

Eigen::MatrixXd random_simplex_rows(Eigen::Index rows, const BlockPartition& p, Rng& rng) {
  Eigen::MatrixXd m(rows, static_cast<Eigen::Index>(p.flat_size()));
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (std::size_t b = 0; b < p.num_blocks(); ++b) {
      double sum = 0;
      for (auto i = p.offsets[b]; i < p.offsets[b + 1]; ++i) sum += m(r, static_cast<Eigen::Index>(i)) = u(rng);
      for (auto i = p.offsets[b]; i < p.offsets[b + 1]; ++i) m(r, static_cast<Eigen::Index>(i)) /= sum;
    }
  }
  return m;
}

TEST(WordLikelihood, SingleFactor) {
  const auto p = BlockPartition::from_sizes({2});
  Eigen::MatrixXd theta(1, 2), phi(2, 2);
  theta << 0.5, 0.5;
  phi << 1.0, 0.0, 0.0, 1.0;
  const WordObservation w{0, 0, {{0, 0}}};
  EXPECT_DOUBLE_EQ(word_loglik_given_component(w, 0, theta, phi, p), std::log(0.5));
  EXPECT_EQ(word_loglik_given_component(w, 1, theta, phi, p), -std::numeric_limits<double>::infinity());
  EXPECT_DOUBLE_EQ(marginal_word_loglik(w, theta, phi, p), std::log(0.5));
}

TEST(WordLikelihood, ProductRule) {
  const auto p = BlockPartition::from_sizes({2, 2});
  Eigen::MatrixXd theta(1, 2), phi(2, 4);
  theta << 1.0, 0.0;
  phi << 0.5, 0.5, 0.5, 0.5, 0.9, 0.1, 0.9, 0.1;
  const WordObservation w{0, 0, {{0, 1}, {1, 0}}};
  EXPECT_DOUBLE_EQ(word_loglik_given_component(w, 0, theta, phi, p), std::log(0.25));
  EXPECT_DOUBLE_EQ(marginal_word_loglik(w, theta, phi, p), std::log(0.25));
}

TEST(WordLikelihood, ComponentIndifferentWord) {
  const auto p = BlockPartition::from_sizes({2});
  Eigen::MatrixXd theta(1, 2), phi(2, 2);
  theta << 0.3, 0.7;
  phi << 0.2, 0.8, 0.2, 0.8;
  const WordObservation w{0, 0, {{0, 1}}};
  EXPECT_NEAR(marginal_word_loglik(w, theta, phi, p), std::log(0.8), 1e-15);
}

TEST(WordLikelihood, MarginalizationIsExact) {
  Rng rng(1);
  std::uniform_int_distribution<std::size_t> blocks(1, 4), size(2, 4), events(1, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::size_t> sizes(blocks(rng));
    for (auto& s : sizes) s = size(rng);
    const auto p = BlockPartition::from_sizes(sizes);
    const auto theta = random_simplex_rows(3, BlockPartition::from_sizes({2}), rng);
    const auto phi = random_simplex_rows(2, p, rng);
    WordObservation w{0, std::uniform_int_distribution<std::size_t>(0, 2)(rng), {}};
    for (auto j = events(rng); j > 0; --j) {
      const auto b = std::uniform_int_distribution<std::size_t>(0, sizes.size() - 1)(rng);
      w.events.push_back({b, std::uniform_int_distribution<std::size_t>(0, sizes[b] - 1)(rng)});
    }
    double direct = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      double prod = theta(static_cast<Eigen::Index>(w.language), static_cast<Eigen::Index>(k));
      for (const auto& e : w.events) prod *= phi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p.offsets[e.pair] + e.reflex));
      direct += prod;
    }
    ASSERT_NEAR(std::exp(marginal_word_loglik(w, theta, phi, p)), direct, 1e-10);
    double summed = 0;
    for (std::size_t k = 0; k < 2; ++k) summed += std::exp(word_loglik_given_component(w, k, theta, phi, p));
    ASSERT_NEAR(std::exp(marginal_word_loglik(w, theta, phi, p)), summed, 1e-10);
  }
}

TEST(LogSumExp, EdgeCases) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(log_sum_exp(std::vector<double>{-inf, -inf}), -inf);
  EXPECT_NEAR(log_sum_exp(std::vector<double>{1000, 1000}), 1000 + std::log(2.0), 1e-12);
  EXPECT_NEAR(log_sum_exp(std::vector<double>{-inf, 0.5}), 0.5, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(ParameterLayout, Sizes) {
  const auto p = BlockPartition::from_sizes({2, 3, 2});
  const ParameterLayout dir(2, 2, p, PriorKind::kDirichlet);
  EXPECT_EQ(dir.phi_dim(), 4u);
  EXPECT_EQ(dir.size(), 1u + 2u + 2u * 4u);
  EXPECT_EQ(dir.phi_block_offset(2), 3u);
  const ParameterLayout ln(2, 3, p, PriorKind::kLogisticNormal);
  EXPECT_EQ(ln.phi_dim(), 7u);
  EXPECT_EQ(ln.size(), 1u + 2u * 2u + 3u * 7u);
  EXPECT_EQ(ln.phi_offset(1), 1u + 4u + 7u);
}

TEST(LogJoint, ConstrainedValuesAreValid) {
  const auto data = toy_data();
  for (const auto& cfg : {dirichlet_config(), logistic_config(data.partition)}) {
    const LogJoint model(data, cfg);
    Rng rng(2);
    std::normal_distribution<double> n(0, 3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> z(model.layout().size());
      for (auto& x : z) x = n(rng);
      const auto s = model.constrain(z);
      EXPECT_NEAR(s.beta, std::exp(z[0]), 1e-12);
      EXPECT_EQ(s.theta.rows(), 2);
      EXPECT_EQ(s.phi.cols(), 7);
      for (Eigen::Index l = 0; l < 2; ++l) EXPECT_NEAR(s.theta.row(l).sum(), 1.0, 1e-12);
      for (Eigen::Index k = 0; k < 2; ++k) {
        for (std::size_t b = 0; b < 3; ++b) {
          double sum = 0;
          for (auto i = data.partition.offsets[b]; i < data.partition.offsets[b + 1]; ++i) {
            sum += s.phi(k, static_cast<Eigen::Index>(i));
          }
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
      }
      EXPECT_GT(s.theta.minCoeff(), 0.0);
      EXPECT_GE(s.phi.minCoeff(), 0.0);
    }
  }
}

TEST(LogJoint, GradientMatchesFiniteDifferences) {
  const auto data = toy_data();
  for (const auto& cfg : {dirichlet_config(), logistic_config(data.partition)}) {
    const LogJoint model(data, cfg);
    Rng rng(3);
    std::normal_distribution<double> n(0, 1);
    const std::vector<std::size_t> batch{0, 1, 2, 3};
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> z(model.layout().size());
      for (auto& x : z) x = n(rng);
      std::vector<double> grad(z.size());
      model.evaluate(z, batch, 1.7, grad);
      for (std::size_t i = 0; i < z.size(); ++i) {
        auto up = z, down = z;
        const double h = 1e-5;
        up[i] += h;
        down[i] -= h;
        const double fd = (model.evaluate(up, batch, 1.7) - model.evaluate(down, batch, 1.7)) / (2 * h);
        ASSERT_NEAR(grad[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
      }
    }
  }
}

TEST(LogJoint, LikelihoodIsLinearInScale) {
  const auto data = toy_data();
  const auto cfg = dirichlet_config();
  const LogJoint model(data, cfg);
  std::vector<double> z(model.layout().size(), 0.2);
  const std::vector<std::size_t> all{0, 1, 2, 3}, half{0, 2};
  const double f0 = model.evaluate(z, all, 0.0);
  const double f1 = model.evaluate(z, all, 1.0);
  const double f2 = model.evaluate(z, all, 2.0);
  EXPECT_NEAR(f2 - f1, f1 - f0, 1e-10);
  // A batch with the multiplier N/|B| estimates the full-data likelihood:
  // averaging the two halves' estimates recovers it exactly.
  const std::vector<std::size_t> other{1, 3};
  const double full = f1 - f0;
  const double est = 0.5 * ((model.evaluate(z, half, 2.0) - f0) + (model.evaluate(z, other, 2.0) - f0));
  EXPECT_NEAR(est, full, 1e-10);
}

TEST(LogJoint, RejectsMismatchedData) {
  auto data = toy_data();
  data.words[0].events[0].reflex = 5;
  const auto cfg = dirichlet_config();
  EXPECT_THROW(LogJoint(data, cfg), DataError);
}

// ---------------------------------------------------------------------------

std::vector<Eigen::VectorXd> noise(std::size_t dim, std::size_t count, Rng& rng) {
  std::normal_distribution<double> n(0, 1);
  std::vector<Eigen::VectorXd> out;
  for (std::size_t s = 0; s < count; ++s) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
    for (auto& x : v) x = n(rng);
    out.push_back(v);
  }
  return out;
}

TEST(Elbo, EntropyGradientIsOne) {
  const auto data = toy_data();
  const auto cfg = dirichlet_config();
  const LogJoint model(data, cfg);
  Rng rng(4);
  auto state = init_variational_state(model.layout().size(), cfg, rng);
  // Zero noise removes the log-joint path through the standard deviations.
  const std::vector<Eigen::VectorXd> zero(3, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(state.dim())));
  const auto g = elbo_gradient(state, model, std::vector<std::size_t>{0, 1, 2, 3}, 1.0, zero);
  for (Eigen::Index i = 0; i < g.grad_log_sd.size(); ++i) EXPECT_EQ(g.grad_log_sd[i], 1.0);
  Eigen::VectorXd ls = Eigen::VectorXd::Constant(5, -0.3);
  const double base = gaussian_entropy(ls);
  ls[2] += 1e-3;
  EXPECT_NEAR((gaussian_entropy(ls) - base) / 1e-3, 1.0, 1e-12);
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  const auto data = toy_data();
  for (const auto& cfg : {dirichlet_config(), logistic_config(data.partition)}) {
    const LogJoint model(data, cfg);
    Rng rng(5);
    auto state = init_variational_state(model.layout().size(), cfg, rng);
    std::normal_distribution<double> n(0, 0.5);
    for (auto& x : state.mean) x = n(rng);
    for (auto& x : state.log_sd) x = -1 + n(rng);
    const auto eps = noise(state.dim(), 4, rng);
    const std::vector<std::size_t> batch{1, 2};
    const auto g = elbo_gradient(state, model, batch, 2.0, eps);
    EXPECT_NEAR(g.elbo, elbo_value(state.mean, state.log_sd, model, batch, 2.0, eps), 1e-12);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < state.mean.size(); ++i) {
      auto up = state.mean, down = state.mean;
      up[i] += h;
      down[i] -= h;
      const double fd = (elbo_value(up, state.log_sd, model, batch, 2.0, eps) -
                         elbo_value(down, state.log_sd, model, batch, 2.0, eps)) / (2 * h);
      ASSERT_NEAR(g.grad_mean[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "mean " << i;
      auto lup = state.log_sd, ldown = state.log_sd;
      lup[i] += h;
      ldown[i] -= h;
      const double fdl = (elbo_value(state.mean, lup, model, batch, 2.0, eps) -
                          elbo_value(state.mean, ldown, model, batch, 2.0, eps)) / (2 * h);
      ASSERT_NEAR(g.grad_log_sd[i], fdl, 1e-4 * std::max(1.0, std::abs(fdl))) << "log sd " << i;
    }
  }
}

TEST(Elbo, NonFiniteGradientRejectsStepAndFloorsLogSd) {
  const auto data = toy_data();
  const auto cfg = dirichlet_config();
  const LogJoint model(data, cfg);
  Rng rng(6);
  auto state = init_variational_state(model.layout().size(), cfg, rng);
  state.mean[1] = std::numeric_limits<double>::quiet_NaN();
  state.log_sd[2] = -40.0;
  const auto before_m = state.adam_m;
  const auto out = elbo_step(state, model, std::vector<std::size_t>{0, 1}, cfg, rng);
  EXPECT_FALSE(out.accepted);
  EXPECT_EQ(state.step, 0u);
  EXPECT_EQ(state.adam_m, before_m);
  EXPECT_EQ(state.log_sd[2], cfg.log_sd_floor);
}

TEST(Elbo, MomentWeightDrawnFromRange) {
  auto cfg = dirichlet_config();
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto s = init_variational_state(3, cfg, rng);
    EXPECT_GE(s.moment_weight, cfg.moment_weight_low);
    EXPECT_LE(s.moment_weight, cfg.moment_weight_high);
    EXPECT_EQ(s.mean, Eigen::VectorXd::Zero(3));
    EXPECT_EQ(s.log_sd, Eigen::VectorXd::Constant(3, cfg.init_log_sd));
  }
}

// ---------------------------------------------------------------------------

TEST(ModelConfig, DefaultsAndSchedule) {
  const ModelConfig c;
  EXPECT_EQ(c.n_chains, 4u);
  EXPECT_EQ(c.minibatch, 500u);
  EXPECT_EQ(c.num_components, 2u);
  EXPECT_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.mc_samples, 4u);
  EXPECT_EQ(c.trace_samples, 500u);
  EXPECT_EQ(c.effective_minibatch(120), 120u);
  EXPECT_EQ(c.effective_minibatch(9000), 500u);
  EXPECT_EQ(c.effective_steps(1001), 50u * 3u);
  ModelConfig zero;
  zero.steps = 0;
  EXPECT_EQ(zero.effective_steps(1001), 0u);
  ModelConfig bad;
  bad.moment_weight_high = 1.0;
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(Fit, ZeroStepsSamplesTheInitialization) {
  const auto data = toy_data();
  auto cfg = dirichlet_config();
  cfg.steps = 0;
  cfg.trace_samples = 4000;
  const auto r = fit_chain(data, cfg, 0);
  EXPECT_EQ(r.steps_run, 0u);
  EXPECT_TRUE(r.trace.elbo_history.empty());
  ASSERT_EQ(r.trace.samples.size(), 4000u);
  double mean = 0, sq = 0;
  for (const auto& s : r.trace.samples) {
    const double u = std::log(s.beta);
    mean += u;
    sq += u * u;
  }
  mean /= 4000;
  const double sd = std::sqrt(sq / 4000 - mean * mean);
  const double expected_sd = std::exp(cfg.init_log_sd);
  EXPECT_NEAR(mean, 0.0, 4 * expected_sd / std::sqrt(4000.0));
  EXPECT_NEAR(sd, expected_sd, 0.05 * expected_sd);
}

TEST(Fit, DeterministicAcrossRunsAndThreads) {
  const auto data = toy_data();
  auto cfg = dirichlet_config();
  cfg.steps = 300;
  cfg.n_chains = 3;
  cfg.trace_samples = 20;
  const auto a = fit(data, cfg);
  cfg.threads = 3;
  const auto b = fit(data, cfg);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(a[c].trace.elbo_history, b[c].trace.elbo_history);
    EXPECT_EQ(a[c].state.mean, b[c].state.mean);
    EXPECT_EQ(a[c].trace.chain_id, c);
    EXPECT_EQ(a[c].trace.samples.front().theta, b[c].trace.samples.front().theta);
  }
  EXPECT_NE(a[0].trace.elbo_history, a[1].trace.elbo_history);
}

TEST(Fit, DivergentChainIsMarkedFailed) {
  const auto data = toy_data();
  auto cfg = dirichlet_config();
  cfg.learning_rate = 1e300;
  cfg.steps = 5000;
  cfg.n_chains = 2;
  const auto results = fit(data, cfg);
  for (const auto& r : results) {
    EXPECT_TRUE(r.failed);
    EXPECT_LT(r.steps_run, 5000u);
    EXPECT_TRUE(r.trace.samples.empty());
  }
}

TEST(Fit, EarlyStopOnFlatObjective) {
  const auto data = toy_data();
  auto cfg = dirichlet_config();
  cfg.steps = 100000;
  cfg.early_stop_window = 50;
  cfg.early_stop_tolerance = 1e6;  // any window counts as flat
  const auto r = fit_chain(data, cfg, 0);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.steps_run, 100u);
}

SyntheticCorpus small_synthetic(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_languages = 10;
  spec.words_per_language = 120;
  spec.num_pairs = 20;
  Rng rng(seed);
  return simulate_corpus(spec, rng);
}

TEST(Fit, SparseSyntheticDataGivesSmallBetaAndImprovesElbo) {
  const auto syn = small_synthetic(8);
  ModelConfig cfg;
  cfg.trace_samples = 200;
  cfg.steps = 3000;
  const auto results = fit(syn.data, cfg);
  for (const auto& r : results) {
    ASSERT_FALSE(r.failed);
    double beta = 0;
    for (const auto& s : r.trace.samples) beta += s.beta / static_cast<double>(r.trace.samples.size());
    EXPECT_LT(beta, 1.0) << "chain " << r.trace.chain_id;
    const auto& h = r.trace.elbo_history;
    const auto tenth = h.size() / 10;
    const double first = std::accumulate(h.begin(), h.begin() + static_cast<long>(tenth), 0.0) / double(tenth);
    const double last = std::accumulate(h.end() - static_cast<long>(tenth), h.end(), 0.0) / double(tenth);
    EXPECT_GT(last, first);
  }
}

// ---------------------------------------------------------------------------

PosteriorTrace trace_with_theta(std::size_t id, std::vector<std::pair<double, double>> rows, double jitter, Rng& rng) {
  PosteriorTrace t;
  t.chain_id = id;
  std::normal_distribution<double> n(0, jitter);
  for (int s = 0; s < 50; ++s) {
    LatentState st;
    st.beta = 0.2 + std::abs(n(rng));
    st.theta.resize(static_cast<Eigen::Index>(rows.size()), 2);
    for (std::size_t l = 0; l < rows.size(); ++l) {
      const double a = std::clamp(rows[l].first + n(rng), 0.01, 0.99);
      st.theta(static_cast<Eigen::Index>(l), 0) = a;
      st.theta(static_cast<Eigen::Index>(l), 1) = 1 - a;
    }
    st.phi.resize(2, 2);
    st.phi << 0.9, 0.1, 0.2, 0.8;
    t.samples.push_back(st);
  }
  return t;
}

PosteriorTrace swapped(const PosteriorTrace& t, std::size_t id) {
  auto out = t;
  out.chain_id = id;
  for (auto& s : out.samples) {
    s.theta.col(0).swap(s.theta.col(1));
    s.phi.row(0).swap(s.phi.row(1));
  }
  return out;
}

TEST(LabelAlignment, IdentityAndSwap) {
  Rng rng(9);
  const auto ref = trace_with_theta(0, {{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}}, 0.02, rng);
  std::vector<ComponentPermutation> perms;
  const auto aligned = align_component_labels({ref, ref, swapped(ref, 2)}, &perms);
  EXPECT_EQ(perms[1], (ComponentPermutation{0, 1}));
  EXPECT_EQ(perms[2], (ComponentPermutation{1, 0}));
  EXPECT_NEAR((mean_theta(aligned[2]) - mean_theta(ref)).norm(), 0.0, 1e-15);
  EXPECT_NEAR((mean_phi(aligned[2]) - mean_phi(ref)).norm(), 0.0, 1e-15);
  EXPECT_THROW(align_component_labels({ref}), DataError);
}

TEST(LabelAlignment, IdempotentAndPermutationOnly) {
  Rng rng(10);
  const auto a = trace_with_theta(0, {{0.8, 0.2}, {0.3, 0.7}}, 0.05, rng);
  const auto b = swapped(trace_with_theta(1, {{0.75, 0.25}, {0.35, 0.65}}, 0.05, rng), 1);
  const auto c = trace_with_theta(2, {{0.7, 0.3}, {0.2, 0.8}}, 0.05, rng);
  const auto once = align_component_labels({a, b, c});
  std::vector<ComponentPermutation> perms;
  const auto twice = align_component_labels(once, &perms);
  for (const auto& p : perms) EXPECT_EQ(p, (ComponentPermutation{0, 1}));
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(mean_theta(twice[t]), mean_theta(once[t]));

  // Marginal likelihoods per sample are unchanged by relabeling.
  const auto p = BlockPartition::from_sizes({2});
  const WordObservation w{0, 1, {{0, 1}}};
  const std::vector<PosteriorTrace> before{a, b, c};
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t s = 0; s < before[t].samples.size(); ++s) {
      const auto& x = before[t].samples[s];
      const auto& y = once[t].samples[s];
      EXPECT_NEAR(marginal_word_loglik(w, x.theta, x.phi, p), marginal_word_loglik(w, y.theta, y.phi, p), 1e-14);
    }
  }
}

TEST(Rhat, HandComputed) {
  // Means 2 and 5, within variance 1, n = 3: pooled = 2/3 + 4.5.
  const auto r = gelman_rubin({{1, 2, 3}, {4, 5, 6}});
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.value, std::sqrt(2.0 / 3.0 + 4.5), 1e-14);
}

TEST(Rhat, IdenticalChainsAreDegenerate) {
  const auto r = gelman_rubin({{2, 2, 2}, {2, 2, 2}});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 1.0);
}

TEST(Rhat, SameDistributionBelowThresholdDisjointAbove) {
  Rng rng(11);
  std::normal_distribution<double> n(0, 1);
  int below = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> chains(4, std::vector<double>(500));
    for (auto& c : chains) {
      for (auto& x : c) x = n(rng);
    }
    below += gelman_rubin(chains).value < 1.1;
  }
  EXPECT_EQ(below, 200);
  std::vector<std::vector<double>> disjoint(2, std::vector<double>(500));
  for (auto& x : disjoint[0]) x = n(rng);
  for (auto& x : disjoint[1]) x = 10 + n(rng);
  EXPECT_GT(gelman_rubin(disjoint).value, 3.0);
  EXPECT_THROW(gelman_rubin({{1, 2}, {1, 2, 3}}), DataError);
}

TEST(Rhat, ReportCountsParameters) {
  Rng rng(12);
  const auto a = trace_with_theta(0, {{0.8, 0.2}, {0.3, 0.7}}, 0.05, rng);
  const auto b = trace_with_theta(1, {{0.8, 0.2}, {0.3, 0.7}}, 0.05, rng);
  const auto report = rhat({a, b});
  EXPECT_EQ(report.rhat_theta.size(), 4u);
  EXPECT_EQ(report.rhat_phi.size(), 4u);
  EXPECT_EQ(report.theta_below, 4u);
  EXPECT_EQ(report.phi_below, 4u);  // constant phi: degenerate, reported as 1
  EXPECT_TRUE(report.rhat_phi[0].degenerate);
}

// ---------------------------------------------------------------------------

TEST(TraceFiles, JsonlAndCsvRoundTrip) {
  Rng rng(13);
  std::vector<PosteriorTrace> traces{trace_with_theta(0, {{0.8, 0.2}}, 0.05, rng),
                                     trace_with_theta(3, {{0.4, 0.6}}, 0.05, rng)};
  traces[0].elbo_history = {-10.5, -9.25};
  traces[1].elbo_history = {-11.0, -8.0, -7.5};
  auto back = traces_from_jsonl(traces_to_jsonl(traces));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].chain_id, 3u);
  for (std::size_t t = 0; t < 2; ++t) {
    ASSERT_EQ(back[t].samples.size(), traces[t].samples.size());
    for (std::size_t s = 0; s < back[t].samples.size(); ++s) {
      EXPECT_EQ(back[t].samples[s].beta, traces[t].samples[s].beta);
      EXPECT_EQ(back[t].samples[s].theta, traces[t].samples[s].theta);
      EXPECT_EQ(back[t].samples[s].phi, traces[t].samples[s].phi);
    }
  }
  read_elbo_history_csv(elbo_history_csv(traces), back);
  EXPECT_EQ(back[0].elbo_history, traces[0].elbo_history);
  EXPECT_EQ(back[1].elbo_history, traces[1].elbo_history);
  EXPECT_THROW(traces_from_jsonl("{\"chain_id\":0}\n"), FormatError);
}

TEST(TraceFiles, SummaryContents) {
  Rng rng(14);
  std::vector<PosteriorTrace> traces{trace_with_theta(0, {{0.8, 0.2}}, 0.05, rng),
                                     trace_with_theta(1, {{0.8, 0.2}}, 0.05, rng)};
  const auto j = summarize_fit(traces, rhat(traces));
  const double mean = j.at("beta").at("mean").get<double>();
  EXPECT_GT(mean, j.at("beta").at("q025").get<double>());
  EXPECT_LT(mean, j.at("beta").at("q975").get<double>());
  EXPECT_EQ(j.at("chains").size(), 2u);
  EXPECT_EQ(j.at("rhat").at("theta").at("total").get<std::size_t>(), 2u);
}

}  // namespace
}  // namespace dialectmix

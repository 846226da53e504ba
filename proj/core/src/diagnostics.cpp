// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "dialectmix/errors.hpp"

namespace dialectmix {

namespace {

Rng iteration_rng(std::uint64_t seed, std::size_t iteration, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), stream};
  return Rng(seq);
}

// Runs body(t, acc) for t in [0, n); each worker owns one accumulator, and the
// accumulators are merged in worker order.
template <typename Acc>
Acc parallel_reduce(std::size_t n, std::size_t threads, const Acc& zero,
                    const std::function<void(std::size_t, Acc&)>& body,
                    const std::function<void(Acc&, const Acc&)>& merge) {
  const auto workers = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<Acc> partial(workers, zero);
  if (workers == 1) {
    for (std::size_t t = 0; t < n; ++t) body(t, partial[0]);
    return partial[0];
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (auto t = next++; t < n; t = next++) body(t, partial[w]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Acc out = zero;
  for (const auto& p : partial) merge(out, p);
  return out;
}

std::size_t draw_index(std::span<const double> weights, Rng& rng) {
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return i;
  }
  return weights.size() - 1;
}

std::vector<const LatentState*> pool_samples(const std::vector<PosteriorTrace>& traces) {
  std::vector<const LatentState*> out;
  for (const auto& t : traces) {
    for (const auto& s : t.samples) out.push_back(&s);
  }
  if (out.empty()) throw DataError("posterior regimes need at least one trace sample");
  return out;
}

std::string rule_label(const SoundEnvPair& p) { return p.source + " / " + p.left + " _ " + p.right; }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

AssignmentPosterior reconstruct_assignment(const WordObservation& word, const Eigen::MatrixXd& theta,
                                           const Eigen::MatrixXd& phi, const BlockPartition& partition) {
  const auto K = static_cast<std::size_t>(theta.cols());
  AssignmentPosterior out;
  out.word_id = word.word_id;
  std::vector<double> terms(K);
  for (std::size_t k = 0; k < K; ++k) terms[k] = word_loglik_given_component(word, k, theta, phi, partition);
  const double lse = log_sum_exp(terms);
  out.probs.resize(K);
  if (!std::isfinite(lse)) {
    std::fill(out.probs.begin(), out.probs.end(), 1.0 / static_cast<double>(K));
    out.fallback = true;
    return out;
  }
  for (std::size_t k = 0; k < K; ++k) out.probs[k] = std::exp(terms[k] - lse);
  return out;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double entropy_of_averages(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DataError("entropy of averages needs at least one row");
  std::vector<double> mean(rows[0].size(), 0.0);
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += r[k];
  }
  for (auto& m : mean) m /= static_cast<double>(rows.size());
  return entropy(mean);
}

double average_of_entropies(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DataError("average of entropies needs at least one row");
  double total = 0.0;
  for (const auto& r : rows) total += entropy(r);
  return total / static_cast<double>(rows.size());
}

EntropyReport assignment_entropies(const ModelData& data, const std::vector<PosteriorTrace>& traces,
                                   std::size_t iterations, std::uint64_t seed, std::size_t threads) {
  if (iterations < 1) throw DataError("iterations must be at least 1");
  const auto samples = pool_samples(traces);
  const auto N = data.num_words();
  // Sample indices are fixed up front so that the result does not depend on
  // the thread count.
  std::vector<std::size_t> picks(iterations);
  Rng rng = iteration_rng(seed, 0, 0x656eu);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  for (auto& p : picks) p = pick(rng);

  std::vector<std::vector<std::vector<double>>> rows(N, std::vector<std::vector<double>>(iterations));
  parallel_reduce<int>(
      iterations, threads, 0,
      [&](std::size_t t, int&) {
        const auto& s = *samples[picks[t]];
        for (std::size_t i = 0; i < N; ++i) {
          rows[i][t] = reconstruct_assignment(data.words[i], s.theta, s.phi, data.partition).probs;
        }
      },
      [](int&, const int&) {});

  EntropyReport out;
  out.entropy_of_averages.reserve(N);
  out.average_of_entropies.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    out.entropy_of_averages.push_back(entropy_of_averages(rows[i]));
    out.average_of_entropies.push_back(average_of_entropies(rows[i]));
  }
  return out;
}

Histogram histogram(std::span<const double> values, std::size_t bins, double low, double high) {
  if (bins < 1 || !(high > low)) throw DataError("histogram needs bins >= 1 and high > low");
  Histogram h{low, high, std::vector<std::size_t>(bins, 0)};
  const double width = (high - low) / static_cast<double>(bins);
  for (double v : values) {
    auto b = static_cast<long long>(std::floor((v - low) / width));
    b = std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

std::string to_string(PpcRegime regime) {
  switch (regime) {
    case PpcRegime::kFullPrior: return "full_prior";
    case PpcRegime::kSparsePrior: return "sparse_prior";
    case PpcRegime::kPosteriorNoAssignment: return "posterior_no_assignment";
    case PpcRegime::kPosteriorWithAssignment: return "posterior_with_assignment";
  }
  return "unknown";
}

PpcRegime parse_regime(std::string_view name) {
  for (auto r : kAllRegimes) {
    if (to_string(r) == name) return r;
  }
  throw DataError("unknown PPC regime '" + std::string(name) + "'");
}

AccuracyReport simulate_and_score(const ModelData& data, const std::vector<PosteriorTrace>& traces,
                                  const PriorSpec& prior, std::size_t num_components,
                                  const PpcConfig& config) {
  if (config.iterations < 1) throw DataError("PPC iterations must be at least 1");
  if (num_components < 2) throw DataError("K must be at least 2");
  const bool posterior = config.regime == PpcRegime::kPosteriorNoAssignment ||
                         config.regime == PpcRegime::kPosteriorWithAssignment;
  std::vector<const LatentState*> samples;
  if (posterior) samples = pool_samples(traces);
  if (!posterior && prior.kind == PriorKind::kLogisticNormal && !prior.covariance) {
    throw DataError("logistic normal prior regime needs a covariance");
  }
  if (config.regime == PpcRegime::kFullPrior && !(config.full_prior_beta_high > config.full_prior_beta_low &&
                                                  config.full_prior_beta_low > 0.0)) {
    throw DataError("full prior beta range must satisfy 0 < low < high");
  }

  const auto N = data.num_words();
  const auto P = data.partition.num_blocks();
  const auto K = num_components;
  struct Acc {
    std::vector<std::uint64_t> word;
    std::vector<std::uint64_t> dist;
  };
  const Acc zero{std::vector<std::uint64_t>(N, 0), std::vector<std::uint64_t>(P, 0)};

  auto body = [&](std::size_t t, Acc& acc) {
    Rng rng = iteration_rng(config.seed, t, 0x7070u);
    Eigen::MatrixXd theta_draw;
    Eigen::MatrixXd phi_draw;
    const Eigen::MatrixXd* theta = nullptr;
    const Eigen::MatrixXd* phi = nullptr;
    if (posterior) {
      const auto idx = std::uniform_int_distribution<std::size_t>(0, samples.size() - 1)(rng);
      theta = &samples[idx]->theta;
      phi = &samples[idx]->phi;
    } else {
      const double beta = config.regime == PpcRegime::kFullPrior
                              ? std::uniform_real_distribution<double>(config.full_prior_beta_low,
                                                                       config.full_prior_beta_high)(rng)
                              : config.sparse_prior_beta;
      theta_draw.resize(static_cast<Eigen::Index>(data.num_languages), static_cast<Eigen::Index>(K));
      for (std::size_t l = 0; l < data.num_languages; ++l) {
        const auto row = sample_dirichlet(beta, K, rng);
        for (std::size_t k = 0; k < K; ++k) theta_draw(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = row[k];
      }
      phi_draw.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(data.partition.flat_size()));
      for (std::size_t k = 0; k < K; ++k) {
        const auto draw = sample_collection(prior, data.partition, rng);
        for (std::size_t s = 0; s < draw.values.size(); ++s) {
          phi_draw(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(s)) = draw.values[s];
        }
      }
      theta = &theta_draw;
      phi = &phi_draw;
    }

    std::vector<double> weights(K);
    std::vector<double> block;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& w = data.words[i];
      if (config.regime == PpcRegime::kPosteriorWithAssignment) {
        weights = reconstruct_assignment(w, *theta, *phi, data.partition).probs;
      } else {
        for (std::size_t k = 0; k < K; ++k) weights[k] = (*theta)(static_cast<Eigen::Index>(w.language), static_cast<Eigen::Index>(k));
      }
      const auto z = draw_index(weights, rng);
      for (const auto& e : w.events) {
        const auto lo = data.partition.offsets[e.pair];
        block.resize(data.partition.block_size(e.pair));
        for (std::size_t r = 0; r < block.size(); ++r) block[r] = (*phi)(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(lo + r));
        if (draw_index(block, rng) == e.reflex) {
          ++acc.word[i];
          ++acc.dist[e.pair];
        }
      }
    }
  };
  auto merge = [](Acc& into, const Acc& from) {
    for (std::size_t i = 0; i < into.word.size(); ++i) into.word[i] += from.word[i];
    for (std::size_t p = 0; p < into.dist.size(); ++p) into.dist[p] += from.dist[p];
  };
  const Acc total = parallel_reduce<Acc>(config.iterations, config.threads, zero, body, merge);

  AccuracyReport out;
  out.regime = config.regime;
  out.iterations = config.iterations;
  if (config.regime == PpcRegime::kFullPrior) {
    out.beta_low = config.full_prior_beta_low;
    out.beta_high = config.full_prior_beta_high;
  } else if (config.regime == PpcRegime::kSparsePrior) {
    out.beta_low = out.beta_high = config.sparse_prior_beta;
  }
  const double T = static_cast<double>(config.iterations);
  std::vector<std::uint64_t> lang_correct(data.num_languages, 0);
  out.language_events.assign(data.num_languages, 0);
  out.distribution_events.assign(P, 0);
  std::uint64_t all_correct = 0;
  std::size_t all_events = 0;
  out.per_word.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const auto& w = data.words[i];
    const auto J = w.events.size();
    out.per_word[i] = static_cast<double>(total.word[i]) / (static_cast<double>(J) * T);
    lang_correct[w.language] += total.word[i];
    out.language_events[w.language] += J;
    for (const auto& e : w.events) ++out.distribution_events[e.pair];
    all_correct += total.word[i];
    all_events += J;
  }
  out.per_language.resize(data.num_languages);
  for (std::size_t l = 0; l < data.num_languages; ++l) {
    out.per_language[l] = out.language_events[l] == 0
                              ? std::nan("")
                              : static_cast<double>(lang_correct[l]) / (static_cast<double>(out.language_events[l]) * T);
  }
  out.per_distribution.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    out.per_distribution[p] = out.distribution_events[p] == 0
                                  ? std::nan("")
                                  : static_cast<double>(total.dist[p]) / (static_cast<double>(out.distribution_events[p]) * T);
  }
  out.overall_mean = all_events == 0 ? 0.0 : static_cast<double>(all_correct) / (static_cast<double>(all_events) * T);
  out.mean_per_word = N == 0 ? 0.0 : std::accumulate(out.per_word.begin(), out.per_word.end(), 0.0) / static_cast<double>(N);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<WordObservation> shuffle_languages(const std::vector<WordObservation>& words, Rng& rng) {
  std::vector<std::size_t> labels;
  labels.reserve(words.size());
  for (const auto& w : words) labels.push_back(w.language);
  std::shuffle(labels.begin(), labels.end(), rng);
  auto out = words;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].language = labels[i];
  return out;
}

ZTest beta_z_test(std::span<const double> real, std::span<const double> shuffled) {
  if (real.empty() || shuffled.empty()) throw DataError("z-test needs non-empty sample sets");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, x.size() > 1 ? ss / (n - 1.0) : 0.0};
  };
  const auto [mr, vr] = moments(real);
  const auto [ms, vs] = moments(shuffled);
  const double se2 = vr / static_cast<double>(real.size()) + vs / static_cast<double>(shuffled.size());
  if (!(se2 > 0.0)) throw DataError("z-test: zero pooled variance");
  ZTest out;
  out.z = (ms - mr) / std::sqrt(se2);
  out.p = 0.5 * std::erfc(out.z / std::sqrt(2.0));
  return out;
}

std::vector<double> pooled_beta(const std::vector<PosteriorTrace>& traces) {
  std::vector<double> out;
  for (const auto& t : traces) {
    for (const auto& s : t.samples) out.push_back(s.beta);
  }
  return out;
}

ShuffleReport shuffle_test(const ModelData& data, const ModelConfig& config, std::size_t n_shuffles,
                           std::uint64_t seed, std::vector<double> beta_real) {
  if (n_shuffles < 1) throw DataError("n_shuffles must be at least 1");
  ShuffleReport report;
  report.beta_real = std::move(beta_real);
  for (std::size_t s = 0; s < n_shuffles; ++s) {
    Rng rng = iteration_rng(seed, s, 0x7368u);
    ModelData shuffled{shuffle_languages(data.words, rng), data.partition, data.num_languages};
    ModelConfig c = config;
    c.seed = config.seed + 7919 * (s + 1);
    const auto chains = fit(shuffled, c);
    std::vector<PosteriorTrace> traces;
    std::size_t failed = 0;
    for (const auto& ch : chains) {
      if (ch.failed) {
        ++failed;
      } else {
        traces.push_back(ch.trace);
      }
    }
    if (traces.empty()) throw InferenceError("every chain failed on shuffle " + std::to_string(s));
    report.beta_shuffled.push_back(pooled_beta(traces));
    report.failed_chains.push_back(failed);
    report.tests.push_back(beta_z_test(report.beta_real, report.beta_shuffled.back()));
  }
  return report;
}

// ---------------------------------------------------------------------------

nlohmann::json accuracy_to_json(const AccuracyReport& r, const std::vector<std::string>& languages,
                                const ChangeCollection& collection) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json per_language = nlohmann::json::object();
  for (std::size_t l = 0; l < r.per_language.size(); ++l) {
    const auto name = l < languages.size() ? languages[l] : std::to_string(l);
    per_language[name] = {{"accuracy", num(r.per_language[l])}, {"events", r.language_events[l]}};
  }
  nlohmann::json per_distribution = nlohmann::json::array();
  for (std::size_t p = 0; p < r.per_distribution.size(); ++p) {
    const auto label = p < collection.num_pairs() ? rule_label(collection.pairs()[p]) : std::to_string(p);
    per_distribution.push_back(
        {{"pair", label}, {"accuracy", num(r.per_distribution[p])}, {"events", r.distribution_events[p]}});
  }
  nlohmann::json j{{"regime", to_string(r.regime)},
                   {"iterations", r.iterations},
                   {"overall_mean", r.overall_mean},
                   {"mean_per_word", r.mean_per_word},
                   {"per_language", per_language},
                   {"per_distribution", per_distribution}};
  if (r.regime == PpcRegime::kFullPrior || r.regime == PpcRegime::kSparsePrior) {
    j["beta_range"] = {r.beta_low, r.beta_high};
  }
  return j;
}

nlohmann::json entropy_to_json(const EntropyReport& report, std::size_t bins) {
  const double high = std::log(2.0);
  auto hist = [&](const std::vector<double>& v) {
    const auto h = histogram(v, bins, 0.0, high);
    return nlohmann::json{{"low", h.low}, {"high", h.high}, {"counts", h.counts}};
  };
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  return {{"entropy_of_averages", {{"mean", mean(report.entropy_of_averages)}, {"histogram", hist(report.entropy_of_averages)}}},
          {"average_of_entropies", {{"mean", mean(report.average_of_entropies)}, {"histogram", hist(report.average_of_entropies)}}}};
}

nlohmann::json shuffle_to_json(const ShuffleReport& report) {
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  nlohmann::json shuffles = nlohmann::json::array();
  for (std::size_t s = 0; s < report.n_shuffles(); ++s) {
    shuffles.push_back({{"beta_mean", mean(report.beta_shuffled[s])},
                        {"samples", report.beta_shuffled[s].size()},
                        {"failed_chains", report.failed_chains[s]},
                        {"z", report.tests[s].z},
                        {"p", report.tests[s].p}});
  }
  return {{"n_shuffles", report.n_shuffles()},
          {"beta_real_mean", mean(report.beta_real)},
          {"beta_real_samples", report.beta_real.size()},
          {"shuffles", shuffles}};
}

std::string per_language_csv(const std::vector<std::pair<std::string, const AccuracyReport*>>& columns,
                             const std::vector<std::string>& languages) {
  std::ostringstream os;
  os.precision(6);
  os << "language";
  for (const auto& [label, _] : columns) os << ',' << csv_field(label);
  os << '\n';
  for (std::size_t l = 0; l < languages.size(); ++l) {
    os << csv_field(languages[l]);
    for (const auto& [_, r] : columns) {
      os << ',';
      if (l < r->per_language.size() && !std::isnan(r->per_language[l])) os << r->per_language[l];
    }
    os << '\n';
  }
  return os.str();
}

std::string per_distribution_csv(const std::vector<std::pair<std::string, const AccuracyReport*>>& columns,
                                 const ChangeCollection& collection) {
  std::ostringstream os;
  os.precision(6);
  os << "rule";
  for (const auto& [label, _] : columns) os << ',' << csv_field(label);
  os << '\n';
  for (std::size_t p = 0; p < collection.num_pairs(); ++p) {
    os << csv_field(rule_label(collection.pairs()[p]));
    for (const auto& [_, r] : columns) {
      os << ',';
      if (p < r->per_distribution.size() && !std::isnan(r->per_distribution[p])) os << r->per_distribution[p];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace dialectmix

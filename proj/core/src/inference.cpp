// Apache License, Version 2.0, refer to LICENSE.txt

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "dialectmix/errors.hpp"
#include "dialectmix/model.hpp"

namespace dialectmix {

namespace {

Rng chain_rng(std::uint64_t seed, std::size_t chain_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain_id), 0x6d78u};
  return Rng(seq);
}

Eigen::VectorXd standard_normal(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd e(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = normal(rng);
  return e;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

nlohmann::json interval(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return {{"mean", mean}, {"q025", quantile(v, 0.025)}, {"q975", quantile(v, 0.975)}};
}

nlohmann::json matrix_rows(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd rows_matrix(const nlohmann::json& rows) {
  const auto n = rows.size();
  const auto m = n == 0 ? 0 : rows.at(0).size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (std::size_t r = 0; r < n; ++r) {
    if (rows.at(r).size() != m) throw FormatError("trace: ragged matrix");
    for (std::size_t c = 0; c < m; ++c) {
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows.at(r).at(c).get<double>();
    }
  }
  return out;
}

}  // namespace

VariationalState init_variational_state(std::size_t dim, const ModelConfig& config, Rng& rng) {
  VariationalState s;
  const auto n = static_cast<Eigen::Index>(dim);
  s.mean = Eigen::VectorXd::Zero(n);
  s.log_sd = Eigen::VectorXd::Constant(n, config.init_log_sd);
  s.adam_m = Eigen::VectorXd::Zero(2 * n);
  s.adam_v = Eigen::VectorXd::Zero(2 * n);
  std::uniform_real_distribution<double> weight(config.moment_weight_low, config.moment_weight_high);
  s.moment_weight = weight(rng);
  return s;
}

double gaussian_entropy(const Eigen::VectorXd& log_sd) {
  return log_sd.sum() + 0.5 * static_cast<double>(log_sd.size()) * (1.0 + std::log(2.0 * std::numbers::pi));
}

ElboGradient elbo_gradient(const VariationalState& state, const LogJoint& model,
                           std::span<const std::size_t> batch, double scale,
                           const std::vector<Eigen::VectorXd>& noise) {
  const auto n = static_cast<Eigen::Index>(state.dim());
  ElboGradient out;
  out.grad_mean = Eigen::VectorXd::Zero(n);
  out.grad_log_sd = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd sd = state.log_sd.array().exp();
  Eigen::VectorXd z(n);
  Eigen::VectorXd g(n);
  double total = 0.0;
  for (const auto& eps : noise) {
    z = state.mean + sd.cwiseProduct(eps);
    total += model.evaluate(std::span<const double>(z.data(), state.dim()), batch, scale,
                            std::span<double>(g.data(), state.dim()));
    out.grad_mean += g;
    out.grad_log_sd += g.cwiseProduct(eps).cwiseProduct(sd);
  }
  const double m = static_cast<double>(noise.size());
  out.grad_mean /= m;
  out.grad_log_sd /= m;
  out.grad_log_sd.array() += 1.0;
  out.elbo = total / m + gaussian_entropy(state.log_sd);
  return out;
}

double elbo_value(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_sd, const LogJoint& model,
                  std::span<const std::size_t> batch, double scale,
                  const std::vector<Eigen::VectorXd>& noise) {
  const Eigen::VectorXd sd = log_sd.array().exp();
  Eigen::VectorXd z(mean.size());
  double total = 0.0;
  for (const auto& eps : noise) {
    z = mean + sd.cwiseProduct(eps);
    total += model.evaluate(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), batch,
                            scale);
  }
  return total / static_cast<double>(noise.size()) + gaussian_entropy(log_sd);
}

StepOutcome elbo_step(VariationalState& state, const LogJoint& model, std::span<const std::size_t> batch,
                      const ModelConfig& config, Rng& rng) {
  const double scale =
      static_cast<double>(model.data().num_words()) / static_cast<double>(batch.size());
  std::vector<Eigen::VectorXd> noise;
  noise.reserve(config.mc_samples);
  for (std::size_t s = 0; s < config.mc_samples; ++s) noise.push_back(standard_normal(state.dim(), rng));
  const auto grad = elbo_gradient(state, model, batch, scale, noise);

  StepOutcome out{grad.elbo, true};
  if (!std::isfinite(grad.elbo) || !grad.grad_mean.allFinite() || !grad.grad_log_sd.allFinite()) {
    out.accepted = false;
    state.log_sd = state.log_sd.cwiseMax(config.log_sd_floor);
    return out;
  }

  const auto n = static_cast<Eigen::Index>(state.dim());
  Eigen::VectorXd g(2 * n);
  g << grad.grad_mean, grad.grad_log_sd;
  const double b1 = state.moment_weight;
  const double b2 = config.second_moment_weight;
  ++state.step;
  state.adam_m = b1 * state.adam_m + (1.0 - b1) * g;
  state.adam_v = b2 * state.adam_v + (1.0 - b2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const Eigen::VectorXd update =
      config.learning_rate * (state.adam_m / c1).array() / ((state.adam_v / c2).array().sqrt() + config.adam_epsilon);
  state.mean += update.head(n);
  state.log_sd += update.tail(n);
  state.log_sd = state.log_sd.cwiseMax(config.log_sd_floor);
  return out;
}

std::vector<LatentState> sample_variational(const VariationalState& state, const LogJoint& model,
                                            std::size_t count, Rng& rng) {
  std::vector<LatentState> out;
  out.reserve(count);
  const Eigen::VectorXd sd = state.log_sd.array().exp();
  for (std::size_t s = 0; s < count; ++s) {
    const Eigen::VectorXd z = state.mean + sd.cwiseProduct(standard_normal(state.dim(), rng));
    out.push_back(model.constrain(std::span<const double>(z.data(), state.dim())));
  }
  return out;
}

ChainResult fit_chain(const ModelData& data, const ModelConfig& config, std::size_t chain_id) {
  config.validate();
  if (data.words.empty()) throw DataError("no observations to fit");
  LogJoint model(data, config);
  Rng rng = chain_rng(config.seed, chain_id);

  ChainResult result;
  result.trace.chain_id = chain_id;
  result.state = init_variational_state(model.layout().size(), config, rng);

  const auto n_words = data.num_words();
  const auto batch_size = config.effective_minibatch(n_words);
  const auto total_steps = config.effective_steps(n_words);
  const auto window = config.early_stop_window;

  std::vector<std::size_t> order(n_words);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n_words;
  std::size_t bad_run = 0;
  auto& history = result.trace.elbo_history;
  history.reserve(total_steps);
  double window_sum = 0.0;
  double previous_window_sum = 0.0;

  for (std::size_t t = 0; t < total_steps; ++t) {
    if (cursor + batch_size > n_words) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::span<const std::size_t> batch(order.data() + cursor, batch_size);
    cursor += batch_size;

    const auto step = elbo_step(result.state, model, batch, config, rng);
    ++result.steps_run;
    history.push_back(step.elbo);
    if (!step.accepted) ++result.rejected_steps;
    bad_run = std::isfinite(step.elbo) ? 0 : bad_run + 1;
    if (bad_run >= config.divergence_patience) {
      result.failed = true;
      break;
    }

    // Moving averages over consecutive windows, compared once a window fills.
    if (std::isfinite(step.elbo)) window_sum += step.elbo;
    if ((t + 1) % window == 0) {
      if (t + 1 >= 2 * window) {
        const double now = window_sum / static_cast<double>(window);
        const double before = previous_window_sum / static_cast<double>(window);
        if (now - before < config.early_stop_tolerance * std::abs(before)) {
          result.early_stopped = true;
          break;
        }
      }
      previous_window_sum = window_sum;
      window_sum = 0.0;
    }
  }

  if (!result.failed) {
    result.trace.samples = sample_variational(result.state, model, config.trace_samples, rng);
  }
  return result;
}

std::vector<ChainResult> fit(const ModelData& data, const ModelConfig& config) {
  config.validate();
  std::vector<ChainResult> results(config.n_chains);
  const auto workers = std::min(config.threads, config.n_chains);
  if (workers <= 1) {
    for (std::size_t c = 0; c < config.n_chains; ++c) results[c] = fit_chain(data, config, c);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(config.n_chains);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (auto c = next++; c < config.n_chains; c = next++) {
        try {
          results[c] = fit_chain(data, config, c);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd mean_theta(const PosteriorTrace& trace) {
  if (trace.samples.empty()) throw DataError("empty trace");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(trace.samples[0].theta.rows(), trace.samples[0].theta.cols());
  for (const auto& s : trace.samples) m += s.theta;
  return m / static_cast<double>(trace.samples.size());
}

Eigen::MatrixXd mean_phi(const PosteriorTrace& trace) {
  if (trace.samples.empty()) throw DataError("empty trace");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(trace.samples[0].phi.rows(), trace.samples[0].phi.cols());
  for (const auto& s : trace.samples) m += s.phi;
  return m / static_cast<double>(trace.samples.size());
}

std::vector<PosteriorTrace> align_component_labels(const std::vector<PosteriorTrace>& traces,
                                                   std::vector<ComponentPermutation>* perms) {
  if (traces.size() < 2) throw DataError("label alignment needs at least two traces");
  const Eigen::MatrixXd ref = mean_theta(traces[0]);
  const auto K = static_cast<std::size_t>(ref.cols());
  constexpr double kFloor = 1e-300;

  std::vector<PosteriorTrace> out;
  out.reserve(traces.size());
  if (perms) perms->clear();
  for (std::size_t t = 0; t < traces.size(); ++t) {
    ComponentPermutation best(K);
    std::iota(best.begin(), best.end(), 0);
    if (t > 0) {
      const Eigen::MatrixXd cand = mean_theta(traces[t]);
      ComponentPermutation perm = best;
      double best_kl = std::numeric_limits<double>::infinity();
      do {
        double kl = 0.0;
        for (Eigen::Index l = 0; l < ref.rows(); ++l) {
          for (std::size_t k = 0; k < K; ++k) {
            const double p = ref(l, static_cast<Eigen::Index>(k));
            const double q = cand(l, static_cast<Eigen::Index>(perm[k]));
            if (p > 0.0) kl += p * (std::log(p) - std::log(std::max(q, kFloor)));
          }
        }
        if (kl < best_kl) {
          best_kl = kl;
          best = perm;
        }
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
    PosteriorTrace aligned = traces[t];
    for (auto& s : aligned.samples) {
      Eigen::MatrixXd theta(s.theta.rows(), s.theta.cols());
      Eigen::MatrixXd phi(s.phi.rows(), s.phi.cols());
      for (std::size_t k = 0; k < K; ++k) {
        theta.col(static_cast<Eigen::Index>(k)) = s.theta.col(static_cast<Eigen::Index>(best[k]));
        phi.row(static_cast<Eigen::Index>(k)) = s.phi.row(static_cast<Eigen::Index>(best[k]));
      }
      s.theta = std::move(theta);
      s.phi = std::move(phi);
    }
    out.push_back(std::move(aligned));
    if (perms) perms->push_back(best);
  }
  return out;
}

RhatValue gelman_rubin(const std::vector<std::vector<double>>& chains) {
  if (chains.size() < 2) throw DataError("R-hat needs at least two chains");
  const auto n = chains[0].size();
  if (n < 2) throw DataError("R-hat needs chains of length at least two");
  for (const auto& c : chains) {
    if (c.size() != n) throw DataError("R-hat needs chains of equal length");
  }
  const double m = static_cast<double>(chains.size());
  const double nd = static_cast<double>(n);
  std::vector<double> means;
  double within = 0.0;
  for (const auto& c : chains) {
    const double mu = std::accumulate(c.begin(), c.end(), 0.0) / nd;
    double ss = 0.0;
    // A constant chain has zero variance even when mu carries rounding error.
    if (std::any_of(c.begin(), c.end(), [&](double x) { return x != c.front(); })) {
      for (double x : c) ss += (x - mu) * (x - mu);
    }
    within += ss / (nd - 1.0);
    means.push_back(mu);
  }
  within /= m;
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between *= nd / (m - 1.0);
  if (!(within > 0.0)) return {1.0, true};
  const double pooled = (nd - 1.0) / nd * within + between / nd;
  return {std::sqrt(pooled / within), false};
}

ConvergenceReport rhat(const std::vector<PosteriorTrace>& traces, double threshold) {
  if (traces.size() < 2) throw DataError("R-hat needs at least two traces");
  const auto n = traces[0].samples.size();
  for (const auto& t : traces) {
    if (t.samples.size() != n || n == 0) throw DataError("R-hat needs traces of equal, nonzero length");
  }
  std::vector<std::vector<double>> chains(traces.size(), std::vector<double>(n));
  auto collect = [&](auto&& get) {
    for (std::size_t c = 0; c < traces.size(); ++c) {
      for (std::size_t s = 0; s < n; ++s) chains[c][s] = get(traces[c].samples[s]);
    }
    return gelman_rubin(chains);
  };

  ConvergenceReport report;
  report.rhat_beta = collect([](const LatentState& s) { return s.beta; });
  const auto& first = traces[0].samples[0];
  for (Eigen::Index l = 0; l < first.theta.rows(); ++l) {
    for (Eigen::Index k = 0; k < first.theta.cols(); ++k) {
      const auto r = collect([&](const LatentState& s) { return s.theta(l, k); });
      report.rhat_theta.push_back(r);
      if (r.value < threshold) ++report.theta_below;
    }
  }
  for (Eigen::Index k = 0; k < first.phi.rows(); ++k) {
    for (Eigen::Index j = 0; j < first.phi.cols(); ++j) {
      const auto r = collect([&](const LatentState& s) { return s.phi(k, j); });
      report.rhat_phi.push_back(r);
      if (r.value < threshold) ++report.phi_below;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

std::string traces_to_jsonl(const std::vector<PosteriorTrace>& traces) {
  std::string out;
  for (const auto& t : traces) {
    for (const auto& s : t.samples) {
      nlohmann::json j{{"chain_id", t.chain_id},
                       {"beta", s.beta},
                       {"theta", matrix_rows(s.theta)},
                       {"phi", matrix_rows(s.phi)}};
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::vector<PosteriorTrace> traces_from_jsonl(std::string_view text) {
  std::vector<PosteriorTrace> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto chain = j.at("chain_id").get<std::size_t>();
      LatentState s;
      s.beta = j.at("beta").get<double>();
      s.theta = rows_matrix(j.at("theta"));
      s.phi = rows_matrix(j.at("phi"));
      auto it = std::find_if(out.begin(), out.end(), [&](const auto& t) { return t.chain_id == chain; });
      if (it == out.end()) {
        out.push_back({});
        out.back().chain_id = chain;
        it = out.end() - 1;
      }
      it->samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string elbo_history_csv(const std::vector<PosteriorTrace>& traces) {
  std::ostringstream os;
  os.precision(17);
  os << "step,chain,elbo\n";
  for (const auto& t : traces) {
    for (std::size_t s = 0; s < t.elbo_history.size(); ++s) {
      os << s << ',' << t.chain_id << ',' << t.elbo_history[s] << '\n';
    }
  }
  return os.str();
}

void read_elbo_history_csv(std::string_view text, std::vector<PosteriorTrace>& traces) {
  std::istringstream is{std::string(text)};
  std::string line;
  std::getline(is, line);
  if (line != "step,chain,elbo") throw FormatError("elbo history: unexpected header");
  for (auto& t : traces) t.elbo_history.clear();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string step, chain, value;
    if (!std::getline(row, step, ',') || !std::getline(row, chain, ',') || !std::getline(row, value)) {
      throw FormatError("elbo history: malformed row '" + line + "'");
    }
    const auto id = std::stoul(chain);
    for (auto& t : traces) {
      if (t.chain_id == id) t.elbo_history.push_back(std::stod(value));
    }
  }
}

nlohmann::json summarize_fit(const std::vector<PosteriorTrace>& aligned, const ConvergenceReport& convergence) {
  if (aligned.empty() || aligned[0].samples.empty()) throw DataError("nothing to summarize");
  const auto& first = aligned[0].samples[0];
  std::vector<double> pool;
  auto gather = [&](auto&& get) {
    pool.clear();
    for (const auto& t : aligned) {
      for (const auto& s : t.samples) pool.push_back(get(s));
    }
    return interval(pool);
  };

  nlohmann::json j;
  j["beta"] = gather([](const LatentState& s) { return s.beta; });
  nlohmann::json per_chain = nlohmann::json::array();
  for (const auto& t : aligned) {
    double sum = 0.0;
    for (const auto& s : t.samples) sum += s.beta;
    per_chain.push_back({{"chain_id", t.chain_id}, {"beta_mean", sum / static_cast<double>(t.samples.size())}});
  }
  j["chains"] = per_chain;

  nlohmann::json theta = nlohmann::json::array();
  for (Eigen::Index l = 0; l < first.theta.rows(); ++l) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < first.theta.cols(); ++k) {
      row.push_back(gather([&](const LatentState& s) { return s.theta(l, k); }));
    }
    theta.push_back(std::move(row));
  }
  j["theta"] = std::move(theta);

  nlohmann::json phi = nlohmann::json::array();
  for (Eigen::Index k = 0; k < first.phi.rows(); ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index s = 0; s < first.phi.cols(); ++s) {
      row.push_back(gather([&](const LatentState& x) { return x.phi(k, s); }));
    }
    phi.push_back(std::move(row));
  }
  j["phi"] = std::move(phi);

  j["rhat"] = {
      {"beta", {{"value", convergence.rhat_beta.value}, {"degenerate", convergence.rhat_beta.degenerate}}},
      {"theta", {{"below_1_1", convergence.theta_below}, {"total", convergence.rhat_theta.size()}}},
      {"phi", {{"below_1_1", convergence.phi_below}, {"total", convergence.rhat_phi.size()}}},
  };
  return j;
}

}  // namespace dialectmix

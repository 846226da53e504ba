// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/synthetic.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <tuple>

#include "dialectmix/errors.hpp"

namespace dialectmix {

namespace {

const std::map<std::string, std::vector<std::string>>& reflex_inventory() {
  static const std::map<std::string, std::vector<std::string>> table{
      {"ʃ", {"s", "ʃ", "h", "∅"}},   {"ŋ", {"ŋ", "n", "∅"}},    {"ɳ", {"ɳ", "n", "ɽ"}},
      {"ʂ", {"s", "ʃ", "ʂ", "kʰ"}},  {"r̩", {"i", "a", "u", "r"}}, {"h", {"h", "∅", "v"}},
      {"i", {"i", "e", "∅"}},        {"iː", {"iː", "i", "e"}},  {"j", {"j", "ɟ", "∅"}},
      {"kʂ", {"kʰ", "cʰ", "k"}},     {"l", {"l", "ɭ", "r"}},    {"n", {"n", "ɳ", "∅"}},
      {"r", {"r", "ɽ", "l"}},        {"s", {"s", "h", "ʃ"}},    {"u", {"u", "o", "∅"}},
      {"uː", {"uː", "u", "o"}},
  };
  return table;
}

const std::vector<std::string> kEnvironments{"#", "a", "aː", "i", "u", "e", "t", "k", "p", "m"};

}  // namespace

SyntheticCorpus simulate_corpus(const SyntheticSpec& spec, Rng& rng) {
  if (spec.num_components < 2) throw DataError("synthetic corpus needs at least two components");
  if (spec.min_reflexes < 2 || spec.max_reflexes < spec.min_reflexes) {
    throw DataError("synthetic corpus: bad reflex range");
  }
  if (spec.min_events < 1 || spec.max_events < spec.min_events || spec.max_events > spec.num_pairs) {
    throw DataError("synthetic corpus: bad event range");
  }
  if (!(spec.beta > 0.0) || !(spec.dominant_mass > 0.0 && spec.dominant_mass <= 1.0)) {
    throw DataError("synthetic corpus: beta and dominant mass must be positive");
  }

  // Distinct (source, left, right) keys, reflexes drawn from the inventory.
  std::vector<std::tuple<std::string, std::string, std::string>> keys;
  for (const auto& [source, _] : reflex_inventory()) {
    for (const auto& l : kEnvironments) {
      for (const auto& r : kEnvironments) keys.emplace_back(source, l, r);
    }
  }
  if (spec.num_pairs > keys.size()) throw DataError("synthetic corpus: too many pairs requested");
  std::shuffle(keys.begin(), keys.end(), rng);
  keys.resize(spec.num_pairs);
  std::sort(keys.begin(), keys.end());

  std::vector<SoundEnvPair> pairs;
  std::uniform_int_distribution<std::size_t> reflex_count(spec.min_reflexes, spec.max_reflexes);
  for (const auto& [source, left, right] : keys) {
    auto reflexes = reflex_inventory().at(source);
    const auto m = std::min(reflex_count(rng), reflexes.size());
    std::shuffle(reflexes.begin(), reflexes.end(), rng);
    reflexes.resize(m);
    std::sort(reflexes.begin(), reflexes.end());
    pairs.push_back({source, left, right, reflexes, std::vector<std::size_t>(m, 0)});
  }
  const auto partition = BlockPartition::from_sizes([&] {
    std::vector<std::size_t> sizes;
    for (const auto& p : pairs) sizes.push_back(p.size());
    return sizes;
  }());

  const auto K = spec.num_components;
  const auto L = spec.num_languages;
  const auto S = partition.flat_size();
  SyntheticCorpus out;
  auto& truth = out.truth;
  truth.beta = spec.beta;
  truth.phi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(S));
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto m = pairs[p].size();
    const auto first = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
    for (std::size_t k = 0; k < K; ++k) {
      const auto dominant = (first + k) % m;
      for (std::size_t r = 0; r < m; ++r) {
        truth.phi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(partition.offsets[p] + r)) =
            r == dominant ? spec.dominant_mass : (1.0 - spec.dominant_mass) / static_cast<double>(m - 1);
      }
    }
  }
  truth.theta.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(K));
  for (std::size_t l = 0; l < L; ++l) {
    const auto row = sample_dirichlet(spec.beta, K, rng);
    for (std::size_t k = 0; k < K; ++k) truth.theta(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = row[k];
  }

  std::vector<std::size_t> pair_ids(spec.num_pairs);
  std::iota(pair_ids.begin(), pair_ids.end(), 0);
  std::uniform_int_distribution<std::size_t> event_count(spec.min_events, spec.max_events);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](auto&& weight, std::size_t n) {
    double u = unit(rng);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      u -= weight(i);
      if (u < 0.0) return i;
    }
    return n - 1;
  };

  std::size_t word_id = 0;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t w = 0; w < spec.words_per_language; ++w) {
      const auto z = draw([&](std::size_t k) { return truth.theta(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)); }, K);
      WordObservation obs{word_id++, l, {}};
      const auto J = event_count(rng);
      // Partial Fisher-Yates: J distinct pairs.
      for (std::size_t j = 0; j < J; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, pair_ids.size() - 1);
        std::swap(pair_ids[j], pair_ids[pick(rng)]);
      }
      std::vector<std::size_t> chosen(pair_ids.begin(), pair_ids.begin() + static_cast<std::ptrdiff_t>(J));
      std::sort(chosen.begin(), chosen.end());
      for (auto p : chosen) {
        const auto lo = partition.offsets[p];
        const auto r = draw([&](std::size_t i) { return truth.phi(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(lo + i)); },
                            partition.block_size(p));
        obs.events.push_back({p, r});
        ++pairs[p].counts[r];
      }
      out.data.words.push_back(std::move(obs));
      out.true_z.push_back(z);
    }
  }
  out.collection = ChangeCollection(std::move(pairs));
  out.data.partition = partition;
  out.data.num_languages = L;
  return out;
}

}  // namespace dialectmix

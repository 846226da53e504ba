// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <vector>

#include "dialectmix/changes.hpp"
#include "dialectmix/model.hpp"
#include "dialectmix/priors.hpp"

namespace dialectmix {

/// Parameters for drawing a corpus from the generative model with known truth.
struct SyntheticSpec {
  std::size_t num_languages = 30;
  std::size_t words_per_language = 300;
  std::size_t num_pairs = 50;
  std::size_t min_reflexes = 2;
  std::size_t max_reflexes = 3;
  std::size_t min_events = 3;
  std::size_t max_events = 6;
  std::size_t num_components = 2;
  double beta = 0.1;
  /// Each component puts this mass on its own reflex of every pair; the rest
  /// is spread evenly.
  double dominant_mass = 0.95;
};

struct SyntheticCorpus {
  ChangeCollection collection;  // real segment names, counts from the draw
  ModelData data;
  std::vector<std::size_t> true_z;  // per word
  LatentState truth;
};

/// Sources come from the default whitelist, environments from a small
/// segment inventory, so the shipped feature table covers every pair.
SyntheticCorpus simulate_corpus(const SyntheticSpec& spec, Rng& rng);

}  // namespace dialectmix

// Apache License, Version 2.0, refer to LICENSE.txt

#include <memory>
#include <numeric>
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "dialectmix/align.hpp"
#include "dialectmix/diagnostics.hpp"
#include "dialectmix/model.hpp"
#include "dialectmix/priors.hpp"
#include "dialectmix/synthetic.hpp"

namespace dm = dialectmix;

namespace {

dm::SoundClassSeq random_classes(std::size_t len, const std::vector<std::string>& alphabet, std::mt19937& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  dm::SoundClassSeq s;
  for (std::size_t i = 0; i < len; ++i) {
    s.back_map.push_back(i);
    s.classes.push_back(alphabet[pick(rng)]);
  }
  return s;
}

void BM_NeedlemanWunsch(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const auto table = dm::ScoreTable::from_tsv(dm::ScoreTable::uniform({"K", "P", "R", "S", "T", "V"}, 1, -1, -2.5).to_tsv());
  std::mt19937 rng(1);
  std::vector<std::pair<dm::SoundClassSeq, dm::SoundClassSeq>> pairs;
  for (int i = 0; i < 64; ++i) {
    pairs.emplace_back(random_classes(len, table.alphabet(), rng), random_classes(len, table.alphabet(), rng));
  }
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& [a, b] = pairs[i++ % pairs.size()];
    benchmark::DoNotOptimize(dm::needleman_wunsch(a, b, table));
  }
}
BENCHMARK(BM_NeedlemanWunsch)->Arg(6)->Arg(12)->Arg(24);

const dm::SyntheticCorpus& corpus() {
  static const auto c = [] {
    dm::Rng rng(3);
    return dm::simulate_corpus(dm::SyntheticSpec{}, rng);
  }();
  return c;
}

dm::ModelConfig config_for(dm::PriorKind kind) {
  dm::ModelConfig cfg;
  cfg.prior.kind = kind;
  if (kind == dm::PriorKind::kLogisticNormal) {
    cfg.prior.covariance = std::make_shared<dm::CovarianceSpec>(
        dm::build_covariance(corpus().collection, dm::FeatureTable::load_default()));
  }
  return cfg;
}

// One stochastic optimization step on a default-sized minibatch.
void BM_ElboStep(benchmark::State& state) {
  const auto& data = corpus().data;
  const auto cfg = config_for(static_cast<dm::PriorKind>(state.range(0)));
  const dm::LogJoint model(data, cfg);
  dm::Rng rng(4);
  auto vs = dm::init_variational_state(model.layout().size(), cfg, rng);
  std::vector<std::size_t> order(data.num_words());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::vector<std::size_t> batch(order.begin(), order.begin() + static_cast<long>(cfg.effective_minibatch(order.size())));
  for (auto _ : state) benchmark::DoNotOptimize(dm::elbo_step(vs, model, batch, cfg, rng));
  state.SetLabel(dm::to_string(cfg.prior.kind));
}
BENCHMARK(BM_ElboStep)->Arg(static_cast<int>(dm::PriorKind::kDirichlet))->Arg(static_cast<int>(dm::PriorKind::kLogisticNormal));

void BM_BuildCovariance(benchmark::State& state) {
  const auto features = dm::FeatureTable::load_default();
  for (auto _ : state) benchmark::DoNotOptimize(dm::build_covariance(corpus().collection, features));
  state.SetLabel(std::to_string(corpus().collection.flat_size()) + " slots");
}
BENCHMARK(BM_BuildCovariance)->Unit(benchmark::kMillisecond);

void BM_ReconstructAssignments(benchmark::State& state) {
  const auto& c = corpus();
  for (auto _ : state) {
    for (const auto& w : c.data.words) {
      benchmark::DoNotOptimize(dm::reconstruct_assignment(w, c.truth.theta, c.truth.phi, c.data.partition));
    }
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * c.data.num_words()));
}
BENCHMARK(BM_ReconstructAssignments)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

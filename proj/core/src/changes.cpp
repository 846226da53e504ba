// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/changes.hpp"

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>
#include <tuple>

#include "dialectmix/errors.hpp"
#include "dialectmix/tsv.hpp"

namespace dialectmix {

std::string to_display(const RewriteRule& rule) {
  return rule.source + " > " + rule.reflex + " / " + rule.left + " _ " + rule.right;
}

std::vector<RewriteRule> extract_rules(const EtymonPair& pair, const Alignment& alignment) {
  const auto& src = pair.oia_form;
  const auto& tgt = pair.nia_form;
  std::vector<RewriteRule> rules;
  for (const auto& col : alignment.columns) {
    if (col.source == kGap) continue;
    const std::size_t p = col.source;
    RewriteRule r;
    r.source = src[p];
    r.reflex = col.target == kGap ? std::string(kDeletion) : tgt[col.target];
    r.left = p == 0 ? std::string(kBoundary) : src[p - 1];
    r.right = p + 1 == src.size() ? std::string(kBoundary) : src[p + 1];
    rules.push_back(std::move(r));
  }
  return rules;
}

std::vector<WordRules> extract_corpus_rules(const CorpusTable& corpus, const ClassMap& classes,
                                            const ScoreTable& table) {
  std::vector<WordRules> out;
  out.reserve(corpus.pairs.size());
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    const auto& pair = corpus.pairs[i];
    const auto alignment = needleman_wunsch(to_sound_classes(pair.oia_form, classes),
                                            to_sound_classes(pair.nia_form, classes), table);
    out.push_back({i, corpus.language_index(pair.language), extract_rules(pair, alignment)});
  }
  return out;
}

// ---------------------------------------------------------------------------

ChangeCollection::ChangeCollection(std::vector<SoundEnvPair> pairs) : pairs_(std::move(pairs)) {
  offsets_.reserve(pairs_.size() + 1);
  for (std::size_t p = 0; p < pairs_.size(); ++p) {
    offsets_.push_back(flat_size_);
    flat_size_ += pairs_[p].size();
    slot_pair_.insert(slot_pair_.end(), pairs_[p].size(), p);
  }
  offsets_.push_back(flat_size_);
}

RewriteRule ChangeCollection::rule_at(std::size_t slot) const {
  const auto p = slot_pair_.at(slot);
  const auto& pair = pairs_[p];
  return {pair.source, pair.reflexes[slot - offsets_[p]], pair.left, pair.right};
}

nlohmann::json ChangeCollection::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : pairs_) {
    arr.push_back({{"source", p.source},
                   {"left", p.left},
                   {"right", p.right},
                   {"reflexes", p.reflexes},
                   {"counts", p.counts}});
  }
  return {{"flat_size", flat_size_}, {"pairs", std::move(arr)}};
}

ChangeCollection ChangeCollection::from_json(const nlohmann::json& j) {
  std::vector<SoundEnvPair> pairs;
  for (const auto& p : j.at("pairs")) {
    SoundEnvPair sp;
    sp.source = p.at("source").get<std::string>();
    sp.left = p.at("left").get<std::string>();
    sp.right = p.at("right").get<std::string>();
    sp.reflexes = p.at("reflexes").get<std::vector<std::string>>();
    sp.counts = p.at("counts").get<std::vector<std::size_t>>();
    if (sp.reflexes.size() != sp.counts.size() || sp.reflexes.empty()) {
      throw FormatError("collection: reflexes and counts disagree for " + sp.source);
    }
    pairs.push_back(std::move(sp));
  }
  ChangeCollection c(std::move(pairs));
  if (j.contains("flat_size") && j.at("flat_size").get<std::size_t>() != c.flat_size()) {
    throw FormatError("collection: flat_size does not match the pairs");
  }
  return c;
}

// ---------------------------------------------------------------------------

std::set<std::string> load_whitelist(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  std::set<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.starts_with("# ")) continue;
    out.insert(line);
  }
  return out;
}

std::set<std::string> default_whitelist() { return load_whitelist(data_file("whitelist.txt")); }

IndexedChanges filter_and_index(const std::vector<WordRules>& words, const FilterOptions& options) {
  if (options.min_count < 1) throw DataError("min_count must be at least 1");
  IndexedChanges out;
  auto& stats = out.stats;
  stats.words_in = words.size();

  std::map<RewriteRule, std::size_t> type_counts;
  for (const auto& w : words) {
    stats.rules_in += w.rules.size();
    for (const auto& r : w.rules) {
      if (!options.whitelist.contains(r.source)) continue;
      ++stats.rules_whitelisted;
      ++type_counts[r];
    }
  }

  using EnvKey = std::tuple<std::string, std::string, std::string>;
  std::map<EnvKey, std::map<std::string, std::size_t>> envs;
  for (const auto& [rule, count] : type_counts) {
    if (count <= options.min_count) continue;
    ++stats.rule_types_kept;
    envs[{rule.source, rule.left, rule.right}][rule.reflex] = count;
  }

  std::vector<SoundEnvPair> pairs;
  std::map<EnvKey, std::size_t> pair_index;
  for (const auto& [key, reflexes] : envs) {
    if (reflexes.size() < 2) {
      ++stats.singleton_pairs_dropped;
      continue;
    }
    SoundEnvPair sp;
    std::tie(sp.source, sp.left, sp.right) = key;
    for (const auto& [reflex, count] : reflexes) {
      sp.reflexes.push_back(reflex);
      sp.counts.push_back(count);
    }
    pair_index[key] = pairs.size();
    pairs.push_back(std::move(sp));
  }
  out.collection = ChangeCollection(std::move(pairs));

  for (const auto& w : words) {
    WordObservation obs{w.word_id, w.language, {}};
    for (const auto& r : w.rules) {
      auto it = pair_index.find({r.source, r.left, r.right});
      if (it == pair_index.end()) continue;
      const auto& reflexes = out.collection.pairs()[it->second].reflexes;
      auto pos = std::lower_bound(reflexes.begin(), reflexes.end(), r.reflex);
      if (pos == reflexes.end() || *pos != r.reflex) continue;
      obs.events.push_back({it->second, static_cast<std::size_t>(pos - reflexes.begin())});
    }
    if (obs.events.empty()) continue;
    stats.events_kept += obs.events.size();
    out.observations.push_back(std::move(obs));
  }
  stats.words_kept = out.observations.size();

  if (out.observations.empty()) {
    throw DataError("no sound changes survive filtering: " + std::to_string(stats.rules_in) +
                    " rules, " + std::to_string(stats.rules_whitelisted) + " whitelisted, " +
                    std::to_string(stats.rule_types_kept) + " rule types above min_count " +
                    std::to_string(options.min_count) + ", " +
                    std::to_string(stats.singleton_pairs_dropped) +
                    " single-reflex environments dropped");
  }
  return out;
}

std::string observations_to_jsonl(const std::vector<WordObservation>& observations) {
  std::string out;
  for (const auto& o : observations) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : o.events) events.push_back({e.pair, e.reflex});
    out += nlohmann::json{{"word_id", o.word_id}, {"language", o.language}, {"events", events}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<WordObservation> observations_from_jsonl(std::string_view text) {
  std::vector<WordObservation> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    WordObservation o;
    o.word_id = j.at("word_id").get<std::size_t>();
    o.language = j.at("language").get<std::size_t>();
    for (const auto& e : j.at("events")) {
      o.events.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    }
    if (o.events.empty()) throw FormatError("observation without events: word " + std::to_string(o.word_id));
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace dialectmix

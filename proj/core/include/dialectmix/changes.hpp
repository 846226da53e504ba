// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dialectmix/align.hpp"
#include "dialectmix/corpus.hpp"

namespace dialectmix {

/// Reflex token for a source segment aligned to a gap.
inline constexpr std::string_view kDeletion = "\xe2\x88\x85";  // U+2205

/// A > B / C _ D. The environment is one old-form segment (or "#") on each side.
struct RewriteRule {
  std::string source;
  std::string reflex;
  std::string left;
  std::string right;

  friend auto operator<=>(const RewriteRule&, const RewriteRule&) = default;
};

std::string to_display(const RewriteRule& rule);

/// One rule per alignment column with an old-form segment. Columns that only
/// carry a modern segment contribute nothing.
std::vector<RewriteRule> extract_rules(const EtymonPair& pair, const Alignment& alignment);

/// An old segment in its environment, together with its observed reflexes.
struct SoundEnvPair {
  std::string source;
  std::string left;
  std::string right;
  std::vector<std::string> reflexes;  // sorted, distinct
  std::vector<std::size_t> counts;    // per reflex, all > 0

  std::size_t size() const { return reflexes.size(); }
};

/// Ragged collection of reflex distributions laid out flat: slot
/// offsets[p] + r is reflex r of pair p.
class ChangeCollection {
 public:
  ChangeCollection() = default;
  explicit ChangeCollection(std::vector<SoundEnvPair> pairs);

  const std::vector<SoundEnvPair>& pairs() const { return pairs_; }
  std::size_t num_pairs() const { return pairs_.size(); }
  std::size_t flat_size() const { return flat_size_; }
  std::size_t offset(std::size_t pair) const { return offsets_[pair]; }
  /// offsets with a final sentinel equal to flat_size().
  const std::vector<std::size_t>& offsets() const { return offsets_; }
  std::size_t slot(std::size_t pair, std::size_t reflex) const { return offsets_[pair] + reflex; }
  std::size_t pair_of_slot(std::size_t slot) const { return slot_pair_[slot]; }
  RewriteRule rule_at(std::size_t slot) const;

  nlohmann::json to_json() const;
  static ChangeCollection from_json(const nlohmann::json& j);

 private:
  std::vector<SoundEnvPair> pairs_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> slot_pair_;
  std::size_t flat_size_ = 0;
};

struct ChangeEvent {
  std::size_t pair = 0;
  std::size_t reflex = 0;
  friend bool operator==(const ChangeEvent&, const ChangeEvent&) = default;
};

/// The model's data row for word i: language index and its J[i] events.
struct WordObservation {
  std::size_t word_id = 0;
  std::size_t language = 0;
  std::vector<ChangeEvent> events;

  friend bool operator==(const WordObservation&, const WordObservation&) = default;
};

/// Rules extracted from one word, before filtering.
struct WordRules {
  std::size_t word_id = 0;
  std::size_t language = 0;
  std::vector<RewriteRule> rules;
};

/// Aligns every pair of the corpus under `table` and extracts its rules.
/// word_id is the pair's position in corpus.pairs.
std::vector<WordRules> extract_corpus_rules(const CorpusTable& corpus, const ClassMap& classes,
                                            const ScoreTable& table);

struct FilterOptions {
  std::set<std::string> whitelist;
  /// A (source, left, right, reflex) type is kept only if seen more than this.
  std::size_t min_count = 5;
};

std::set<std::string> load_whitelist(const std::filesystem::path& path);
std::set<std::string> default_whitelist();

struct FilterStats {
  std::size_t rules_in = 0;
  std::size_t rules_whitelisted = 0;
  std::size_t rule_types_kept = 0;
  std::size_t singleton_pairs_dropped = 0;
  std::size_t words_in = 0;
  std::size_t words_kept = 0;
  std::size_t events_kept = 0;
};

struct IndexedChanges {
  ChangeCollection collection;
  std::vector<WordObservation> observations;
  FilterStats stats;
};

/// Keeps whitelisted sources, rule types with count > min_count, and pairs
/// with at least two surviving reflexes; re-encodes words as events. Throws
/// DataError (with the counts) when nothing survives.
IndexedChanges filter_and_index(const std::vector<WordRules>& words, const FilterOptions& options);

std::string observations_to_jsonl(const std::vector<WordObservation>& observations);
std::vector<WordObservation> observations_from_jsonl(std::string_view text);

}  // namespace dialectmix

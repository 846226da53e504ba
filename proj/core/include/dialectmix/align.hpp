// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dialectmix/corpus.hpp"

namespace dialectmix {

/// Coarse sound class per segment. back_map[i] is the segment position that
/// produced classes[i]; with one class per segment it is the identity.
struct SoundClassSeq {
  std::vector<std::string> classes;
  std::vector<std::size_t> back_map;

  std::size_t size() const { return classes.size(); }
};

/// Segment token -> sound class. Nasalized vowels fall back to their oral
/// vowel's class.
class ClassMap {
 public:
  static ClassMap load(const std::filesystem::path& path);
  static ClassMap load_default();
  static ClassMap from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);

  /// Throws DataError naming the token when it has no class.
  const std::string& class_of(const std::string& token) const;
  /// Sorted, distinct class tokens.
  std::vector<std::string> alphabet() const;

 private:
  std::unordered_map<std::string, std::string> map_;
};

/// Throws DataError on an empty sequence or an unmapped segment.
SoundClassSeq to_sound_classes(const SegmentSequence& seq, const ClassMap& classes);

/// Symmetric class-by-class similarity scores plus one gap score.
class ScoreTable {
 public:
  ScoreTable() = default;
  /// Uniform match bonus / mismatch penalty over the given alphabet.
  static ScoreTable uniform(std::vector<std::string> alphabet, double match, double mismatch,
                            double gap);

  std::size_t index(const std::string& cls) const;
  double score(std::size_t a, std::size_t b) const { return scores_[a * n_ + b]; }
  double score(const std::string& a, const std::string& b) const;
  void set(std::size_t a, std::size_t b, double value);
  double gap_score() const { return gap_; }
  void set_gap_score(double g) { gap_ = g; }
  const std::vector<std::string>& alphabet() const { return alphabet_; }

  /// TSV rows (classA, classB, score) for a <= b, then a "<gap>" row.
  std::string to_tsv() const;
  static ScoreTable from_tsv(std::string_view text);

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;

 private:
  std::vector<std::string> alphabet_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::vector<double> scores_;
  std::size_t n_ = 0;
  double gap_ = 0.0;
};

inline constexpr std::size_t kGap = std::numeric_limits<std::size_t>::max();

/// One alignment column; either slot may be kGap, never both.
struct AlignedColumn {
  std::size_t source = kGap;
  std::size_t target = kGap;
  friend bool operator==(const AlignedColumn&, const AlignedColumn&) = default;
};

struct Alignment {
  std::vector<AlignedColumn> columns;
  double score = 0.0;
};

/// Sum of column scores of an arbitrary alignment under a table.
double score_alignment(const Alignment& alignment, const SoundClassSeq& src,
                       const SoundClassSeq& tgt, const ScoreTable& table);

/// Which gap column wins a traceback tie after a match/mismatch column.
enum class GapPreference { kTargetGapFirst, kSourceGapFirst };

/// Maximum-score global alignment. Traceback prefers a match/mismatch column,
/// then (by default) a gap in the target, then a gap in the source.
Alignment needleman_wunsch(const SoundClassSeq& src, const SoundClassSeq& tgt,
                           const ScoreTable& table,
                           GapPreference preference = GapPreference::kTargetGapFirst);

struct EmOptions {
  std::size_t max_iterations = 20;
  double tolerance = 1e-6;  // relative change of the total alignment score
  double smoothing = 0.5;   // added to every co-occurrence count
  double init_match = 1.0;
  double init_mismatch = -1.0;
  double gap = -2.5;
};

struct EmTrace {
  /// Total corpus alignment score after each E step.
  std::vector<double> total_scores;
  std::size_t iterations = 0;
};

/// PMI of aligned class co-occurrences, symmetric, with additive smoothing.
/// Gap columns are not counted.
ScoreTable pmi_from_alignments(const std::vector<std::pair<SoundClassSeq, SoundClassSeq>>& pairs,
                               const std::vector<Alignment>& alignments,
                               const std::vector<std::string>& alphabet, double smoothing,
                               double gap);

/// EM over alignments: E aligns every pair under the current table, M
/// recomputes PMI scores. max_iterations == 0 returns the initial table.
ScoreTable em_fit_scores(const std::vector<std::pair<SoundClassSeq, SoundClassSeq>>& pairs,
                         const std::vector<std::string>& alphabet, const EmOptions& options,
                         EmTrace* trace = nullptr);

ScoreTable em_fit_scores(const CorpusTable& corpus, const ClassMap& classes,
                         const EmOptions& options, EmTrace* trace = nullptr);

}  // namespace dialectmix

// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dialectmix {

/// Word boundary token read at both edges of a form when environments are
/// extracted. Never stored inside a SegmentSequence.
inline constexpr std::string_view kBoundary = "#";

/// Which side of an etymon pair a form belongs to. Some transliterations are
/// ambiguous between the old and modern orthographies (e.g. r with underdot).
enum class Side { kOld, kModern };

struct SegmentSequence {
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  const std::string& operator[](std::size_t i) const { return tokens[i]; }
  friend bool operator==(const SegmentSequence&, const SegmentSequence&) = default;
};

/// Tokens joined with spaces, for logs and diagnostics.
std::string to_display(const SegmentSequence& seq);

struct LanguageEntry {
  std::string glottocode;
  std::string name;
  std::optional<double> latitude;
  std::optional<double> longitude;
  std::size_t word_count = 0;

  bool has_coordinates() const { return latitude.has_value() && longitude.has_value(); }
  friend bool operator==(const LanguageEntry&, const LanguageEntry&) = default;
};

struct EtymonPair {
  std::string etymon_id;
  SegmentSequence oia_form;
  SegmentSequence nia_form;
  std::string language;
  std::optional<std::string> gloss;
  bool is_verb = false;

  friend bool operator==(const EtymonPair&, const EtymonPair&) = default;
};

struct CorpusTable {
  /// Sorted by glottocode.
  std::vector<LanguageEntry> languages;
  std::vector<EtymonPair> pairs;
  /// glottocode -> sorted dialect names pooled under it.
  std::map<std::string, std::vector<std::string>> dialects;
  std::map<std::string, std::string> provenance;

  std::size_t num_words() const { return pairs.size(); }
  std::size_t num_languages() const { return languages.size(); }
  /// Index into languages, or npos.
  std::size_t language_index(std::string_view glottocode) const;
};

/// One rejected input row, serialized as a JSON line in the error report.
struct RejectedRow {
  std::string file;
  std::size_t line = 0;
  std::string etymon_id;
  std::string reason;  // machine readable reason code
  std::string detail;
};

struct IngestReport {
  std::vector<RejectedRow> rejected;

  void add(RejectedRow row) { rejected.push_back(std::move(row)); }
  std::string to_json_lines() const;
};

/// Source orthography -> segment token map, loaded from a TSV with columns
/// source, token, kind (segment|modifier|ignore), side (*|oia|nia).
///
/// Normalization is a longest-match scan over UTF-8 bytes. A modifier (e.g. a
/// combining tilde for nasalization) is appended to the preceding token.
class TokenMap {
 public:
  static TokenMap load(const std::filesystem::path& path);
  static TokenMap load_default();

  /// Throws DataError naming the offending character and its byte offset.
  SegmentSequence normalize(std::string_view raw, Side side) const;

  /// Canonical spelling of a token sequence; normalize(render(s)) == s.
  std::string render(const SegmentSequence& seq, Side side) const;

 private:
  enum class Kind { kSegment, kModifier, kIgnore };
  struct Entry {
    std::string source;
    std::string token;
    Kind kind;
    std::optional<Side> side;
  };
  const Entry* match(std::string_view rest, Side side) const;
  std::optional<std::string> spell(std::string_view token, Side side) const;

  std::vector<Entry> entries_;
  std::size_t longest_ = 0;
};

/// Verb endings stripped before alignment. Suffixes are stored as token
/// sequences so the match respects segment boundaries.
class SuffixTable {
 public:
  static SuffixTable load(const std::filesystem::path& path, const TokenMap& tokens);
  static SuffixTable from_lists(const std::vector<std::string>& oia,
                                const std::vector<std::string>& nia, const TokenMap& tokens);

  /// Longest suffix of seq present in the table for that side, or 0.
  std::size_t match_length(const SegmentSequence& seq, Side side) const;

 private:
  std::vector<SegmentSequence> oia_;
  std::vector<SegmentSequence> nia_;
};

/// Removes the old 3sg present ending and the modern infinitive ending from a
/// verb. Non-verbs come back unchanged. Returns nullopt when stripping would
/// leave either form empty.
std::optional<EtymonPair> strip_verb_ending(const EtymonPair& pair, const SuffixTable& suffixes);

/// One dialect-level record before merging.
struct RawRecord {
  std::string dialect;
  std::string glottocode;
  std::optional<double> latitude;
  std::optional<double> longitude;
  EtymonPair pair;
};

/// Pools every dialect sharing a glottocode into one language. Throws
/// MetadataError when a glottocode carries two different coordinates.
CorpusTable merge_by_glottocode(const std::vector<RawRecord>& records);

struct LanguageMeta {
  std::string glottocode;
  std::string name;
  std::optional<double> latitude;
  std::optional<double> longitude;
};

/// Metadata TSV: glottocode, name, latitude, longitude. Repeated glottocodes
/// are allowed when coordinates agree; names are pooled.
std::map<std::string, LanguageMeta> load_language_meta(const std::filesystem::path& path);

struct LoadedCorpus {
  CorpusTable table;
  IngestReport report;
};

/// Data TSV columns: etymon_id, glottocode, oia_form, nia_form, gloss,
/// is_verb, with an optional dialect column. Bad rows go to the report.
LoadedCorpus load_corpus(const std::filesystem::path& data_path,
                         const std::filesystem::path& meta_path, const TokenMap& tokens);

/// Applies strip_verb_ending to every verb, moving emptied rows to report.
CorpusTable strip_verbs(const CorpusTable& table, const SuffixTable& suffixes,
                        IngestReport& report);

}  // namespace dialectmix

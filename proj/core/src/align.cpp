// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/align.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "dialectmix/errors.hpp"
#include "dialectmix/tsv.hpp"

namespace dialectmix {

namespace {
constexpr std::string_view kNasalTilde = "\xcc\x83";  // U+0303
constexpr std::string_view kGapRow = "<gap>";
}  // namespace

// ---------------------------------------------------------------------------
// Sound classes

ClassMap ClassMap::load(const std::filesystem::path& path) {
  const auto table = read_tsv(path);
  const auto seg = table.require_column("segment", path.string());
  const auto cls = table.require_column("class", path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& row : table.rows) {
    if (row.size() <= std::max(seg, cls)) throw FormatError(path.string() + ": short row");
    pairs.emplace_back(row[seg], row[cls]);
  }
  return from_pairs(pairs);
}

ClassMap ClassMap::load_default() { return load(data_file("classes.tsv")); }

ClassMap ClassMap::from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  ClassMap m;
  for (const auto& [seg, cls] : pairs) m.map_[seg] = cls;
  return m;
}

const std::string& ClassMap::class_of(const std::string& token) const {
  if (auto it = map_.find(token); it != map_.end()) return it->second;
  std::string_view base = token;
  while (base.size() > kNasalTilde.size() && base.ends_with(kNasalTilde)) {
    base.remove_suffix(kNasalTilde.size());
    if (auto it = map_.find(std::string(base)); it != map_.end()) return it->second;
  }
  throw DataError("segment '" + token + "' has no sound class");
}

std::vector<std::string> ClassMap::alphabet() const {
  std::set<std::string> classes;
  for (const auto& [seg, cls] : map_) classes.insert(cls);
  return {classes.begin(), classes.end()};
}

SoundClassSeq to_sound_classes(const SegmentSequence& seq, const ClassMap& classes) {
  if (seq.empty()) throw DataError("cannot convert an empty segment sequence to sound classes");
  SoundClassSeq out;
  out.classes.reserve(seq.size());
  out.back_map.reserve(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.classes.push_back(classes.class_of(seq[i]));
    out.back_map.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ScoreTable

ScoreTable ScoreTable::uniform(std::vector<std::string> alphabet, double match, double mismatch,
                               double gap) {
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  ScoreTable t;
  t.n_ = alphabet.size();
  t.alphabet_ = std::move(alphabet);
  for (std::size_t i = 0; i < t.n_; ++i) t.lookup_[t.alphabet_[i]] = i;
  t.scores_.assign(t.n_ * t.n_, mismatch);
  for (std::size_t i = 0; i < t.n_; ++i) t.scores_[i * t.n_ + i] = match;
  t.gap_ = gap;
  return t;
}

std::size_t ScoreTable::index(const std::string& cls) const {
  auto it = lookup_.find(cls);
  if (it == lookup_.end()) throw DataError("sound class '" + cls + "' not in score table");
  return it->second;
}

double ScoreTable::score(const std::string& a, const std::string& b) const {
  return score(index(a), index(b));
}

void ScoreTable::set(std::size_t a, std::size_t b, double value) {
  scores_[a * n_ + b] = value;
  scores_[b * n_ + a] = value;
}

std::string ScoreTable::to_tsv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "class_a\tclass_b\tscore\n";
  for (std::size_t a = 0; a < n_; ++a) {
    for (std::size_t b = a; b < n_; ++b) {
      out << alphabet_[a] << '\t' << alphabet_[b] << '\t' << score(a, b) << '\n';
    }
  }
  out << kGapRow << '\t' << kGapRow << '\t' << gap_ << '\n';
  return out.str();
}

ScoreTable ScoreTable::from_tsv(std::string_view text) {
  const auto table = parse_tsv(text, "score table");
  std::set<std::string> classes;
  double gap = 0.0;
  bool have_gap = false;
  for (const auto& row : table.rows) {
    if (row.size() != 3) throw FormatError("score table: expected 3 columns");
    if (row[0] == kGapRow) {
      gap = std::stod(row[2]);
      have_gap = true;
      continue;
    }
    classes.insert(row[0]);
    classes.insert(row[1]);
  }
  if (!have_gap) throw FormatError("score table: missing gap row");
  auto t = uniform({classes.begin(), classes.end()}, 0.0, 0.0, gap);
  for (const auto& row : table.rows) {
    if (row[0] == kGapRow) continue;
    t.set(t.index(row[0]), t.index(row[1]), std::stod(row[2]));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Needleman-Wunsch

double score_alignment(const Alignment& alignment, const SoundClassSeq& src,
                       const SoundClassSeq& tgt, const ScoreTable& table) {
  double total = 0.0;
  for (const auto& col : alignment.columns) {
    if (col.source == kGap || col.target == kGap) {
      total += table.gap_score();
    } else {
      total += table.score(src.classes[col.source], tgt.classes[col.target]);
    }
  }
  return total;
}

Alignment needleman_wunsch(const SoundClassSeq& src, const SoundClassSeq& tgt,
                           const ScoreTable& table, GapPreference preference) {
  if (src.size() == 0 || tgt.size() == 0) {
    throw DataError("needleman_wunsch requires non-empty sequences");
  }
  const std::size_t n = src.size();
  const std::size_t m = tgt.size();
  const double gap = table.gap_score();
  std::vector<std::size_t> si(n), ti(m);
  for (std::size_t i = 0; i < n; ++i) si[i] = table.index(src.classes[i]);
  for (std::size_t j = 0; j < m; ++j) ti[j] = table.index(tgt.classes[j]);

  const std::size_t w = m + 1;
  std::vector<double> h((n + 1) * w);
  for (std::size_t i = 0; i <= n; ++i) h[i * w] = gap * static_cast<double>(i);
  for (std::size_t j = 0; j <= m; ++j) h[j] = gap * static_cast<double>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const double diag = h[(i - 1) * w + j - 1] + table.score(si[i - 1], ti[j - 1]);
      const double up = h[(i - 1) * w + j] + gap;
      const double left = h[i * w + j - 1] + gap;
      h[i * w + j] = std::max({diag, up, left});
    }
  }

  Alignment out;
  out.score = h[n * w + m];
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const double here = h[i * w + j];
    const bool diag_ok = i > 0 && j > 0 &&
                         here == h[(i - 1) * w + j - 1] + table.score(si[i - 1], ti[j - 1]);
    const bool up_ok = i > 0 && here == h[(i - 1) * w + j] + gap;
    const bool left_ok = j > 0 && here == h[i * w + j - 1] + gap;
    if (diag_ok) {
      out.columns.push_back({src.back_map[i - 1], tgt.back_map[j - 1]});
      --i;
      --j;
    } else if (up_ok && (preference == GapPreference::kTargetGapFirst || !left_ok)) {
      out.columns.push_back({src.back_map[i - 1], kGap});
      --i;
    } else {
      out.columns.push_back({kGap, tgt.back_map[j - 1]});
      --j;
    }
  }
  std::reverse(out.columns.begin(), out.columns.end());
  return out;
}

// ---------------------------------------------------------------------------
// EM

ScoreTable pmi_from_alignments(const std::vector<std::pair<SoundClassSeq, SoundClassSeq>>& pairs,
                               const std::vector<Alignment>& alignments,
                               const std::vector<std::string>& alphabet, double smoothing,
                               double gap) {
  auto table = ScoreTable::uniform(alphabet, 0.0, 0.0, gap);
  const std::size_t n = table.alphabet().size();
  std::vector<double> counts(n * n, smoothing);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& [src, tgt] = pairs[p];
    for (const auto& col : alignments[p].columns) {
      if (col.source == kGap || col.target == kGap) continue;
      const auto a = table.index(src.classes[col.source]);
      const auto b = table.index(tgt.classes[col.target]);
      counts[a * n + b] += 1.0;
      counts[b * n + a] += 1.0;
    }
  }
  double total = 0.0;
  std::vector<double> marginal(n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      marginal[a] += counts[a * n + b];
      total += counts[a * n + b];
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      const double joint = counts[a * n + b] / total;
      table.set(a, b, std::log(joint) - std::log(marginal[a] / total) - std::log(marginal[b] / total));
    }
  }
  return table;
}

ScoreTable em_fit_scores(const std::vector<std::pair<SoundClassSeq, SoundClassSeq>>& pairs,
                         const std::vector<std::string>& alphabet, const EmOptions& options,
                         EmTrace* trace) {
  auto table = ScoreTable::uniform(alphabet, options.init_match, options.init_mismatch, options.gap);
  if (options.max_iterations == 0) return table;
  if (pairs.empty()) throw DataError("em_fit_scores requires a non-empty corpus");

  std::vector<Alignment> alignments(pairs.size());
  double previous = 0.0;
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    double total = 0.0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      alignments[p] = needleman_wunsch(pairs[p].first, pairs[p].second, table);
      total += alignments[p].score;
    }
    if (trace) {
      trace->total_scores.push_back(total);
      trace->iterations = it + 1;
    }
    table = pmi_from_alignments(pairs, alignments, table.alphabet(), options.smoothing, options.gap);
    if (it > 0 && std::abs(total - previous) <= options.tolerance * std::abs(previous)) break;
    previous = total;
  }
  return table;
}

ScoreTable em_fit_scores(const CorpusTable& corpus, const ClassMap& classes,
                         const EmOptions& options, EmTrace* trace) {
  std::vector<std::pair<SoundClassSeq, SoundClassSeq>> pairs;
  pairs.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) {
    pairs.emplace_back(to_sound_classes(p.oia_form, classes), to_sound_classes(p.nia_form, classes));
  }
  return em_fit_scores(pairs, classes.alphabet(), options, trace);
}

}  // namespace dialectmix

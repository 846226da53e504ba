// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

#include "dialectmix/errors.hpp"
#include "dialectmix/tsv.hpp"

namespace dialectmix {

namespace {

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

std::optional<Side> parse_side(std::string_view s, std::string_view origin) {
  if (s == "*") return std::nullopt;
  if (s == "oia") return Side::kOld;
  if (s == "nia") return Side::kModern;
  throw FormatError(std::string(origin) + ": bad side '" + std::string(s) + "'");
}

std::optional<double> parse_coordinate(std::string_view s) {
  if (s.empty() || s == "NA" || s == "na") return std::nullopt;
  double value = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) {
    throw FormatError("bad coordinate '" + std::string(s) + "'");
  }
  return value;
}

const char* side_name(Side side) { return side == Side::kOld ? "oia" : "nia"; }

}  // namespace

std::string to_display(const SegmentSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += seq[i];
  }
  return out;
}

std::size_t CorpusTable::language_index(std::string_view glottocode) const {
  const auto it = std::lower_bound(
      languages.begin(), languages.end(), glottocode,
      [](const LanguageEntry& e, std::string_view code) { return e.glottocode < code; });
  if (it == languages.end() || it->glottocode != glottocode) return std::string::npos;
  return static_cast<std::size_t>(it - languages.begin());
}

std::string IngestReport::to_json_lines() const {
  std::string out;
  for (const auto& r : rejected) {
    nlohmann::json j{{"file", r.file},     {"line", r.line},     {"etymon_id", r.etymon_id},
                     {"reason", r.reason}, {"detail", r.detail}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// TokenMap

TokenMap TokenMap::load(const std::filesystem::path& path) {
  const auto table = read_tsv(path);
  const auto origin = path.string();
  const auto src = table.require_column("source", origin);
  const auto tok = table.require_column("token", origin);
  const auto kind = table.require_column("kind", origin);
  const auto side = table.require_column("side", origin);
  TokenMap map;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() < table.header.size()) {
      throw FormatError(origin + ":" + std::to_string(table.line_numbers[r]) + ": short row");
    }
    Entry e;
    e.source = row[src];
    e.token = row[tok];
    e.side = parse_side(row[side], origin);
    if (row[kind] == "segment") {
      e.kind = Kind::kSegment;
    } else if (row[kind] == "modifier") {
      e.kind = Kind::kModifier;
    } else if (row[kind] == "ignore") {
      e.kind = Kind::kIgnore;
    } else {
      throw FormatError(origin + ": bad kind '" + row[kind] + "'");
    }
    if (e.source.empty()) throw FormatError(origin + ": empty source spelling");
    if (e.kind == Kind::kSegment && (e.token.empty() || e.token == kBoundary)) {
      throw FormatError(origin + ": segment row needs a token other than '#'");
    }
    map.longest_ = std::max(map.longest_, e.source.size());
    map.entries_.push_back(std::move(e));
  }
  return map;
}

TokenMap TokenMap::load_default() { return load(data_file("tokens.tsv")); }

const TokenMap::Entry* TokenMap::match(std::string_view rest, Side side) const {
  const Entry* best = nullptr;
  for (const auto& e : entries_) {
    if (e.side && *e.side != side) continue;
    if (e.source.size() > rest.size()) continue;
    if (rest.compare(0, e.source.size(), e.source) != 0) continue;
    if (!best || e.source.size() > best->source.size()) best = &e;
  }
  return best;
}

SegmentSequence TokenMap::normalize(std::string_view raw, Side side) const {
  SegmentSequence out;
  std::size_t pos = 0;
  while (pos < raw.size()) {
    const Entry* e = match(raw.substr(pos), side);
    if (!e) {
      const auto len = std::min(utf8_length(static_cast<unsigned char>(raw[pos])), raw.size() - pos);
      throw DataError("unmappable character '" + std::string(raw.substr(pos, len)) +
                      "' at byte offset " + std::to_string(pos) + " in '" + std::string(raw) +
                      "' (" + side_name(side) + ")");
    }
    switch (e->kind) {
      case Kind::kSegment:
        out.tokens.push_back(e->token);
        break;
      case Kind::kModifier:
        if (out.tokens.empty()) {
          throw DataError("modifier '" + e->source + "' without a preceding segment at byte offset " +
                          std::to_string(pos) + " in '" + std::string(raw) + "'");
        }
        out.tokens.back() += e->token;
        break;
      case Kind::kIgnore:
        break;
    }
    pos += e->source.size();
  }
  return out;
}

std::optional<std::string> TokenMap::spell(std::string_view token, Side side) const {
  for (const auto& e : entries_) {
    if (e.kind == Kind::kSegment && e.token == token && (!e.side || *e.side == side)) {
      return e.source;
    }
  }
  for (const auto& e : entries_) {
    if (e.kind != Kind::kModifier || e.token.empty() || token.size() <= e.token.size()) continue;
    if (token.substr(token.size() - e.token.size()) != e.token) continue;
    if (auto base = spell(token.substr(0, token.size() - e.token.size()), side)) {
      return *base + e.source;
    }
  }
  return std::nullopt;
}

std::string TokenMap::render(const SegmentSequence& seq, Side side) const {
  std::string separator;
  for (const auto& e : entries_) {
    if (e.kind == Kind::kIgnore && (!e.side || *e.side == side)) {
      separator = e.source;
      break;
    }
  }
  std::string out;
  SegmentSequence prefix;
  for (const auto& token : seq.tokens) {
    const auto spelling = spell(token, side);
    if (!spelling) throw DataError("token '" + token + "' has no spelling in the token map");
    prefix.tokens.push_back(token);
    std::string candidate = out + *spelling;
    if (normalize(candidate, side) != prefix) {
      candidate = out + separator + *spelling;
      if (separator.empty() || normalize(candidate, side) != prefix) {
        throw DataError("cannot render '" + to_display(seq) + "' unambiguously");
      }
    }
    out = std::move(candidate);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verb endings

SuffixTable SuffixTable::from_lists(const std::vector<std::string>& oia,
                                    const std::vector<std::string>& nia, const TokenMap& tokens) {
  SuffixTable t;
  for (const auto& s : oia) t.oia_.push_back(tokens.normalize(s, Side::kOld));
  for (const auto& s : nia) t.nia_.push_back(tokens.normalize(s, Side::kModern));
  return t;
}

SuffixTable SuffixTable::load(const std::filesystem::path& path, const TokenMap& tokens) {
  const auto table = read_tsv(path);
  const auto side = table.require_column("side", path.string());
  const auto suffix = table.require_column("suffix", path.string());
  std::vector<std::string> oia, nia;
  for (const auto& row : table.rows) {
    if (row.size() <= std::max(side, suffix)) throw FormatError(path.string() + ": short row");
    const auto s = parse_side(row[side], path.string());
    if (!s) {
      oia.push_back(row[suffix]);
      nia.push_back(row[suffix]);
    } else {
      (*s == Side::kOld ? oia : nia).push_back(row[suffix]);
    }
  }
  return from_lists(oia, nia, tokens);
}

std::size_t SuffixTable::match_length(const SegmentSequence& seq, Side side) const {
  std::size_t best = 0;
  for (const auto& suf : side == Side::kOld ? oia_ : nia_) {
    if (suf.size() > seq.size() || suf.size() <= best) continue;
    if (std::equal(suf.tokens.begin(), suf.tokens.end(), seq.tokens.end() - suf.size())) {
      best = suf.size();
    }
  }
  return best;
}

std::optional<EtymonPair> strip_verb_ending(const EtymonPair& pair, const SuffixTable& suffixes) {
  if (!pair.is_verb) return pair;
  EtymonPair out = pair;
  out.oia_form.tokens.resize(out.oia_form.size() - suffixes.match_length(pair.oia_form, Side::kOld));
  out.nia_form.tokens.resize(out.nia_form.size() -
                             suffixes.match_length(pair.nia_form, Side::kModern));
  if (out.oia_form.empty() || out.nia_form.empty()) return std::nullopt;
  return out;
}

CorpusTable strip_verbs(const CorpusTable& table, const SuffixTable& suffixes,
                        IngestReport& report) {
  CorpusTable out;
  out.dialects = table.dialects;
  out.provenance = table.provenance;
  out.languages = table.languages;
  for (auto& lang : out.languages) lang.word_count = 0;
  for (const auto& pair : table.pairs) {
    auto stripped = strip_verb_ending(pair, suffixes);
    if (!stripped) {
      report.add({"", 0, pair.etymon_id, "verb_stripped_empty",
                  pair.language + ": " + to_display(pair.oia_form) + " / " +
                      to_display(pair.nia_form)});
      continue;
    }
    ++out.languages[out.language_index(stripped->language)].word_count;
    out.pairs.push_back(std::move(*stripped));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Languages

CorpusTable merge_by_glottocode(const std::vector<RawRecord>& records) {
  struct Pool {
    std::optional<double> lat, lon;
    std::set<std::string> dialects;
    std::size_t count = 0;
  };
  std::map<std::string, Pool> pools;
  for (const auto& rec : records) {
    if (rec.glottocode.empty()) throw MetadataError("record without glottocode: " + rec.pair.etymon_id);
    auto& pool = pools[rec.glottocode];
    auto reconcile = [&](std::optional<double>& have, const std::optional<double>& incoming) {
      if (!incoming) return;
      if (have && *have != *incoming) {
        throw MetadataError("conflicting coordinates for glottocode " + rec.glottocode);
      }
      have = incoming;
    };
    reconcile(pool.lat, rec.latitude);
    reconcile(pool.lon, rec.longitude);
    if (!rec.dialect.empty()) pool.dialects.insert(rec.dialect);
    ++pool.count;
  }

  CorpusTable table;
  for (const auto& [code, pool] : pools) {
    LanguageEntry entry;
    entry.glottocode = code;
    std::string name;
    for (const auto& d : pool.dialects) {
      if (!name.empty()) name += "; ";
      name += d;
    }
    entry.name = name.empty() ? code : name;
    entry.latitude = pool.lat;
    entry.longitude = pool.lon;
    entry.word_count = pool.count;
    table.languages.push_back(std::move(entry));
    table.dialects[code] = {pool.dialects.begin(), pool.dialects.end()};
  }
  table.pairs.reserve(records.size());
  for (const auto& rec : records) {
    EtymonPair pair = rec.pair;
    pair.language = rec.glottocode;
    table.pairs.push_back(std::move(pair));
  }
  return table;
}

std::map<std::string, LanguageMeta> load_language_meta(const std::filesystem::path& path) {
  const auto table = read_tsv(path);
  const auto origin = path.string();
  const auto code = table.require_column("glottocode", origin);
  const auto name = table.require_column("name", origin);
  const auto lat = table.require_column("latitude", origin);
  const auto lon = table.require_column("longitude", origin);
  std::map<std::string, LanguageMeta> meta;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto where = origin + ":" + std::to_string(table.line_numbers[r]);
    if (row.size() < table.header.size()) throw FormatError(where + ": short row");
    LanguageMeta m{row[code], row[name], parse_coordinate(row[lat]), parse_coordinate(row[lon])};
    if (m.latitude && std::abs(*m.latitude) > 90.0) throw MetadataError(where + ": latitude out of range");
    if (m.longitude && std::abs(*m.longitude) > 180.0) {
      throw MetadataError(where + ": longitude out of range");
    }
    auto [it, inserted] = meta.emplace(m.glottocode, m);
    if (!inserted) {
      auto& have = it->second;
      if (have.latitude != m.latitude || have.longitude != m.longitude) {
        throw MetadataError(where + ": conflicting coordinates for glottocode " + m.glottocode);
      }
      if (have.name != m.name) have.name += "; " + m.name;
    }
  }
  return meta;
}

LoadedCorpus load_corpus(const std::filesystem::path& data_path,
                         const std::filesystem::path& meta_path, const TokenMap& tokens) {
  const auto meta = load_language_meta(meta_path);
  const auto table = read_tsv(data_path);
  const auto origin = data_path.string();
  const auto c_id = table.require_column("etymon_id", origin);
  const auto c_code = table.require_column("glottocode", origin);
  const auto c_oia = table.require_column("oia_form", origin);
  const auto c_nia = table.require_column("nia_form", origin);
  const auto c_gloss = table.require_column("gloss", origin);
  const auto c_verb = table.require_column("is_verb", origin);
  const auto c_dialect = table.column("dialect");

  LoadedCorpus result;
  std::vector<RawRecord> records;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto line = table.line_numbers[r];
    auto reject = [&](std::string reason, std::string detail) {
      result.report.add({origin, line, row.size() > c_id ? row[c_id] : "", std::move(reason),
                         std::move(detail)});
    };
    if (row.size() != table.header.size()) {
      reject("column_count", "expected " + std::to_string(table.header.size()) + " fields, got " +
                                 std::to_string(row.size()));
      continue;
    }
    const auto m = meta.find(row[c_code]);
    if (m == meta.end()) {
      reject("unknown_glottocode", row[c_code]);
      continue;
    }
    if (row[c_verb] != "0" && row[c_verb] != "1") {
      reject("bad_is_verb", row[c_verb]);
      continue;
    }
    RawRecord rec;
    rec.glottocode = row[c_code];
    rec.dialect = c_dialect != std::string::npos && !row[c_dialect].empty() ? row[c_dialect]
                                                                             : m->second.name;
    rec.latitude = m->second.latitude;
    rec.longitude = m->second.longitude;
    rec.pair.etymon_id = row[c_id];
    rec.pair.is_verb = row[c_verb] == "1";
    if (!row[c_gloss].empty()) rec.pair.gloss = row[c_gloss];
    try {
      rec.pair.oia_form = tokens.normalize(row[c_oia], Side::kOld);
      rec.pair.nia_form = tokens.normalize(row[c_nia], Side::kModern);
    } catch (const DataError& e) {
      reject("unmappable_character", e.what());
      continue;
    }
    if (rec.pair.oia_form.empty() || rec.pair.nia_form.empty()) {
      reject("empty_form", "");
      continue;
    }
    records.push_back(std::move(rec));
  }
  result.table = merge_by_glottocode(records);
  result.table.provenance["data_file"] = data_path.filename().string();
  result.table.provenance["meta_file"] = meta_path.filename().string();
  return result;
}

}  // namespace dialectmix

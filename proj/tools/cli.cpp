// Apache License, Version 2.0, refer to LICENSE.txt

#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dialectmix/align.hpp"
#include "dialectmix/changes.hpp"
#include "dialectmix/corpus.hpp"
#include "dialectmix/diagnostics.hpp"
#include "dialectmix/errors.hpp"
#include "dialectmix/hashing.hpp"
#include "dialectmix/model.hpp"
#include "dialectmix/priors.hpp"
#include "dialectmix/tsv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dialectmix::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

void write_file(const fs::path& path, std::string_view content) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write " + tmp.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw FormatError("cannot create output directory " + dir.string());
}

void require_file(const fs::path& path, std::string_view what) {
  if (!fs::is_regular_file(path)) throw FormatError(std::string(what) + " not found: " + path.string());
}

std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

// Applies config-file values to options the command line left unset.
void apply_config(CLI::App& cmd, const std::string& config_path) {
  if (config_path.empty()) return;
  const auto values = parse_config(read_text_file(config_path));
  for (const auto& [key, value] : values) {
    if (key == "config") throw UsageError("config files cannot nest");
    CLI::Option* opt = nullptr;
    try {
      opt = cmd.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw UsageError("unknown config key '" + key + "' for " + cmd.get_name());
    }
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string command;
  json settings = json::object();
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::optional<std::uint64_t> seed;
};

void write_manifest(const fs::path& dir, const Manifest& m, const std::string& name = "manifest.json") {
  json inputs = json::array();
  for (const auto& p : m.inputs) inputs.push_back({{"path", absolute_string(p)}, {"fnv1a", hash_file(p)}});
  json outputs = json::array();
  for (const auto& p : m.outputs) outputs.push_back({{"path", p.filename().string()}, {"fnv1a", hash_file(p)}});
  json j{{"command", m.command},
         {"version", std::string(library_version())},
         {"settings", m.settings},
         {"inputs", inputs},
         {"outputs", outputs}};
  j["seed"] = m.seed ? json(*m.seed) : json(nullptr);
  write_file(dir / name, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Extraction artifacts

struct LanguageRow {
  std::string glottocode;
  std::string name;
  std::optional<double> latitude;
  std::optional<double> longitude;
  std::size_t words = 0;
  std::size_t words_kept = 0;
};

std::string format_coord(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os << std::setprecision(10) << *v;
  return os.str();
}

std::string languages_tsv(const std::vector<LanguageRow>& rows) {
  std::string out = "glottocode\tname\tlatitude\tlongitude\twords\twords_kept\n";
  for (const auto& r : rows) {
    out += r.glottocode + "\t" + r.name + "\t" + format_coord(r.latitude) + "\t" + format_coord(r.longitude) +
           "\t" + std::to_string(r.words) + "\t" + std::to_string(r.words_kept) + "\n";
  }
  return out;
}

std::vector<LanguageRow> read_languages(const fs::path& path) {
  const auto t = read_tsv(path);
  const auto g = t.require_column("glottocode", path.string());
  const auto n = t.require_column("name", path.string());
  const auto la = t.require_column("latitude", path.string());
  const auto lo = t.require_column("longitude", path.string());
  const auto w = t.require_column("words", path.string());
  const auto k = t.require_column("words_kept", path.string());
  auto coord = [](const std::string& s) -> std::optional<double> {
    if (s.empty() || s == "NA") return std::nullopt;
    return std::stod(s);
  };
  std::vector<LanguageRow> out;
  for (const auto& row : t.rows) {
    out.push_back({row[g], row[n], coord(row[la]), coord(row[lo]), std::stoul(row[w]), std::stoul(row[k])});
  }
  return out;
}

struct Extraction {
  fs::path dir;
  ChangeCollection collection;
  std::vector<WordObservation> observations;
  std::vector<LanguageRow> languages;

  ModelData model_data() const {
    return {observations, BlockPartition::from_collection(collection), languages.size()};
  }
  std::vector<std::string> language_codes() const {
    std::vector<std::string> out;
    for (const auto& l : languages) out.push_back(l.glottocode);
    return out;
  }
  std::vector<fs::path> files() const {
    return {dir / "collection.json", dir / "observations.jsonl", dir / "languages.tsv"};
  }
};

Extraction load_extraction(const fs::path& dir) {
  Extraction e;
  e.dir = dir;
  for (const auto& f : e.files()) require_file(f, "extraction artifact");
  try {
    e.collection = ChangeCollection::from_json(json::parse(read_text_file(dir / "collection.json")));
  } catch (const json::exception& ex) {
    throw FormatError("collection.json: " + std::string(ex.what()));
  }
  e.observations = observations_from_jsonl(read_text_file(dir / "observations.jsonl"));
  e.languages = read_languages(dir / "languages.tsv");
  return e;
}

// ---------------------------------------------------------------------------
// Model settings

struct ModelOptions {
  std::string prior = "dirichlet";
  double alpha = 0.01;
  double eta = 4.0;
  double diag = 100.0;
  std::string features;
  ModelConfig config;
};

json model_settings_json(const ModelOptions& o, const fs::path& input) {
  const auto& c = o.config;
  return {{"input", absolute_string(input)},
          {"prior", o.prior},
          {"alpha", o.alpha},
          {"eta_dispersion", o.eta},
          {"diag_sigma", o.diag},
          {"features", o.features.empty() ? std::string() : absolute_string(o.features)},
          {"K", c.num_components},
          {"n_chains", c.n_chains},
          {"minibatch", c.minibatch},
          {"learning_rate", c.learning_rate},
          {"moment_weight_range", {c.moment_weight_low, c.moment_weight_high}},
          {"steps", c.steps ? json(*c.steps) : json(nullptr)},
          {"epochs", c.epochs},
          {"mc_samples", c.mc_samples},
          {"trace_samples", c.trace_samples},
          {"seed", c.seed},
          {"log_beta_prior_sd", c.log_beta_prior_sd},
          {"early_stop_window", c.early_stop_window},
          {"early_stop_tolerance", c.early_stop_tolerance}};
}

ModelOptions model_options_from_json(const json& j) {
  ModelOptions o;
  o.prior = j.at("prior").get<std::string>();
  o.alpha = j.at("alpha").get<double>();
  o.eta = j.at("eta_dispersion").get<double>();
  o.diag = j.at("diag_sigma").get<double>();
  o.features = j.at("features").get<std::string>();
  auto& c = o.config;
  c.num_components = j.at("K").get<std::size_t>();
  c.n_chains = j.at("n_chains").get<std::size_t>();
  c.minibatch = j.at("minibatch").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.moment_weight_low = j.at("moment_weight_range").at(0).get<double>();
  c.moment_weight_high = j.at("moment_weight_range").at(1).get<double>();
  if (!j.at("steps").is_null()) c.steps = j.at("steps").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.mc_samples = j.at("mc_samples").get<std::size_t>();
  c.trace_samples = j.at("trace_samples").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.log_beta_prior_sd = j.at("log_beta_prior_sd").get<double>();
  c.early_stop_window = j.at("early_stop_window").get<std::size_t>();
  c.early_stop_tolerance = j.at("early_stop_tolerance").get<double>();
  return o;
}

fs::path feature_path(const ModelOptions& o) {
  return o.features.empty() ? data_file("features.tsv") : fs::path(o.features);
}

// Builds the prior, reusing the covariance cache in cache_dir when its key matches.
PriorSpec make_prior(const ModelOptions& o, const ChangeCollection& collection, const fs::path& cache_dir,
                     bool write_cache) {
  PriorSpec prior;
  prior.kind = parse_prior_kind(o.prior);
  prior.dirichlet.alpha = o.alpha;
  if (prior.kind == PriorKind::kLogisticNormal) {
    const auto features = feature_path(o);
    const auto key = covariance_cache_key(collection, features, o.eta, o.diag);
    const auto cache = cache_dir / "covariance.bin";
    auto cov = load_covariance_cache(cache, key);
    if (!cov) {
      cov = std::make_unique<CovarianceSpec>(
          build_covariance(collection, FeatureTable::load(features), o.eta, o.diag));
      if (write_cache) save_covariance_cache(cache, *cov, key);
    }
    prior.covariance = std::move(cov);
  }
  return prior;
}

struct FitArtifacts {
  fs::path dir;
  ModelOptions options;
  Extraction extraction;
  std::vector<PosteriorTrace> traces;
  json summary;
};

FitArtifacts load_fit(const fs::path& dir) {
  FitArtifacts f;
  f.dir = dir;
  require_file(dir / "model.json", "fit settings");
  require_file(dir / "traces.jsonl", "trace file");
  require_file(dir / "summary.json", "fit summary");
  try {
    f.options = model_options_from_json(json::parse(read_text_file(dir / "model.json")));
    f.extraction = load_extraction(json::parse(read_text_file(dir / "model.json")).at("input").get<std::string>());
    f.summary = json::parse(read_text_file(dir / "summary.json"));
  } catch (const json::exception& ex) {
    throw FormatError(dir.string() + ": " + ex.what());
  }
  f.traces = traces_from_jsonl(read_text_file(dir / "traces.jsonl"));
  if (f.traces.empty()) throw FormatError("trace file has no samples: " + (dir / "traces.jsonl").string());
  return f;
}

// ---------------------------------------------------------------------------
// Commands

struct ExtractOptions {
  std::string data, meta, out, tokens, classes, suffixes, whitelist;
  std::size_t min_count = 5;
  std::size_t em_iterations = 20;
  double gap = -2.5;
};

void cmd_extract(const ExtractOptions& o, std::ostream& out) {
  require_file(o.data, "data file");
  require_file(o.meta, "metadata file");
  ensure_dir(o.out);
  const fs::path dir = o.out;
  Manifest manifest;
  manifest.command = "extract";
  manifest.inputs = {o.data, o.meta};

  const auto tokens_path = o.tokens.empty() ? data_file("tokens.tsv") : fs::path(o.tokens);
  const auto suffix_path = o.suffixes.empty() ? data_file("verb_suffixes.tsv") : fs::path(o.suffixes);
  const auto class_path = o.classes.empty() ? data_file("classes.tsv") : fs::path(o.classes);
  const auto white_path = o.whitelist.empty() ? data_file("whitelist.txt") : fs::path(o.whitelist);
  for (const auto& p : {tokens_path, suffix_path, class_path, white_path}) manifest.inputs.push_back(p);

  const auto tokens = TokenMap::load(tokens_path);
  auto loaded = load_corpus(o.data, o.meta, tokens);
  if (loaded.table.num_words() == 0) throw FormatError("corpus has no usable rows: " + o.data);
  auto corpus = strip_verbs(loaded.table, SuffixTable::load(suffix_path, tokens), loaded.report);

  EmOptions em;
  em.max_iterations = o.em_iterations;
  em.gap = o.gap;
  EmTrace em_trace;
  const auto classes = ClassMap::load(class_path);
  const auto scores = em_fit_scores(corpus, classes, em, &em_trace);
  const auto rules = extract_corpus_rules(corpus, classes, scores);
  const auto indexed = filter_and_index(rules, {load_whitelist(white_path), o.min_count});

  std::vector<LanguageRow> languages;
  for (const auto& l : corpus.languages) {
    languages.push_back({l.glottocode, l.name, l.latitude, l.longitude, l.word_count, 0});
  }
  for (const auto& w : indexed.observations) ++languages[w.language].words_kept;

  const auto& s = indexed.stats;
  json per_language = json::array();
  for (const auto& l : languages) {
    per_language.push_back({{"glottocode", l.glottocode}, {"words", l.words}, {"words_kept", l.words_kept}});
  }
  json stats{{"words", corpus.num_words()},
             {"languages", corpus.num_languages()},
             {"rejected_rows", loaded.report.rejected.size()},
             {"em_iterations", em_trace.iterations},
             {"rules", s.rules_in},
             {"rules_whitelisted", s.rules_whitelisted},
             {"rule_types_kept", s.rule_types_kept},
             {"pairs_kept", indexed.collection.num_pairs()},
             {"pairs_dropped_single_reflex", s.singleton_pairs_dropped},
             {"slots", indexed.collection.flat_size()},
             {"words_kept", s.words_kept},
             {"events", s.events_kept},
             {"per_language", per_language}};

  write_file(dir / "collection.json", indexed.collection.to_json().dump(2) + "\n");
  write_file(dir / "observations.jsonl", observations_to_jsonl(indexed.observations));
  write_file(dir / "languages.tsv", languages_tsv(languages));
  write_file(dir / "scores.tsv", scores.to_tsv());
  write_file(dir / "rejected.jsonl", loaded.report.to_json_lines());
  write_file(dir / "extract_stats.json", stats.dump(2) + "\n");
  for (const char* f : {"collection.json", "observations.jsonl", "languages.tsv", "scores.tsv", "rejected.jsonl",
                        "extract_stats.json"}) {
    manifest.outputs.push_back(dir / f);
  }
  manifest.settings = {{"min_count", o.min_count}, {"em_max_iterations", o.em_iterations}, {"gap", o.gap}};
  write_manifest(dir, manifest);

  out << "extracted " << s.words_kept << " of " << corpus.num_words() << " words, "
      << indexed.collection.num_pairs() << " sound-environment pairs, " << s.events_kept << " events; "
      << loaded.report.rejected.size() << " rows rejected\n";
}

void cmd_fit(const std::string& input, const std::string& out_dir, ModelOptions o, std::size_t threads,
             std::ostream& out) {
  const auto extraction = load_extraction(input);
  ensure_dir(out_dir);
  const fs::path dir = out_dir;
  o.config.threads = threads;
  o.config.prior = make_prior(o, extraction.collection, dir, true);
  o.config.prior.dirichlet.alpha = o.alpha;
  const auto data = extraction.model_data();
  o.config.validate();

  const auto results = fit(data, o.config);
  std::vector<PosteriorTrace> all;
  std::vector<PosteriorTrace> ok;
  json chains = json::array();
  for (const auto& r : results) {
    all.push_back(r.trace);
    if (!r.failed) ok.push_back(r.trace);
    chains.push_back({{"chain_id", r.trace.chain_id},
                      {"failed", r.failed},
                      {"early_stopped", r.early_stopped},
                      {"steps", r.steps_run},
                      {"rejected_steps", r.rejected_steps},
                      {"moment_weight", r.state.moment_weight}});
  }
  if (ok.empty()) throw InferenceError("every chain failed (non-finite ELBO)");

  std::vector<ComponentPermutation> perms;
  auto aligned = ok.size() >= 2 ? align_component_labels(ok, &perms) : ok;
  std::optional<ConvergenceReport> conv;
  if (aligned.size() >= 2) conv = rhat(aligned);

  json summary = summarize_fit(aligned, conv.value_or(ConvergenceReport{}));
  if (!conv) summary["rhat"] = nullptr;
  summary["model"] = model_settings_json(o, input);
  summary["chain_status"] = chains;
  summary["label_permutations"] = perms;
  summary["languages"] = extraction.language_codes();

  std::string rhat_tsv = "parameter\tbelow_1_1\ttotal\n";
  if (conv) {
    rhat_tsv += "beta\t" + std::to_string(conv->rhat_beta.value < 1.1 ? 1 : 0) + "\t1\n";
    rhat_tsv += "theta\t" + std::to_string(conv->theta_below) + "\t" + std::to_string(conv->rhat_theta.size()) + "\n";
    rhat_tsv += "phi\t" + std::to_string(conv->phi_below) + "\t" + std::to_string(conv->rhat_phi.size()) + "\n";
  }

  write_file(dir / "traces.jsonl", traces_to_jsonl(aligned));
  write_file(dir / "elbo.csv", elbo_history_csv(all));
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  write_file(dir / "rhat.tsv", rhat_tsv);
  write_file(dir / "model.json", model_settings_json(o, input).dump(2) + "\n");

  Manifest manifest;
  manifest.command = "fit";
  manifest.inputs = extraction.files();
  if (o.config.prior.kind == PriorKind::kLogisticNormal) manifest.inputs.push_back(feature_path(o));
  for (const char* f : {"traces.jsonl", "elbo.csv", "summary.json", "rhat.tsv", "model.json"}) {
    manifest.outputs.push_back(dir / f);
  }
  manifest.settings = model_settings_json(o, input);
  manifest.seed = o.config.seed;
  write_manifest(dir, manifest);

  out << "fit " << ok.size() << " of " << results.size() << " chains; posterior mean beta "
      << summary["beta"]["mean"].get<double>() << "\n";
}

struct PpcOptions {
  std::vector<std::string> fits;
  std::string out;
  std::vector<std::string> regimes;
  PpcConfig config;
  std::size_t bins = 20;
};

void cmd_ppc(PpcOptions o, std::ostream& out) {
  if (o.regimes.empty()) {
    for (auto r : kAllRegimes) o.regimes.push_back(to_string(r));
  }
  ensure_dir(o.out);
  const fs::path dir = o.out;
  std::vector<FitArtifacts> fits;
  for (const auto& f : o.fits) fits.push_back(load_fit(f));
  const auto reference = fits[0].extraction.collection.to_json().dump();
  for (const auto& f : fits) {
    if (f.extraction.collection.to_json().dump() != reference ||
        f.extraction.language_codes() != fits[0].extraction.language_codes()) {
      throw DataError("fits compared side by side must come from the same extraction");
    }
  }

  Manifest manifest;
  manifest.command = "ppc";
  manifest.seed = o.config.seed;
  json report_fits = json::array();
  std::vector<std::unique_ptr<AccuracyReport>> reports;
  std::vector<std::pair<std::string, const AccuracyReport*>> columns;
  std::map<std::string, int> label_uses;
  for (const auto& f : fits) {
    std::string label = f.options.prior;
    if (label_uses[label]++ > 0) label += "_" + std::to_string(label_uses[label]);
    const auto data = f.extraction.model_data();
    const auto prior = make_prior(f.options, f.extraction.collection, f.dir, false);
    json accuracy = json::object();
    for (const auto& name : o.regimes) {
      auto cfg = o.config;
      cfg.regime = parse_regime(name);
      reports.push_back(std::make_unique<AccuracyReport>(
          simulate_and_score(data, f.traces, prior, f.options.config.num_components, cfg)));
      accuracy[name] = accuracy_to_json(*reports.back(), f.extraction.language_codes(), f.extraction.collection);
      columns.emplace_back(label + "/" + name, reports.back().get());
    }
    const auto entropies = assignment_entropies(data, f.traces, o.config.iterations, o.config.seed, o.config.threads);
    report_fits.push_back({{"label", label},
                           {"fit", absolute_string(f.dir)},
                           {"prior", f.options.prior},
                           {"entropy", entropy_to_json(entropies, o.bins)},
                           {"accuracy", accuracy}});
    manifest.inputs.push_back(f.dir / "traces.jsonl");
    manifest.inputs.push_back(f.dir / "model.json");
  }
  for (const auto& p : fits[0].extraction.files()) manifest.inputs.push_back(p);

  json report{{"iterations", o.config.iterations},
              {"seed", o.config.seed},
              {"full_prior_beta_range", {o.config.full_prior_beta_low, o.config.full_prior_beta_high}},
              {"sparse_prior_beta", o.config.sparse_prior_beta},
              {"fits", report_fits}};
  if (fs::is_regular_file(dir / "shuffle_report.json")) {
    report["shuffle"] = json::parse(read_text_file(dir / "shuffle_report.json"));
  }
  write_file(dir / "ppc_report.json", report.dump(2) + "\n");
  write_file(dir / "per_language.csv", per_language_csv(columns, fits[0].extraction.language_codes()));
  write_file(dir / "per_distribution.csv", per_distribution_csv(columns, fits[0].extraction.collection));
  for (const char* f : {"ppc_report.json", "per_language.csv", "per_distribution.csv"}) manifest.outputs.push_back(dir / f);
  manifest.settings = {{"regimes", o.regimes}, {"iterations", o.config.iterations}, {"bins", o.bins}};
  write_manifest(dir, manifest, "ppc_manifest.json");

  for (const auto& [label, r] : columns) out << label << " mean per-word accuracy " << r->mean_per_word << "\n";
}

void cmd_shuffle(const std::string& fit_dir, const std::string& out_dir, std::size_t shuffles, std::uint64_t seed,
                 std::size_t threads, std::ostream& out) {
  auto f = load_fit(fit_dir);
  ensure_dir(out_dir);
  const fs::path dir = out_dir;
  auto cfg = f.options.config;
  cfg.threads = threads;
  cfg.prior = make_prior(f.options, f.extraction.collection, f.dir, false);
  const auto report = shuffle_test(f.extraction.model_data(), cfg, shuffles, seed, pooled_beta(f.traces));
  const auto j = shuffle_to_json(report);
  write_file(dir / "shuffle_report.json", j.dump(2) + "\n");

  Manifest manifest;
  manifest.command = "shuffle-test";
  manifest.seed = seed;
  manifest.inputs = {f.dir / "traces.jsonl", f.dir / "model.json"};
  for (const auto& p : f.extraction.files()) manifest.inputs.push_back(p);
  manifest.outputs = {dir / "shuffle_report.json"};
  manifest.settings = {{"shuffles", shuffles}};
  write_manifest(dir, manifest, "shuffle_manifest.json");

  for (std::size_t s = 0; s < report.n_shuffles(); ++s) {
    out << "shuffle " << s << ": z " << report.tests[s].z << " p " << report.tests[s].p << "\n";
  }
}

void cmd_export_map(const std::string& fit_dir, const std::string& out_dir, std::ostream& out) {
  const auto f = load_fit(fit_dir);
  ensure_dir(out_dir);
  const fs::path dir = out_dir;
  const auto& theta = f.summary.at("theta");
  const auto& langs = f.extraction.languages;
  if (theta.size() != langs.size()) throw DataError("summary and extraction disagree on the language count");
  const auto K = theta.empty() ? 0 : theta.at(0).size();

  std::ostringstream os;
  os << std::setprecision(10);
  os << "glottocode,name,latitude,longitude";
  for (std::size_t k = 1; k <= K; ++k) os << ",theta_mean_" << k;
  for (std::size_t k = 1; k <= K; ++k) os << ",theta_q025_" << k << ",theta_q975_" << k;
  os << '\n';
  std::size_t rows = 0;
  for (std::size_t l = 0; l < langs.size(); ++l) {
    const auto& lang = langs[l];
    if (!lang.latitude || !lang.longitude) continue;
    std::string name = lang.name;
    if (name.find_first_of(",\"") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : name) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
      name = quoted + "\"";
    }
    os << lang.glottocode << ',' << name << ',' << *lang.latitude << ',' << *lang.longitude;
    for (std::size_t k = 0; k < K; ++k) os << ',' << theta[l][k]["mean"].get<double>();
    for (std::size_t k = 0; k < K; ++k) os << ',' << theta[l][k]["q025"].get<double>() << ',' << theta[l][k]["q975"].get<double>();
    os << '\n';
    ++rows;
  }
  write_file(dir / "map.csv", os.str());
  Manifest manifest;
  manifest.command = "export-map";
  manifest.inputs = {f.dir / "summary.json", f.extraction.dir / "languages.tsv"};
  manifest.outputs = {dir / "map.csv"};
  write_manifest(dir, manifest, "map_manifest.json");
  out << "wrote " << rows << " of " << langs.size() << " languages (with coordinates)\n";
}

}  // namespace

std::map<std::string, std::string> parse_config(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(line_no) + ": expected key=value");
    auto key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw FormatError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dialect mixture modelling of conditioned sound changes", "dialectmix"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(library_version()));

  std::string config_path;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key=value file; flags take precedence")->check(CLI::ExistingFile);
  };

  ExtractOptions ex;
  auto* extract = app.add_subcommand("extract", "corpus -> sound-change collection and observations");
  extract->add_option("--data", ex.data, "etymon/reflex TSV");
  extract->add_option("--meta", ex.meta, "language metadata TSV");
  extract->add_option("--out", ex.out, "output directory");
  extract->add_option("--tokens", ex.tokens, "token map TSV (default: shipped)");
  extract->add_option("--classes", ex.classes, "sound-class TSV (default: shipped)");
  extract->add_option("--suffixes", ex.suffixes, "verb suffix TSV (default: shipped)");
  extract->add_option("--whitelist", ex.whitelist, "source segment list (default: shipped)");
  extract->add_option("--min-count", ex.min_count, "keep rule types seen more than this")->check(CLI::PositiveNumber);
  extract->add_option("--em-iterations", ex.em_iterations, "cap on alignment EM iterations");
  extract->add_option("--gap", ex.gap, "alignment gap score");
  add_config(extract);

  std::string fit_input, fit_out;
  ModelOptions mo;
  std::size_t threads = 1;
  auto* fitc = app.add_subcommand("fit", "variational inference over extracted observations");
  fitc->add_option("--input", fit_input, "extraction directory");
  fitc->add_option("--out", fit_out, "output directory");
  fitc->add_option("--prior", mo.prior, "dirichlet or logistic_normal")
      ->check(CLI::IsMember({"dirichlet", "logistic_normal"}));
  fitc->add_option("--alpha", mo.alpha, "Dirichlet concentration of each reflex block")->check(CLI::PositiveNumber);
  fitc->add_option("--eta", mo.eta, "cross-pair covariance dispersion")->check(CLI::NonNegativeNumber);
  fitc->add_option("--diag", mo.diag, "covariance diagonal boost")->check(CLI::NonNegativeNumber);
  fitc->add_option("--features", mo.features, "segment feature TSV (default: shipped)");
  fitc->add_option("--components", mo.config.num_components, "K")->check(CLI::Range(2, 16));
  fitc->add_option("--chains", mo.config.n_chains, "independent optimization runs")->check(CLI::PositiveNumber);
  fitc->add_option("--minibatch", mo.config.minibatch, "words per step")->check(CLI::PositiveNumber);
  fitc->add_option("--learning-rate", mo.config.learning_rate, "Adam step size")->check(CLI::PositiveNumber);
  fitc->add_option("--moment-weight-low", mo.config.moment_weight_low, "lower bound of the per-chain Adam first-moment weight");
  fitc->add_option("--moment-weight-high", mo.config.moment_weight_high, "upper bound of the per-chain Adam first-moment weight");
  fitc->add_option("--steps", mo.config.steps, "optimization steps (default: epochs over the data)");
  fitc->add_option("--epochs", mo.config.epochs, "passes over the data when --steps is unset")->check(CLI::PositiveNumber);
  fitc->add_option("--mc-samples", mo.config.mc_samples, "Monte Carlo draws per gradient estimate")->check(CLI::PositiveNumber);
  fitc->add_option("--trace-samples", mo.config.trace_samples, "posterior draws kept per chain")->check(CLI::PositiveNumber);
  fitc->add_option("--seed", mo.config.seed, "random seed");
  fitc->add_option("--threads", threads, "chains run in parallel")->check(CLI::PositiveNumber);
  add_config(fitc);

  PpcOptions po;
  auto* ppc = app.add_subcommand("ppc", "posterior predictive checks for one or more fits");
  ppc->add_option("--fit", po.fits, "fit directory (repeat to compare priors)");
  ppc->add_option("--out", po.out, "output directory");
  ppc->add_option("--regime", po.regimes, "one of the four regimes (repeatable; default all)")
      ->check(CLI::IsMember({"full_prior", "sparse_prior", "posterior_no_assignment", "posterior_with_assignment"}));
  ppc->add_option("--iterations", po.config.iterations, "simulations per regime")->check(CLI::PositiveNumber);
  ppc->add_option("--seed", po.config.seed, "random seed");
  ppc->add_option("--beta-low", po.config.full_prior_beta_low, "lower bound of beta under the full prior")->check(CLI::PositiveNumber);
  ppc->add_option("--beta-high", po.config.full_prior_beta_high, "upper bound of beta under the full prior")->check(CLI::PositiveNumber);
  ppc->add_option("--sparse-beta", po.config.sparse_prior_beta, "beta under the sparse prior")->check(CLI::PositiveNumber);
  ppc->add_option("--bins", po.bins, "entropy histogram bins")->check(CLI::PositiveNumber);
  ppc->add_option("--threads", po.config.threads, "worker threads")->check(CLI::PositiveNumber);
  add_config(ppc);

  std::string sh_fit, sh_out;
  std::size_t shuffles = 4;
  std::uint64_t sh_seed = 1;
  std::size_t sh_threads = 1;
  auto* shuffle = app.add_subcommand("shuffle-test", "refit on language-shuffled data and z-test beta");
  shuffle->add_option("--fit", sh_fit, "fit directory");
  shuffle->add_option("--out", sh_out, "output directory");
  shuffle->add_option("--shuffles", shuffles, "number of shuffled refits")->check(CLI::PositiveNumber);
  shuffle->add_option("--seed", sh_seed, "random seed for the shuffles");
  shuffle->add_option("--threads", sh_threads, "chains run in parallel")->check(CLI::PositiveNumber);
  add_config(shuffle);

  std::string map_fit, map_out;
  auto* map = app.add_subcommand("export-map", "per-language component weights with coordinates");
  map->add_option("--fit", map_fit, "fit directory");
  map->add_option("--out", map_out, "output directory");
  add_config(map);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (auto* cmd : app.get_subcommands()) {
      apply_config(*cmd, config_path);
      for (const char* name : {"--data", "--meta", "--input", "--fit", "--out"}) {
        const auto* opt = cmd->get_option_no_throw(name);
        if (opt && opt->count() == 0) throw UsageError(std::string(name) + " is required for " + cmd->get_name());
      }
    }
    if (*extract) cmd_extract(ex, out);
    if (*fitc) cmd_fit(fit_input, fit_out, mo, threads, out);
    if (*ppc) cmd_ppc(po, out);
    if (*shuffle) cmd_shuffle(sh_fit, sh_out, shuffles, sh_seed, sh_threads, out);
    if (*map) cmd_export_map(map_fit, map_out, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InferenceError& e) {
    err << "inference failure: " << e.what() << "\n";
    return kExitInference;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const json::exception& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "file error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace dialectmix::cli

// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/priors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <numbers>

#include "dialectmix/errors.hpp"
#include "dialectmix/hashing.hpp"
#include "dialectmix/tsv.hpp"

namespace dialectmix {

namespace {
constexpr std::string_view kNasalTilde = "\xcc\x83";
constexpr double kProbFloor = 1e-12;
constexpr double kMinEigenvalue = 1e-8;
constexpr char kCacheMagic[8] = {'D', 'M', 'X', 'C', 'O', 'V', '0', '1'};
}  // namespace

BlockPartition BlockPartition::from_collection(const ChangeCollection& collection) {
  return BlockPartition{collection.offsets()};
}

BlockPartition BlockPartition::from_sizes(const std::vector<std::size_t>& sizes) {
  BlockPartition p;
  for (auto s : sizes) p.offsets.push_back(p.offsets.back() + s);
  return p;
}

void log_softmax_partitioned(std::span<double> values, const BlockPartition& partition) {
  for (std::size_t b = 0; b < partition.num_blocks(); ++b) {
    const auto begin = values.begin() + static_cast<std::ptrdiff_t>(partition.offsets[b]);
    const auto end = values.begin() + static_cast<std::ptrdiff_t>(partition.offsets[b + 1]);
    const double mx = *std::max_element(begin, end);
    double sum = 0.0;
    for (auto it = begin; it != end; ++it) sum += std::exp(*it - mx);
    const double lse = mx + std::log(sum);
    for (auto it = begin; it != end; ++it) *it -= lse;
  }
}

CollectionSimplex softmax_partitioned(std::span<const double> latent,
                                      const BlockPartition& partition) {
  if (latent.size() != partition.flat_size()) {
    throw DataError("softmax_partitioned: latent size does not match partition");
  }
  CollectionSimplex out{{latent.begin(), latent.end()}, partition};
  log_softmax_partitioned(out.values, partition);
  for (auto& v : out.values) v = std::exp(v);
  return out;
}

// ---------------------------------------------------------------------------
// Features

FeatureTable FeatureTable::load(const std::filesystem::path& path) {
  const auto table = read_tsv(path);
  const auto origin = path.string();
  const std::array<std::size_t, kNumFeatures + 1> cols{
      table.require_column("segment", origin),  table.require_column("consonance", origin),
      table.require_column("place", origin),    table.require_column("manner", origin),
      table.require_column("voicing", origin),  table.require_column("nasality", origin)};
  FeatureTable ft;
  for (const auto& row : table.rows) {
    if (row.size() < table.header.size()) throw FormatError(origin + ": short row");
    FeatureVector fv;
    for (std::size_t d = 0; d < kNumFeatures; ++d) fv[d] = row[cols[d + 1]];
    ft.rows_[row[cols[0]]] = std::move(fv);
  }
  return ft;
}

FeatureTable FeatureTable::load_default() { return load(data_file("features.tsv")); }

FeatureVector FeatureTable::features(const std::string& segment) const {
  if (auto it = rows_.find(segment); it != rows_.end()) return it->second;
  std::string_view base = segment;
  bool nasal = false;
  while (base.size() > kNasalTilde.size() && base.ends_with(kNasalTilde)) {
    base.remove_suffix(kNasalTilde.size());
    nasal = true;
    if (auto it = rows_.find(std::string(base)); it != rows_.end()) {
      auto fv = it->second;
      if (nasal) fv[4] = "nasal";
      return fv;
    }
  }
  throw DataError("segment '" + segment + "' has no feature entry");
}

int feature_mismatch(const RewriteRule& a, const RewriteRule& b, const FeatureTable& features) {
  const auto sa = features.features(a.source), sb = features.features(b.source);
  const auto ra = features.features(a.reflex), rb = features.features(b.reflex);
  const auto la = features.features(a.left), lb = features.features(b.left);
  const auto ga = features.features(a.right), gb = features.features(b.right);
  int total = 0;
  for (std::size_t d = 0; d < kNumFeatures; ++d) {
    total += (sa[d] == sb[d] && ra[d] == rb[d]) ? 0 : 1;
    total += (la[d] == lb[d] && ga[d] == gb[d]) ? 0 : 1;
  }
  return total;
}

double dissimilarity(const RewriteRule& a, const RewriteRule& b, const FeatureTable& features) {
  return std::exp(-static_cast<double>(feature_mismatch(a, b, features)));
}

// ---------------------------------------------------------------------------
// Covariance

Eigen::MatrixXd covariance_matrix(const ChangeCollection& collection, const FeatureTable& features,
                                  double eta_dispersion, double diag_sigma) {
  const auto n = static_cast<Eigen::Index>(collection.flat_size());
  std::vector<RewriteRule> rules;
  std::vector<std::array<FeatureVector, 4>> fv;
  rules.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    rules.push_back(collection.rule_at(static_cast<std::size_t>(i)));
    const auto& r = rules.back();
    fv.push_back({features.features(r.source), features.features(r.reflex),
                  features.features(r.left), features.features(r.right)});
  }
  Eigen::MatrixXd sigma(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const auto& a = fv[static_cast<std::size_t>(i)];
      const auto& b = fv[static_cast<std::size_t>(j)];
      int mismatch = 0;
      for (std::size_t d = 0; d < kNumFeatures; ++d) {
        mismatch += (a[0][d] == b[0][d] && a[1][d] == b[1][d]) ? 0 : 1;
        mismatch += (a[2][d] == b[2][d] && a[3][d] == b[3][d]) ? 0 : 1;
      }
      double v = std::exp(-static_cast<double>(mismatch));
      if (collection.pair_of_slot(static_cast<std::size_t>(i)) !=
          collection.pair_of_slot(static_cast<std::size_t>(j))) {
        v *= eta_dispersion;
      }
      sigma(i, j) = v;
      sigma(j, i) = v;
    }
    sigma(i, i) += diag_sigma;
  }
  return sigma;
}

double smallest_eigenvalue(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) return std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

CovarianceSpec make_covariance_spec(Eigen::MatrixXd sigma, BlockPartition partition,
                                    double eta_dispersion, double diag_sigma) {
  if (sigma.rows() != sigma.cols() ||
      static_cast<std::size_t>(sigma.rows()) != partition.flat_size()) {
    throw DataError("covariance: matrix shape does not match partition");
  }
  CovarianceSpec spec;
  spec.eta_dispersion = eta_dispersion;
  spec.diag_sigma = diag_sigma;
  spec.partition = std::move(partition);
  const Eigen::Index n = sigma.rows();

  double ridge = 0.0;
  double next = kMinEigenvalue;
  for (int attempt = 0; attempt < 80; ++attempt) {
    Eigen::MatrixXd candidate = sigma;
    candidate.diagonal().array() += ridge;
    Eigen::LLT<Eigen::MatrixXd> llt(candidate);
    if (llt.info() == Eigen::Success && smallest_eigenvalue(candidate) >= kMinEigenvalue) {
      spec.sigma = std::move(candidate);
      spec.cholesky_lower = llt.matrixL();
      spec.precision = llt.solve(Eigen::MatrixXd::Identity(n, n));
      spec.precision = 0.5 * (spec.precision + spec.precision.transpose()).eval();
      spec.log_det = 2.0 * spec.cholesky_lower.diagonal().array().log().sum();
      spec.ridge = ridge;
      return spec;
    }
    ridge = next;
    next *= 2.0;
  }
  throw DataError("covariance repair failed; smallest eigenvalue " +
                  std::to_string(smallest_eigenvalue(sigma)));
}

CovarianceSpec build_covariance(const ChangeCollection& collection, const FeatureTable& features,
                                double eta_dispersion, double diag_sigma) {
  return make_covariance_spec(covariance_matrix(collection, features, eta_dispersion, diag_sigma),
                              BlockPartition::from_collection(collection), eta_dispersion,
                              diag_sigma);
}

std::string covariance_cache_key(const ChangeCollection& collection,
                                 const std::filesystem::path& feature_file, double eta_dispersion,
                                 double diag_sigma) {
  Fnv1a h;
  h.update(collection.to_json().dump());
  h.update(read_text_file(feature_file));
  h.update(&eta_dispersion, sizeof eta_dispersion);
  h.update(&diag_sigma, sizeof diag_sigma);
  return h.hex();
}

void save_covariance_cache(const std::filesystem::path& path, const CovarianceSpec& spec,
                           const std::string& key) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write(kCacheMagic, sizeof kCacheMagic);
  const std::uint64_t key_len = key.size();
  put(key_len);
  out.write(key.data(), static_cast<std::streamsize>(key.size()));
  const std::uint64_t blocks = spec.partition.offsets.size();
  put(blocks);
  for (auto o : spec.partition.offsets) put(static_cast<std::uint64_t>(o));
  put(spec.eta_dispersion);
  put(spec.diag_sigma);
  put(spec.ridge);
  // The matrix stored is the one before the ridge; repair is re-run on load.
  Eigen::MatrixXd raw = spec.sigma;
  raw.diagonal().array() -= spec.ridge;
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(raw.size())));
}

std::unique_ptr<CovarianceSpec> load_covariance_cache(const std::filesystem::path& path,
                                                      const std::string& key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return nullptr;
  auto get = [&](auto& v) { return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof v)); };
  char magic[sizeof kCacheMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCacheMagic, sizeof magic) != 0) return nullptr;
  std::uint64_t key_len = 0;
  if (!get(key_len) || key_len > 1024) return nullptr;
  std::string stored(key_len, '\0');
  if (!in.read(stored.data(), static_cast<std::streamsize>(key_len)) || stored != key) return nullptr;
  std::uint64_t blocks = 0;
  if (!get(blocks) || blocks == 0 || blocks > (1u << 24)) return nullptr;
  BlockPartition partition;
  partition.offsets.clear();
  for (std::uint64_t b = 0; b < blocks; ++b) {
    std::uint64_t o = 0;
    if (!get(o)) return nullptr;
    partition.offsets.push_back(o);
  }
  double eta = 0, diag = 0, ridge = 0;
  if (!get(eta) || !get(diag) || !get(ridge)) return nullptr;
  const auto n = static_cast<Eigen::Index>(partition.flat_size());
  Eigen::MatrixXd raw(n, n);
  if (!in.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(raw.size())))) {
    return nullptr;
  }
  return std::make_unique<CovarianceSpec>(make_covariance_spec(std::move(raw), std::move(partition), eta, diag));
}

// ---------------------------------------------------------------------------
// Sampling and densities

std::string to_string(PriorKind kind) {
  return kind == PriorKind::kDirichlet ? "dirichlet" : "logistic_normal";
}

PriorKind parse_prior_kind(std::string_view name) {
  if (name == "dirichlet") return PriorKind::kDirichlet;
  if (name == "logistic_normal" || name == "logistic-normal") return PriorKind::kLogisticNormal;
  throw DataError("unknown prior kind '" + std::string(name) + "'");
}

double sample_log_gamma(double shape, Rng& rng) {
  // Gamma(a) = Gamma(a + 1) * U^(1/a) keeps tiny shapes away from underflow.
  if (shape < 1.0) {
    std::gamma_distribution<double> g(shape + 1.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double uu = 0.0;
    while (uu == 0.0) uu = u(rng);
    return std::log(g(rng)) + std::log(uu) / shape;
  }
  std::gamma_distribution<double> g(shape, 1.0);
  return std::log(g(rng));
}

std::vector<double> sample_dirichlet(double alpha, std::size_t size, Rng& rng) {
  std::vector<double> logs(size);
  for (auto& v : logs) v = sample_log_gamma(alpha, rng);
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (auto& v : logs) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : logs) v /= sum;
  return logs;
}

CollectionSimplex sample_collection(const PriorSpec& prior, const BlockPartition& partition,
                                    Rng& rng) {
  if (prior.kind == PriorKind::kDirichlet) {
    CollectionSimplex out{std::vector<double>(partition.flat_size()), partition};
    for (std::size_t b = 0; b < partition.num_blocks(); ++b) {
      const auto draw = sample_dirichlet(prior.dirichlet.alpha, partition.block_size(b), rng);
      std::copy(draw.begin(), draw.end(), out.values.begin() + static_cast<std::ptrdiff_t>(partition.offsets[b]));
    }
    return out;
  }
  if (!prior.covariance || prior.covariance->dim() != partition.flat_size()) {
    throw DataError("logistic normal prior needs a covariance matching the collection");
  }
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(static_cast<Eigen::Index>(partition.flat_size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  const Eigen::VectorXd latent = prior.covariance->cholesky_lower * z;
  return softmax_partitioned({latent.data(), static_cast<std::size_t>(latent.size())}, partition);
}

double dirichlet_log_density(const CollectionSimplex& simplex, double alpha) {
  const auto& part = simplex.partition;
  double total = 0.0;
  for (std::size_t b = 0; b < part.num_blocks(); ++b) {
    const auto m = static_cast<double>(part.block_size(b));
    total += std::lgamma(m * alpha) - m * std::lgamma(alpha);
    for (std::size_t s = part.offsets[b]; s < part.offsets[b + 1]; ++s) {
      total += (alpha - 1.0) * std::log(std::max(simplex.values[s], kProbFloor));
    }
  }
  return total;
}

double logistic_normal_log_density(std::span<const double> latent, const CovarianceSpec& cov) {
  if (latent.size() != cov.dim()) throw DataError("latent size does not match covariance");
  const Eigen::Map<const Eigen::VectorXd> x(latent.data(), static_cast<Eigen::Index>(latent.size()));
  const Eigen::VectorXd y = cov.cholesky_lower.triangularView<Eigen::Lower>().solve(x);
  const double n = static_cast<double>(latent.size());
  return -0.5 * y.squaredNorm() - 0.5 * (n * std::log(2.0 * std::numbers::pi) + cov.log_det);
}

}  // namespace dialectmix

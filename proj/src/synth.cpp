#include "grouprobe/synth.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "grouprobe/error.hpp"
#include "grouprobe/kernels.hpp"

namespace grouprobe {

void SynthConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::InvalidArgument, what); };
  if (num_classes < 2 || num_attrs < 2) bad("synthetic data needs K >= 2 and |S| >= 2");
  if (d < num_classes + num_attrs)
    bad("d=" + std::to_string(d) + " is too small to orthogonalize K+|S| directions");
  if (!(rho >= 0.5 && rho < 1.0)) bad("rho must be in [0.5, 1)");
  if (!(alpha >= 0.0 && beta >= 0.0 && sigma >= 0.0)) bad("alpha, beta, sigma must be >= 0");
  if (sigma == 0.0 && alpha == 0.0 && beta == 0.0) bad("all-zero signal and noise");
  if (n_train < num_classes * num_attrs) bad("n_train too small to populate every group");
}

double SynthConfig::group_prior(int y, int s) const {
  const double py = 1.0 / static_cast<double>(num_classes);
  if (s == aligned_attribute(y)) return py * rho;
  return py * (1.0 - rho) / static_cast<double>(num_attrs - 1);
}

SynthGeometry make_geometry(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t total = cfg.num_classes + cfg.num_attrs;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix dirs(total, cfg.d);
  for (std::size_t r = 0; r < total; ++r) {
    auto row = dirs.row(r);
    for (double& v : row) v = normal(rng);
    // Modified Gram-Schmidt against the earlier rows, twice for stability.
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t q = 0; q < r; ++q) {
        const double proj = dot(row, dirs.row(q));
        auto prev = dirs.row(q);
        for (std::size_t k = 0; k < cfg.d; ++k) row[k] -= proj * prev[k];
      }
    const double nrm = norm2(row);
    for (double& v : row) v /= nrm;
  }
  SynthGeometry g{Matrix(cfg.num_classes, cfg.d), Matrix(cfg.num_attrs, cfg.d)};
  for (std::size_t r = 0; r < cfg.num_classes; ++r) {
    auto src = dirs.row(r);
    std::copy(src.begin(), src.end(), g.class_dirs.row(r).begin());
  }
  for (std::size_t r = 0; r < cfg.num_attrs; ++r) {
    auto src = dirs.row(cfg.num_classes + r);
    std::copy(src.begin(), src.end(), g.attr_dirs.row(r).begin());
  }
  return g;
}

namespace {

struct Draw {
  int y;
  int s;
};

void sample_embedding(const SynthConfig& cfg, const SynthGeometry& geom, int y, int s,
                      std::mt19937_64& rng, std::normal_distribution<double>& normal,
                      std::span<double> out) {
  auto u = geom.class_dirs.row(static_cast<std::size_t>(y));
  auto v = geom.attr_dirs.row(static_cast<std::size_t>(s));
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = cfg.alpha * u[k] + cfg.beta * v[k] + cfg.sigma * normal(rng);
  const double nrm = norm2(out);
  for (double& x : out) x /= nrm;
}

Draw sample_labels(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(cfg.num_classes) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, static_cast<int>(cfg.num_attrs) - 2);
  const int y = cls(rng);
  const int aligned = cfg.aligned_attribute(y);
  if (unit(rng) < cfg.rho) return {y, aligned};
  int s = other(rng);
  if (s >= aligned) ++s;
  return {y, s};
}

// log ∫_0^∞ r^(d-1) exp(-(r² - 2 r t) / (2σ²)) dr, by trapezoid around the
// mode in log space.
double log_radial_integral(double t, std::size_t d, double sigma) {
  const double s2 = sigma * sigma;
  const double a = static_cast<double>(d - 1);
  const double mode = 0.5 * (t + std::sqrt(t * t + 4.0 * a * s2));
  const double width = 1.0 / std::sqrt(a / (mode * mode) + 1.0 / s2);
  const double lo = std::max(mode - 12.0 * width, 0.0);
  const double hi = mode + 12.0 * width;
  constexpr int kPoints = 241;
  const double h = (hi - lo) / (kPoints - 1);
  auto log_f = [&](double r) {
    if (r <= 0.0) return -std::numeric_limits<double>::infinity();
    return a * std::log(r) - (r * r - 2.0 * r * t) / (2.0 * s2);
  };
  const double peak = log_f(mode);
  double sum = 0.0;
  for (int k = 0; k < kPoints; ++k) {
    const double wt = (k == 0 || k == kPoints - 1) ? 0.5 : 1.0;
    sum += wt * std::exp(log_f(lo + k * h) - peak);
  }
  return peak + std::log(sum * h);
}

}  // namespace

DatasetBundle gen_spurious_dataset(const SynthConfig& cfg) {
  const SynthGeometry geom = make_geometry(cfg);
  std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t n = cfg.n_train + cfg.n_val + cfg.n_test;
  Matrix x(n, cfg.d);
  SampleTable samples;
  samples.rows.reserve(n);
  std::vector<std::size_t> train_groups(cfg.num_classes * cfg.num_attrs, 0);
  const std::pair<Split, std::size_t> plan[] = {
      {Split::Train, cfg.n_train}, {Split::Val, cfg.n_val}, {Split::Test, cfg.n_test}};
  std::size_t i = 0;
  char id[48];
  for (const auto& [split, count] : plan) {
    for (std::size_t k = 0; k < count; ++k, ++i) {
      const Draw draw = sample_labels(cfg, rng);
      sample_embedding(cfg, geom, draw.y, draw.s, rng, normal, x.row(i));
      std::snprintf(id, sizeof id, "%s_%06zu", to_string(split), k);
      samples.rows.push_back({id, draw.y, draw.s, split, kUnknownAttribute});
      if (split == Split::Train)
        ++train_groups[static_cast<std::size_t>(draw.y) * cfg.num_attrs +
                       static_cast<std::size_t>(draw.s)];
    }
  }
  for (std::size_t g = 0; g < train_groups.size(); ++g)
    if (train_groups[g] == 0)
      fail(ErrorKind::Validation, "synthetic train split left group " + std::to_string(g) +
                                      " empty; raise n_train or lower rho");

  std::vector<PromptEntry> manifest;
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    manifest.push_back({PromptRole::Class, c, "synthetic class " + std::to_string(c)});
  for (std::size_t s = 0; s < cfg.num_attrs; ++s)
    manifest.push_back({PromptRole::Attribute, s, "synthetic attribute " + std::to_string(s)});

  return DatasetBundle{EmbeddingMatrix(std::move(x), Dtype::F64, true), std::move(samples),
                       PromptBank{EmbeddingMatrix(geom.class_dirs, Dtype::F64, true),
                                  EmbeddingMatrix(geom.attr_dirs, Dtype::F64, true),
                                  std::move(manifest)}};
}

int bayes_classify(const SynthConfig& cfg, const SynthGeometry& geom, std::span<const double> x) {
  const std::size_t K = cfg.num_classes, S = cfg.num_attrs;
  if (cfg.sigma == 0.0) {
    // Noiseless: the embedding is exactly one of the normalized group means.
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t y = 0; y < K; ++y)
      for (std::size_t s = 0; s < S; ++s) {
        const double t = cfg.alpha * dot(x, geom.class_dirs.row(y)) +
                         cfg.beta * dot(x, geom.attr_dirs.row(s));
        if (t > best) {
          best = t;
          arg = static_cast<int>(y);
        }
      }
    return arg;
  }
  std::vector<double> scores(K);
  for (std::size_t y = 0; y < K; ++y) {
    const double xu = dot(x, geom.class_dirs.row(y));
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(S);
    for (std::size_t s = 0; s < S; ++s) {
      const double t = cfg.alpha * xu + cfg.beta * dot(x, geom.attr_dirs.row(s));
      terms[s] = std::log(cfg.group_prior(static_cast<int>(y), static_cast<int>(s))) +
                 log_radial_integral(t, cfg.d, cfg.sigma);
      mx = std::max(mx, terms[s]);
    }
    double sum = 0.0;
    for (double v : terms) sum += std::exp(v - mx);
    scores[y] = mx + std::log(sum);
  }
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

OracleReport bayes_oracle(const SynthConfig& cfg, std::size_t mc_samples) {
  if (mc_samples < kMinOracleSamples)
    fail(ErrorKind::InvalidArgument, "Bayes oracle needs at least 10^4 Monte Carlo samples");
  const SynthGeometry geom = make_geometry(cfg);
  const std::size_t K = cfg.num_classes, S = cfg.num_attrs, G = K * S;
  constexpr std::size_t kShards = 64;
  std::vector<std::size_t> hits(G * kShards, 0);

  const long long jobs = static_cast<long long>(G * kShards);
#pragma omp parallel for schedule(dynamic) num_threads(kernels::thread_count())
  for (long long job = 0; job < jobs; ++job) {
    const auto g = static_cast<std::size_t>(job) / kShards;
    const auto shard = static_cast<std::size_t>(job) % kShards;
    const std::size_t count = mc_samples / kShards + (shard < mc_samples % kShards ? 1 : 0);
    std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(g),
                      static_cast<std::uint64_t>(shard), std::uint64_t{0xB4E5}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(cfg.d);
    const int y = static_cast<int>(g / S), s = static_cast<int>(g % S);
    std::size_t h = 0;
    for (std::size_t k = 0; k < count; ++k) {
      sample_embedding(cfg, geom, y, s, rng, normal, x);
      h += bayes_classify(cfg, geom, x) == y;
    }
    hits[static_cast<std::size_t>(job)] = h;
  }

  OracleReport out;
  out.mc_samples = mc_samples;
  for (std::size_t g = 0; g < G; ++g) {
    std::size_t h = 0;
    for (std::size_t shard = 0; shard < kShards; ++shard) h += hits[g * kShards + shard];
    const double p = static_cast<double>(h) / static_cast<double>(mc_samples);
    out.group_accuracy.push_back(p);
    out.standard_error.push_back(std::sqrt(p * (1.0 - p) / static_cast<double>(mc_samples)));
    const double prior = cfg.group_prior(static_cast<int>(g / S), static_cast<int>(g % S));
    out.group_prior.push_back(prior);
    out.prior_weighted_accuracy += prior * p;
  }
  return out;
}

}  // namespace grouprobe

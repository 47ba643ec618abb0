#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "grouprobe/baseline_annotators.hpp"
#include "grouprobe/synth.hpp"
#include "grouprobe/zeroshot.hpp"
#include "test_util.hpp"

using namespace grouprobe;
using testutil::kind_of;

namespace {

// Cyclic Jacobi eigenvalue iteration on a dense symmetric matrix.
std::vector<double> jacobi_eigenvalues(Matrix a) {
  const std::size_t n = a.rows;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

Matrix sample_covariance(const Matrix& x) {
  Matrix cov(x.cols, x.cols);
  std::vector<double> mean(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) mean[j] += x(i, j) / x.rows;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t a = 0; a < x.cols; ++a)
      for (std::size_t b = 0; b < x.cols; ++b)
        cov(a, b) += (x(i, a) - mean[a]) * (x(i, b) - mean[b]) / (x.rows - 1.0);
  return cov;
}

Matrix two_clouds(std::size_t per_cloud, std::mt19937_64& rng, std::vector<int>& truth) {
  std::normal_distribution<double> n(0.0, 0.05);
  Matrix m(2 * per_cloud, 4);
  truth.clear();
  for (std::size_t i = 0; i < m.rows; ++i) {
    const int c = i % 2 == 0 ? 0 : 1;
    truth.push_back(c);
    for (std::size_t j = 0; j < 4; ++j) m(i, j) = n(rng) + (c == 0 ? -5.0 : 5.0) * (j == 0);
  }
  return m;
}

SampleTable table_from(const std::vector<int>& y, const std::vector<int>& s) {
  SampleTable t;
  for (std::size_t i = 0; i < y.size(); ++i)
    t.rows.push_back({"r" + std::to_string(i), y[i], s[i], Split::Train, -1});
  return t;
}

}  // namespace

TEST_CASE("PCA full rank reconstructs the centered data") {
  std::mt19937_64 rng(1);
  const Matrix x = testutil::gaussian_matrix(40, 6, rng);
  const auto pca = pca_reduce(x, 6);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) {
      double r = pca.mean[j];
      for (std::size_t k = 0; k < 6; ++k) r += pca.projected(i, k) * pca.components(k, j);
      CHECK(std::abs(r - x(i, j)) <= 1e-8);
    }
}

TEST_CASE("PCA on rank-1 data explains all variance") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  Matrix x(50, 3);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double t = n(rng);
    x(i, 0) = 1 + 2 * t;
    x(i, 1) = -3 - t;
    x(i, 2) = 0.5 * t;
  }
  const auto pca = pca_reduce(x, 1);
  CHECK(std::abs(pca.explained_variance_ratio - 1.0) <= 1e-10);
  // sign rule: largest-magnitude loading (the first) is positive
  CHECK(pca.components(0, 0) > 0);
}

TEST_CASE("PCA projected variance matches independent eigenvalues") {
  std::mt19937_64 rng(3);
  const Matrix x = testutil::random_matrix(100, 16, rng);
  const auto pca = pca_reduce(x, 4);
  const auto ev = jacobi_eigenvalues(sample_covariance(x));
  double projected_var = 0.0;
  const Matrix pcov = sample_covariance(pca.projected);
  for (std::size_t k = 0; k < 4; ++k) projected_var += pcov(k, k);
  CHECK(std::abs(projected_var - (ev[0] + ev[1] + ev[2] + ev[3])) <= 1e-8);
  for (std::size_t k = 0; k < 16; ++k) CHECK(std::abs(pca.eigenvalues[k] - ev[k]) <= 1e-8);

  for (std::size_t k = 0; k < 4; ++k) {
    const auto row = pca.components.row(k);
    const auto it = std::max_element(row.begin(), row.end(),
                                     [](double a, double b) { return std::abs(a) < std::abs(b); });
    CHECK(*it > 0);
  }
  CHECK(kind_of([&] { pca_reduce(x, 0); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([&] { pca_reduce(x, 17); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("k-means separates two clouds") {
  std::mt19937_64 rng(4);
  std::vector<int> truth;
  const Matrix x = two_clouds(100, rng, truth);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = kmeans_cluster(x, {2, seed, 100, 1e-6});
    const auto m = map_clusters_to_attributes(r.assignments, truth, 2, 2);
    CHECK(m.accuracy == 1.0);
  }
}

TEST_CASE("k-means with n = k fits exactly") {
  const Matrix x(3, 2, {0, 0, 1, 5, -2, 3});
  const auto r = kmeans_cluster(x, {3, 0, 100, 1e-6});
  CHECK(r.inertia == 0.0);
  std::vector<int> a = r.assignments;
  std::sort(a.begin(), a.end());
  CHECK(a == std::vector<int>{0, 1, 2});
}

TEST_CASE("k-means is deterministic and inertia never increases") {
  std::mt19937_64 rng(5);
  const Matrix x = testutil::gaussian_matrix(300, 5, rng);
  for (std::size_t k : {2, 3, 7}) {
    const auto a = kmeans_cluster(x, {k, 42, 100, 0.0});
    const auto b = kmeans_cluster(x, {k, 42, 100, 0.0});
    CHECK(a.assignments == b.assignments);
    CHECK(a.centroids == b.centroids);
    REQUIRE(a.inertia_history.size() >= 1);
    for (std::size_t t = 1; t < a.inertia_history.size(); ++t)
      CHECK(a.inertia_history[t] <= a.inertia_history[t - 1]);
    for (int c : a.assignments) CHECK(c < static_cast<int>(k));
  }
  CHECK(kind_of([&] { kmeans_cluster(x, {1, 0, 10, 1e-6}); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("cluster mapping examples") {
  auto m = map_clusters_to_attributes({0, 0, 1, 1}, {1, 1, 0, 0}, 2, 2);
  CHECK(m.permutation == std::vector<int>{1, 0});
  CHECK(m.accuracy == 1.0);
  CHECK(m.labels == std::vector<int>{1, 1, 0, 0});

  m = map_clusters_to_attributes({0, 2, 1, 1}, {0, 2, 1, 1}, 3, 3);
  CHECK(m.permutation == std::vector<int>{0, 1, 2});

  m = map_clusters_to_attributes({0, 1, 0, 1}, {0, 0, 1, 1}, 2, 2);
  CHECK(m.accuracy == 0.5);
  CHECK(m.permutation == std::vector<int>{0, 1});

  CHECK(kind_of([] { map_clusters_to_attributes({0, 1}, {0, 1}, 2, 3); }) ==
        ErrorKind::InvalidArgument);
  CHECK(kind_of([] { map_clusters_to_attributes({0}, {0}, 9, 9); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("cluster mapping is invariant to relabeling and beats identity") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 2 + rng() % 4;
    std::vector<int> assign(40), ref(40);
    for (auto& a : assign) a = static_cast<int>(rng() % k);
    for (auto& r : ref) r = static_cast<int>(rng() % k);
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> relabeled(assign.size());
    for (std::size_t i = 0; i < assign.size(); ++i) relabeled[i] = perm[assign[i]];

    const auto m = map_clusters_to_attributes(assign, ref, k, k);
    const auto n = map_clusters_to_attributes(relabeled, ref, k, k);
    CHECK(m.accuracy == n.accuracy);
    double identity = 0.0;
    for (std::size_t i = 0; i < assign.size(); ++i) identity += assign[i] == ref[i];
    CHECK(m.accuracy >= identity / assign.size());
  }
}

TEST_CASE("ERM confidence rules") {
  // Rows: class 0 correct, class 0 wrong, class 1 correct, class 1 wrong.
  const Matrix probs(4, 2, {0.9, 0.1, 0.3, 0.7, 0.2, 0.8, 0.6, 0.4});
  const auto samples = table_from({0, 0, 1, 1}, {-1, -1, -1, -1});

  const auto parity = erm_confidence_annotate(probs, samples, 2);
  CHECK(parity.labels == std::vector<int>{0, 1, 1, 0});

  const Matrix all_right(2, 2, {0.9, 0.1, 0.2, 0.8});
  const auto right = erm_confidence_annotate(all_right, table_from({0, 1}, {-1, -1}), 2);
  CHECK(right.labels == std::vector<int>{0, 1});

  // Zero-shot labels disagree with parity for class 1: its pair flips.
  const auto aligned = erm_confidence_annotate(probs, samples, 2, std::vector<int>{0, 1, 0, 1});
  CHECK(aligned.labels == std::vector<int>{0, 1, 0, 1});
  REQUIRE(aligned.class_pairs[1]);
  CHECK(aligned.class_pairs[1]->first == 0);
  CHECK(aligned.class_pairs[1]->second == 1);

  const Matrix three(2, 3, {0.9, 0.05, 0.05, 0.1, 0.1, 0.8});
  const auto skipped = erm_confidence_annotate(three, table_from({0, 2}, {-1, -1}), 2);
  CHECK(skipped.skipped_classes == std::vector<int>{1});
  CHECK(!skipped.class_pairs[1]);
}

TEST_CASE("annotation quality examples") {
  const auto truth = table_from({0, 0, 1, 1, 0, 1}, {0, 1, 0, 1, 0, 1});
  auto q = annotation_quality({0, 1, 0, 1, 0, 1}, truth, 2, 2);
  CHECK(q.worst_group == 1.0);
  CHECK(q.overall == 1.0);

  q = annotation_quality({0, 0, 0, 0}, table_from({0, 0, 1, 1}, {0, 1, 0, 1}), 2, 2);
  CHECK(q.overall == 0.5);
  CHECK(q.worst_group == 0.0);

  CHECK(kind_of([&] { annotation_quality({0, 0}, table_from({0, 1}, {0, -1}), 2, 2); }) ==
        ErrorKind::IncompleteAnnotation);

  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    std::vector<int> y(30), s(30), p(30);
    for (int i = 0; i < 30; ++i) {
      y[i] = rng() % 2;
      s[i] = rng() % 3;
      p[i] = rng() % 3;
    }
    const auto r = annotation_quality(p, table_from(y, s), 2, 3);
    CHECK(r.worst_group <= r.overall);
    CHECK(r.overall <= 1.0);
    CHECK(r.worst_group >= 0.0);
  }
}

TEST_CASE("zero-shot annotation of a noiseless bundle scores perfectly") {
  SynthConfig cfg;
  cfg.sigma = 0.0;
  cfg.n_train = 400;
  cfg.n_val = 10;
  cfg.n_test = 10;
  const auto b = gen_spurious_dataset(cfg);
  const auto s = annotate_attributes(b.images, b.prompts.attr_embeddings);
  const auto q = annotation_quality(s.labels, b.samples, 2, 2);
  CHECK(q.worst_group == 1.0);
}

#include "grouprobe/baseline_annotators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "grouprobe/error.hpp"
#include "grouprobe/kernels.hpp"

namespace grouprobe {

PcaResult pca_reduce(const Matrix& data, std::size_t dims) {
  const std::size_t n = data.rows, d = data.cols;
  if (dims < 1 || dims > d)
    fail(ErrorKind::InvalidArgument, "PCA dims must be in [1, " + std::to_string(d) + "]");
  PcaResult out;
  out.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) out.mean[k] += data(i, k);
  for (double& m : out.mean) m /= static_cast<double>(n);

  Matrix centered = data;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) centered(i, k) -= out.mean[k];

  const Matrix cov = kernels::covariance_centered(centered);
  Eigen::MatrixXd c(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) c(a, b) = cov(a, b);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c);
  if (solver.info() != Eigen::Success)
    fail(ErrorKind::Degenerate, "covariance eigendecomposition failed");

  // Eigen sorts ascending.
  out.eigenvalues.resize(d);
  for (std::size_t k = 0; k < d; ++k)
    out.eigenvalues[k] = std::max(solver.eigenvalues()(static_cast<Eigen::Index>(d - 1 - k)), 0.0);

  out.components = Matrix(dims, d);
  for (std::size_t r = 0; r < dims; ++r) {
    const auto col = static_cast<Eigen::Index>(d - 1 - r);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (std::abs(solver.eigenvectors()(static_cast<Eigen::Index>(k), col)) >
          std::abs(solver.eigenvectors()(static_cast<Eigen::Index>(arg), col)))
        arg = k;
    const double sign =
        solver.eigenvectors()(static_cast<Eigen::Index>(arg), col) < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < d; ++k)
      out.components(r, k) = sign * solver.eigenvectors()(static_cast<Eigen::Index>(k), col);
  }

  out.projected = Matrix(n, dims);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < dims; ++r)
      out.projected(i, r) = dot(centered.row(i), out.components.row(r));

  const double total = std::accumulate(out.eigenvalues.begin(), out.eigenvalues.end(), 0.0);
  const double kept =
      std::accumulate(out.eigenvalues.begin(), out.eigenvalues.begin() + dims, 0.0);
  out.explained_variance_ratio = total > 0.0 ? kept / total : 1.0;
  return out;
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = points.rows;
  Matrix centroids(k, points.cols);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t pick = first;
    if (c > 0) {
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      if (total > 0.0) {
        double target = unit(rng) * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          target -= d2[i];
          if (target <= 0.0) {
            pick = i;
            break;
          }
        }
        if (pick == n) {  // rounding ran off the end; take the last positive weight
          for (std::size_t i = n; i-- > 0;)
            if (d2[i] > 0.0) {
              pick = i;
              break;
            }
        }
      } else {
        // All remaining points coincide with chosen centroids.
        pick = static_cast<std::size_t>(
            std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
        if (pick == n) pick = 0;
      }
    }
    chosen[pick] = true;
    auto src = points.row(pick);
    std::copy(src.begin(), src.end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
  }
  return centroids;
}

}  // namespace

ClusteringResult kmeans_cluster(const Matrix& points, const KMeansOptions& options) {
  const std::size_t n = points.rows, d = points.cols, k = options.k;
  if (k < 2) fail(ErrorKind::InvalidArgument, "k-means needs k >= 2");
  if (n < k) fail(ErrorKind::InvalidArgument, "k-means needs at least k points");
  if (options.max_iters < 1) fail(ErrorKind::InvalidArgument, "k-means needs max_iters >= 1");

  std::mt19937_64 rng(options.seed);
  ClusteringResult out;
  out.centroids = kmeans_plus_plus(points, k, rng);
  out.assignments.assign(n, 0);
  std::vector<double> d2(n, 0.0);

  for (std::size_t iter = 0; iter < options.max_iters; ++iter) {
    kernels::nearest_centroids(points, out.centroids, out.assignments, d2);
    out.inertia = std::accumulate(d2.begin(), d2.end(), 0.0);
    out.inertia_history.push_back(out.inertia);
    out.iterations = iter + 1;

    Matrix next(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(out.assignments[i]);
      ++counts[c];
      auto src = points.row(i);
      auto dst = next.row(c);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      auto row = next.row(c);
      if (counts[c] > 0) {
        for (double& v : row) v /= static_cast<double>(counts[c]);
        continue;
      }
      std::size_t far = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && d2[i] > best) {
          best = d2[i];
          far = i;
        }
      taken[far] = true;
      d2[far] = 0.0;
      auto src = points.row(far);
      std::copy(src.begin(), src.end(), row.begin());
      ++out.reseeded;
    }

    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(squared_distance(next.row(c), out.centroids.row(c))));
    out.centroids = std::move(next);
    if (shift < options.tol) break;
  }
  // Final assignment against the final centroids.
  kernels::nearest_centroids(points, out.centroids, out.assignments, d2);
  const double final_inertia = std::accumulate(d2.begin(), d2.end(), 0.0);
  if (final_inertia != out.inertia_history.back()) out.inertia_history.push_back(final_inertia);
  out.inertia = final_inertia;
  return out;
}

ClusterMapping map_clusters_to_attributes(const std::vector<int>& assignments,
                                          const std::vector<int>& reference,
                                          std::size_t num_clusters, std::size_t num_values) {
  if (num_clusters != num_values)
    fail(ErrorKind::InvalidArgument, "cluster count " + std::to_string(num_clusters) +
                                         " differs from attribute count " +
                                         std::to_string(num_values));
  if (num_clusters > kMaxBruteForceLabels)
    fail(ErrorKind::InvalidArgument, "brute-force mapping supports at most 8 labels");
  if (assignments.size() != reference.size())
    fail(ErrorKind::Validation, "assignments and reference differ in length");

  // confusion(c, a) = rows in cluster c with reference attribute a
  std::vector<std::size_t> confusion(num_clusters * num_values, 0);
  std::size_t scored = 0;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const int c = assignments[i], a = reference[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_clusters)
      fail(ErrorKind::Validation, "cluster index out of range");
    if (a < 0) continue;
    if (static_cast<std::size_t>(a) >= num_values)
      fail(ErrorKind::Validation, "reference attribute out of range");
    ++confusion[static_cast<std::size_t>(c) * num_values + static_cast<std::size_t>(a)];
    ++scored;
  }

  std::vector<int> perm(num_clusters);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best_perm = perm;
  std::size_t best_hits = 0;
  bool first = true;
  do {
    std::size_t hits = 0;
    for (std::size_t c = 0; c < num_clusters; ++c)
      hits += confusion[c * num_values + static_cast<std::size_t>(perm[c])];
    if (first || hits > best_hits) {
      best_hits = hits;
      best_perm = perm;
      first = false;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  ClusterMapping out;
  out.permutation = best_perm;
  out.labels.resize(assignments.size());
  for (std::size_t i = 0; i < assignments.size(); ++i)
    out.labels[i] = best_perm[static_cast<std::size_t>(assignments[i])];
  out.accuracy = scored ? static_cast<double>(best_hits) / static_cast<double>(scored) : 0.0;
  return out;
}

ErmConfidenceAnnotation erm_confidence_annotate(
    const Matrix& probs, const SampleTable& samples, std::size_t num_attrs,
    const std::optional<std::vector<int>>& zero_shot_attrs) {
  if (probs.rows != samples.size())
    fail(ErrorKind::Validation, "probability rows do not align with the sample table");
  if (num_attrs < 2) fail(ErrorKind::InvalidArgument, "need at least 2 attributes");
  if (zero_shot_attrs && zero_shot_attrs->size() != samples.size())
    fail(ErrorKind::Validation, "zero-shot attribute labels do not align with samples");
  const std::size_t K = probs.cols;

  std::vector<bool> correct(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto r = probs.row(i);
    const auto pred = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    correct[i] = pred == samples.rows[i].y;
  }

  ErmConfidenceAnnotation out;
  out.labels.assign(samples.size(), kUnknownAttribute);
  out.class_pairs.resize(K);
  for (std::size_t c = 0; c < K; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (static_cast<std::size_t>(samples.rows[i].y) == c) members.push_back(i);
    if (members.empty()) {
      out.skipped_classes.push_back(static_cast<int>(c));
      continue;
    }
    std::pair<int, int> pair{static_cast<int>(c % num_attrs),
                             static_cast<int>((c + 1) % num_attrs)};
    if (zero_shot_attrs) {
      std::size_t best = 0;
      bool first = true;
      for (std::size_t maj = 0; maj < num_attrs; ++maj)
        for (std::size_t mino = 0; mino < num_attrs; ++mino) {
          if (maj == mino) continue;
          std::size_t agree = 0;
          for (std::size_t i : members) {
            const int want = static_cast<int>(correct[i] ? maj : mino);
            if ((*zero_shot_attrs)[i] == want) ++agree;
          }
          if (first || agree > best) {
            best = agree;
            pair = {static_cast<int>(maj), static_cast<int>(mino)};
            first = false;
          }
        }
    }
    out.class_pairs[c] = pair;
    for (std::size_t i : members) out.labels[i] = correct[i] ? pair.first : pair.second;
  }
  return out;
}

AnnotationQualityReport annotation_quality(const std::vector<int>& pseudo,
                                           const SampleTable& truth, std::size_t num_classes,
                                           std::size_t num_attrs, std::optional<Split> only) {
  if (pseudo.size() != truth.size())
    fail(ErrorKind::Validation, "pseudo-attribute vector does not align with samples");
  const std::size_t G = num_classes * num_attrs;
  std::vector<std::size_t> hits(G, 0);
  AnnotationQualityReport out;
  out.group_sizes.assign(G, 0);
  std::size_t total = 0, total_hits = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const auto& r = truth.rows[i];
    if (only && r.split != *only) continue;
    if (r.s_true == kUnknownAttribute)
      fail(ErrorKind::IncompleteAnnotation,
           "row '" + r.id + "' has no true attribute to score against");
    const auto g = static_cast<std::size_t>(group_index(r.y, r.s_true, num_attrs));
    if (g >= G) fail(ErrorKind::Validation, "row '" + r.id + "' is outside the group range");
    ++out.group_sizes[g];
    ++total;
    if (pseudo[i] == r.s_true) {
      ++hits[g];
      ++total_hits;
    }
  }
  if (total == 0) fail(ErrorKind::Validation, "no rows to score");
  out.group_accuracy.resize(G);
  out.worst_group = 1.0;
  for (std::size_t g = 0; g < G; ++g) {
    if (out.group_sizes[g] == 0) continue;
    const double acc = static_cast<double>(hits[g]) / static_cast<double>(out.group_sizes[g]);
    out.group_accuracy[g] = acc;
    out.worst_group = std::min(out.worst_group, acc);
  }
  out.overall = static_cast<double>(total_hits) / static_cast<double>(total);
  return out;
}

}  // namespace grouprobe

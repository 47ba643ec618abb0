#pragma once

// Competing pseudo-annotators: K-means over (optionally PCA-reduced)
// features and ERM-confidence labeling, plus the permutation alignment used
// to score them against true attributes.

#include <cstdint>
#include <optional>
#include <vector>

#include "grouprobe/tensor_io.hpp"
#include "grouprobe/zeroshot.hpp"

namespace grouprobe {

struct PcaResult {
  Matrix projected;                 // n x dims
  Matrix components;                // dims x d, unit rows
  std::vector<double> mean;         // length d
  std::vector<double> eigenvalues;  // all d covariance eigenvalues, descending
  double explained_variance_ratio = 0.0;
};

// Projection of the mean-centered rows onto the top `dims` principal
// components. Each component's largest-magnitude loading is positive.
PcaResult pca_reduce(const Matrix& data, std::size_t dims);

struct ClusteringResult {
  std::vector<int> assignments;
  Matrix centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
  std::vector<double> inertia_history;  // one entry per assignment step
  std::size_t reseeded = 0;             // empty clusters moved to farthest points
};

struct KMeansOptions {
  std::size_t k = 2;
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

// Lloyd iterations from a seeded k-means++ start. Empty clusters are re-seeded
// at the point farthest from its centroid.
ClusteringResult kmeans_cluster(const Matrix& points, const KMeansOptions& options);

struct ClusterMapping {
  std::vector<int> permutation;  // cluster c -> attribute permutation[c]
  std::vector<int> labels;
  double accuracy = 0.0;
};

inline constexpr std::size_t kMaxBruteForceLabels = 8;

// Exhaustive search over permutations; ties resolve to the lexicographically
// smallest permutation.
ClusterMapping map_clusters_to_attributes(const std::vector<int>& assignments,
                                          const std::vector<int>& reference,
                                          std::size_t num_clusters, std::size_t num_values);

struct ErmConfidenceAnnotation {
  std::vector<int> labels;
  // Per class: (majority attribute, minority attribute); nullopt for classes
  // with no samples.
  std::vector<std::optional<std::pair<int, int>>> class_pairs;
  std::vector<int> skipped_classes;
};

// Within each class, correctly classified samples get that class's majority
// attribute and misclassified ones its minority attribute. When
// `zero_shot_attrs` is given the (majority, minority) pair is the ordered pair
// agreeing most with it; otherwise majority = c mod |S|, minority =
// (c + 1) mod |S|.
ErmConfidenceAnnotation erm_confidence_annotate(
    const Matrix& probs, const SampleTable& samples, std::size_t num_attrs,
    const std::optional<std::vector<int>>& zero_shot_attrs = std::nullopt);

struct AnnotationQualityReport {
  std::vector<std::optional<double>> group_accuracy;  // by true group
  std::vector<std::size_t> group_sizes;
  double worst_group = 0.0;
  double overall = 0.0;
  std::vector<int> permutation;  // empty when no mapping was applied
};

// Accuracy of `pseudo` against s_true inside each true group. Rows outside
// `only` are ignored.
AnnotationQualityReport annotation_quality(const std::vector<int>& pseudo,
                                           const SampleTable& truth, std::size_t num_classes,
                                           std::size_t num_attrs,
                                           std::optional<Split> only = std::nullopt);

}  // namespace grouprobe

#pragma once

// Synthetic spuriously-correlated embedding datasets with known ground truth,
// and a Monte Carlo estimate of the Bayes-optimal per-group accuracy.
//
// Sample model: class y uniform over K; attribute s = y mod |S| with
// probability rho, otherwise uniform over the remaining attributes;
// x = normalize(alpha * u_y + beta * v_s + sigma * eps), eps ~ N(0, I).
// The u's and v's are mutually orthonormal.

#include <cstdint>
#include <vector>

#include "grouprobe/tensor_io.hpp"

namespace grouprobe {

struct SynthConfig {
  std::size_t d = 64;
  std::size_t n_train = 2000;
  std::size_t n_val = 1000;
  std::size_t n_test = 10000;
  std::size_t num_classes = 2;
  std::size_t num_attrs = 2;
  double rho = 0.95;
  double alpha = 1.0;
  double beta = 1.5;
  double sigma = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
  int aligned_attribute(int y) const { return y % static_cast<int>(num_attrs); }
  // Prior P(y, s) of the generator.
  double group_prior(int y, int s) const;
};

struct SynthGeometry {
  Matrix class_dirs;  // K x d
  Matrix attr_dirs;   // |S| x d
};

// Seeded Gram-Schmidt of Gaussian draws; depends only on (d, K, |S|, seed).
SynthGeometry make_geometry(const SynthConfig& cfg);

DatasetBundle gen_spurious_dataset(const SynthConfig& cfg);

// Bayes-optimal class decision for one (unit) embedding under the generator,
// including the spurious prior. Integrates the radial part of the normalized
// Gaussian numerically.
int bayes_classify(const SynthConfig& cfg, const SynthGeometry& geom, std::span<const double> x);

struct OracleReport {
  std::vector<double> group_accuracy;  // indexed by g = y*|S| + s
  std::vector<double> standard_error;
  std::vector<double> group_prior;
  double prior_weighted_accuracy = 0.0;
  std::size_t mc_samples = 0;  // per group
};

inline constexpr std::size_t kMinOracleSamples = 10000;

// Monte Carlo over fixed seeded shards; identical output for any thread count.
OracleReport bayes_oracle(const SynthConfig& cfg, std::size_t mc_samples);

}  // namespace grouprobe

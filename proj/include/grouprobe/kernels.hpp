#pragma once

// Data-parallel inner loops. Each kernel in `grouprobe::kernels` is OpenMP
// parallel over independent outputs only (no cross-thread reductions), so its
// result is bitwise identical at every thread count. The `reference`
// namespace holds straightforward serial versions used by the tests and the
// benchmark.

#include <span>

#include "grouprobe/matrix.hpp"

namespace grouprobe::kernels {

// Caps the OpenMP team size; 0 restores the runtime default.
void set_thread_count(int threads);
int thread_count();
// Applies GROUPROBE_THREADS when it is set to a positive integer.
void apply_thread_env();

// Row-wise inverse L2 norms. A zero row yields 0.
std::vector<double> inverse_row_norms(const Matrix& m);

// out(i, j) = scale * cos(x_i, w_j). Zero rows are the caller's problem.
Matrix cosine_logits(const Matrix& x, const Matrix& w, double scale);

// Row-wise stable softmax.
Matrix row_softmax(const Matrix& logits);

// For each point: index of the nearest centroid (lowest index on ties) and the
// squared distance to it.
void nearest_centroids(const Matrix& points, const Matrix& centroids,
                       std::span<int> assignment, std::span<double> distance2);

// out = coeffᵀ · x, i.e. out(j, c) = sum_i coeff(i, j) * x(i, c), summed in
// ascending i.
Matrix transpose_times(const Matrix& coeff, const Matrix& x);

// Sample covariance (divisor n - 1) of already-centered rows.
Matrix covariance_centered(const Matrix& centered);

namespace reference {

Matrix cosine_logits(const Matrix& x, const Matrix& w, double scale);
Matrix row_softmax(const Matrix& logits);
void nearest_centroids(const Matrix& points, const Matrix& centroids,
                       std::span<int> assignment, std::span<double> distance2);
Matrix transpose_times(const Matrix& coeff, const Matrix& x);
Matrix covariance_centered(const Matrix& centered);

}  // namespace reference
}  // namespace grouprobe::kernels

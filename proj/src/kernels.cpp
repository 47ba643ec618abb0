#include "grouprobe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace grouprobe::kernels {
namespace {

int default_threads() {
#ifdef _OPENMP
  static const int n = omp_get_max_threads();
  return n;
#else
  return 1;
#endif
}

int g_threads = 0;

int team() { return g_threads > 0 ? g_threads : default_threads(); }

using index_t = long long;

}  // namespace

void set_thread_count(int threads) { g_threads = std::max(threads, 0); }

int thread_count() { return team(); }

void apply_thread_env() {
  if (const char* env = std::getenv("GROUPROBE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_thread_count(n);
  }
}

std::vector<double> inverse_row_norms(const Matrix& m) {
  std::vector<double> inv(m.rows);
  const index_t rows = static_cast<index_t>(m.rows);
#pragma omp parallel for schedule(static) num_threads(team())
  for (index_t i = 0; i < rows; ++i) {
    const double n = norm2(m.row(static_cast<std::size_t>(i)));
    inv[static_cast<std::size_t>(i)] = n > 0.0 ? 1.0 / n : 0.0;
  }
  return inv;
}

Matrix cosine_logits(const Matrix& x, const Matrix& w, double scale) {
  const auto inv_x = inverse_row_norms(x);
  const auto inv_w = inverse_row_norms(w);
  Matrix out(x.rows, w.rows);
  const index_t rows = static_cast<index_t>(x.rows);
#pragma omp parallel for schedule(static) num_threads(team())
  for (index_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const auto xi = x.row(i);
    for (std::size_t j = 0; j < w.rows; ++j)
      out(i, j) = scale * (dot(xi, w.row(j)) * inv_x[i] * inv_w[j]);
  }
  return out;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  const index_t rows = static_cast<index_t>(logits.rows);
#pragma omp parallel for schedule(static) num_threads(team())
  for (index_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const auto in = logits.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

void nearest_centroids(const Matrix& points, const Matrix& centroids,
                       std::span<int> assignment, std::span<double> distance2) {
  const index_t rows = static_cast<index_t>(points.rows);
#pragma omp parallel for schedule(static) num_threads(team())
  for (index_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const auto p = points.row(i);
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.rows; ++c) {
      const auto q = centroids.row(c);
      double d2 = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double diff = p[k] - q[k];
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        arg = static_cast<int>(c);
      }
    }
    assignment[i] = arg;
    distance2[i] = best;
  }
}

Matrix transpose_times(const Matrix& coeff, const Matrix& x) {
  Matrix out(coeff.cols, x.cols);
  const std::size_t n = coeff.rows, k = coeff.cols, nc = x.cols;
  const double* cv = coeff.values.data();
  const double* xv = x.values.data();
  double* ov = out.values.data();
  // One column block per thread, at least 8 wide.
  const std::size_t threads = static_cast<std::size_t>(team());
  const std::size_t block = std::max<std::size_t>(8, (nc + threads - 1) / threads);
  const index_t blocks = static_cast<index_t>((nc + block - 1) / block);
#pragma omp parallel for schedule(static) num_threads(team())
  for (index_t bb = 0; bb < blocks; ++bb) {
    const std::size_t c0 = static_cast<std::size_t>(bb) * block;
    const std::size_t c1 = std::min(c0 + block, nc);
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = xv + i * nc;
      const double* ci = cv + i * k;
      for (std::size_t j = 0; j < k; ++j) {
        const double a = ci[j];
        double* o = ov + j * nc;
        for (std::size_t c = c0; c < c1; ++c) o[c] += a * xi[c];
      }
    }
  }
  return out;
}

Matrix covariance_centered(const Matrix& centered) {
  const std::size_t d = centered.cols;
  const double denom = centered.rows > 1 ? static_cast<double>(centered.rows - 1) : 1.0;
  Matrix cov(d, d);
  const index_t dd = static_cast<index_t>(d);
#pragma omp parallel for schedule(dynamic) num_threads(team())
  for (index_t aa = 0; aa < dd; ++aa) {
    const auto a = static_cast<std::size_t>(aa);
    auto o = cov.row(a);
    for (std::size_t i = 0; i < centered.rows; ++i) {
      const auto r = centered.row(i);
      const double ra = r[a];
      for (std::size_t b = a; b < d; ++b) o[b] += ra * r[b];
    }
    for (std::size_t b = a; b < d; ++b) o[b] /= denom;
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) cov(a, b) = cov(b, a);
  return cov;
}

namespace reference {

Matrix cosine_logits(const Matrix& x, const Matrix& w, double scale) {
  Matrix out(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < w.rows; ++j) {
      double xy = 0.0, xx = 0.0, yy = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) {
        xy += x(i, k) * w(j, k);
        xx += x(i, k) * x(i, k);
        yy += w(j, k) * w(j, k);
      }
      out(i, j) = scale * xy / (std::sqrt(xx) * std::sqrt(yy));
    }
  }
  return out;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx);
    for (std::size_t j = 0; j < logits.cols; ++j)
      out(i, j) = std::exp(logits(i, j) - mx) / sum;
  }
  return out;
}

void nearest_centroids(const Matrix& points, const Matrix& centroids,
                       std::span<int> assignment, std::span<double> distance2) {
  for (std::size_t i = 0; i < points.rows; ++i) {
    int arg = -1;
    double best = 0.0;
    for (std::size_t c = 0; c < centroids.rows; ++c) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < points.cols; ++k)
        d2 += (points(i, k) - centroids(c, k)) * (points(i, k) - centroids(c, k));
      if (arg < 0 || d2 < best) {
        best = d2;
        arg = static_cast<int>(c);
      }
    }
    assignment[i] = arg;
    distance2[i] = best;
  }
}

Matrix transpose_times(const Matrix& coeff, const Matrix& x) {
  Matrix out(coeff.cols, x.cols);
  for (std::size_t i = 0; i < coeff.rows; ++i)
    for (std::size_t j = 0; j < coeff.cols; ++j)
      for (std::size_t c = 0; c < x.cols; ++c) out(j, c) += coeff(i, j) * x(i, c);
  return out;
}

Matrix covariance_centered(const Matrix& centered) {
  const std::size_t d = centered.cols;
  Matrix cov(d, d);
  for (std::size_t i = 0; i < centered.rows; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += centered(i, a) * centered(i, b);
  const double denom = centered.rows > 1 ? static_cast<double>(centered.rows - 1) : 1.0;
  for (double& v : cov.values) v /= denom;
  return cov;
}

}  // namespace reference
}  // namespace grouprobe::kernels

#include "grouprobe/matrix.hpp"

#include <cmath>

#include "grouprobe/error.hpp"

namespace grouprobe {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Corruption: return "corruption error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Schema: return "schema error";
    case ErrorKind::Degenerate: return "degenerate-input error";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::IncompleteAnnotation: return "incomplete-annotation error";
  }
  return "error";
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Matrix gather_rows(const Matrix& source, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), source.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = source.row(indices[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace grouprobe

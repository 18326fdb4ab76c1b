#include "gcp/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gcp::kernels {

double euclidean_distance(PointRef a, PointRef b) { return std::sqrt(squared_distance(a, b)); }

namespace serial {

void distance_table(std::span<const PointRef> rows, std::span<const PointRef> cols,
                    std::span<double> out) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      out[i * cols.size() + j] = euclidean_distance(rows[i], cols[j]);
    }
  }
}

}  // namespace serial

namespace parallel {

void distance_table(std::span<const PointRef> rows, std::span<const PointRef> cols,
                    std::span<double> out) {
  const auto n_rows = static_cast<std::ptrdiff_t>(rows.size());
  const std::size_t n_cols = cols.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n_rows; ++i) {
    const auto row = rows[static_cast<std::size_t>(i)];
    double* dst = out.data() + static_cast<std::size_t>(i) * n_cols;
    for (std::size_t j = 0; j < n_cols; ++j) dst[j] = euclidean_distance(row, cols[j]);
  }
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace gcp::kernels

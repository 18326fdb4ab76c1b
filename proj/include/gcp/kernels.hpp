#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace gcp {

enum class Execution { kSerial, kParallel };

using PointRef = std::span<const double>;

namespace kernels {

inline double squared_distance(PointRef a, PointRef b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    acc += d * d;
  }
  return acc;
}

double euclidean_distance(PointRef a, PointRef b);

/// Row-major |rows| x |cols| table of Euclidean distances.
namespace serial {
void distance_table(std::span<const PointRef> rows, std::span<const PointRef> cols,
                    std::span<double> out);
}  // namespace serial

namespace parallel {
void distance_table(std::span<const PointRef> rows, std::span<const PointRef> cols,
                    std::span<double> out);
}  // namespace parallel

inline void distance_table(Execution exec, std::span<const PointRef> rows,
                           std::span<const PointRef> cols, std::span<double> out) {
  if (exec == Execution::kSerial) {
    serial::distance_table(rows, cols, out);
  } else {
    parallel::distance_table(rows, cols, out);
  }
}

int max_threads();

}  // namespace kernels
}  // namespace gcp

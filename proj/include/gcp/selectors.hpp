#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gcp/embedding_store.hpp"
#include "gcp/kernels.hpp"

namespace gcp {

struct SelectorConfig {
  SelectorKind method = SelectorKind::kCentroid;
  std::size_t n_prototypes = 1;
  double alpha = 0.5;
  std::size_t kmeans_max_iters = 100;
  double kmeans_tol = 1e-10;
  std::uint64_t seed = 0;

  /// Throws Error(kConfig) when a field is out of range.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Per-class kernels. `points` are the class's gallery vectors in record order.

Vec mean_of(std::span<const PointRef> points);

/// Indices of farthest-point picks starting at `start`; each later pick
/// maximizes its minimum distance to the earlier picks.
std::vector<std::size_t> farthest_point_order(std::span<const PointRef> points,
                                              std::size_t count, std::size_t start);

/// Index of the point nearest `target` (lowest index on ties).
std::size_t nearest_index(std::span<const PointRef> points, PointRef target);

struct KMeansResult {
  std::vector<Vec> centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> objective_trace;  // after each assignment step
  std::size_t iterations = 0;
  bool converged = false;
};

KMeansResult kmeans(std::span<const PointRef> points, std::size_t k, std::size_t max_iters,
                    double tol, std::uint64_t seed);

struct AlphaFpsTrace {
  std::vector<Vec> prototypes;            // centroid first, then one per iteration
  std::vector<std::size_t> picked;        // record positions removed from X, per iteration
  std::vector<std::size_t> nearest_prior; // prototype index p was taken from, per iteration
};

AlphaFpsTrace alpha_fps(std::span<const PointRef> points, std::size_t n, double alpha);

/// Prototypes for a single class under any non-learned selector.
std::vector<Vec> select_for_class(std::span<const PointRef> points, const SelectorConfig& cfg);

// ---------------------------------------------------------------------------
// Whole-set selectors. Per-class work runs in parallel for
// Execution::kParallel; output is identical to Execution::kSerial.

PrototypeSet select_instance(const EmbeddingSet& set);
PrototypeSet select_centroid(const EmbeddingSet& set, Execution exec = Execution::kParallel);
PrototypeSet select_kcentroid(const EmbeddingSet& set, const SelectorConfig& cfg,
                              Execution exec = Execution::kParallel);
PrototypeSet select_fps(const EmbeddingSet& set, const SelectorConfig& cfg,
                        Execution exec = Execution::kParallel);
PrototypeSet select_alpha_fps(const EmbeddingSet& set, const SelectorConfig& cfg,
                              Execution exec = Execution::kParallel);

/// Dispatches on cfg.method. GCP is not handled here (see gcp_model.hpp).
PrototypeSet select_prototypes(const EmbeddingSet& set, const SelectorConfig& cfg,
                               Execution exec = Execution::kParallel);

std::vector<PointRef> point_refs(const EmbeddingSet& set, const std::vector<std::size_t>& indices);
std::vector<PointRef> point_refs(const RecordView& view);

}  // namespace gcp

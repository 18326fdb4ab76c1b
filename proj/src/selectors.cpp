#include "gcp/selectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "gcp/error.hpp"

namespace gcp {

void SelectorConfig::validate() const {
  if (n_prototypes == 0) throw Error(ErrorCategory::kConfig, "n_prototypes must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCategory::kConfig, "alpha must be in [0,1]");
  if (kmeans_max_iters == 0) throw Error(ErrorCategory::kConfig, "kmeans_max_iters must be >= 1");
  if (!(kmeans_tol > 0.0)) throw Error(ErrorCategory::kConfig, "kmeans_tol must be positive");
}

std::vector<PointRef> point_refs(const EmbeddingSet& set, const std::vector<std::size_t>& indices) {
  std::vector<PointRef> refs;
  refs.reserve(indices.size());
  for (std::size_t i : indices) refs.emplace_back(set[i].vector);
  return refs;
}

std::vector<PointRef> point_refs(const RecordView& view) {
  std::vector<PointRef> refs;
  refs.reserve(view.size());
  for (const auto* r : view) refs.emplace_back(r->vector);
  return refs;
}

Vec mean_of(std::span<const PointRef> points) {
  Vec mean(points.front().size(), 0.0);
  for (const auto& p : points) {
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += p[j];
  }
  const double inv = static_cast<double>(points.size());
  for (auto& v : mean) v /= inv;
  return mean;
}

std::size_t nearest_index(std::span<const PointRef> points, PointRef target) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = kernels::euclidean_distance(points[i], target);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> farthest_point_order(std::span<const PointRef> points,
                                              std::size_t count, std::size_t start) {
  const std::size_t n = points.size();
  count = std::min(count, n);
  std::vector<std::size_t> order;
  if (count == 0) return order;
  order.reserve(count);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = start;
  while (true) {
    order.push_back(current);
    taken[current] = 1;
    if (order.size() == count) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], kernels::euclidean_distance(points[i], points[current]));
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return order;
}

namespace {

double objective(std::span<const PointRef> points, const std::vector<Vec>& centroids,
                 const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    total += kernels::squared_distance(points[i], centroids[assignment[i]]);
  }
  return total;
}

std::vector<Vec> recompute_centroids(std::span<const PointRef> points,
                                     const std::vector<std::size_t>& assignment, std::size_t k,
                                     std::vector<std::size_t>& sizes) {
  const std::size_t dim = points.front().size();
  std::vector<Vec> centroids(k, Vec(dim, 0.0));
  sizes.assign(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& c = centroids[assignment[i]];
    for (std::size_t j = 0; j < dim; ++j) c[j] += points[i][j];
    ++sizes[assignment[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (sizes[c] == 0) continue;
    const double inv = static_cast<double>(sizes[c]);
    for (auto& v : centroids[c]) v /= inv;
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(std::span<const PointRef> points, std::size_t k, std::size_t max_iters,
                    double tol, std::uint64_t seed) {
  const std::size_t n = points.size();
  k = std::min(k, n);
  KMeansResult result;
  std::mt19937_64 rng(seed);
  const std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t idx : farthest_point_order(points, k, first)) {
    result.centroids.emplace_back(points[idx].begin(), points[idx].end());
  }
  result.assignment.assign(n, 0);

  auto assign = [&] {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = kernels::squared_distance(points[i], result.centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed |= result.assignment[i] != best;
      result.assignment[i] = best;
    }
    return changed;
  };

  assign();
  result.objective_trace.push_back(objective(points, result.centroids, result.assignment));
  std::vector<std::size_t> sizes;
  for (std::size_t iter = 1; iter <= max_iters; ++iter) {
    auto next = recompute_centroids(points, result.assignment, k, sizes);
    // Empty cluster: move the point farthest from its centroid into it.
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[result.assignment[i]] <= 1) continue;
        const double d = kernels::squared_distance(points[i], next[result.assignment[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      result.assignment[far] = c;
      next = recompute_centroids(points, result.assignment, k, sizes);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, kernels::euclidean_distance(next[c], result.centroids[c]));
    }
    result.centroids = std::move(next);
    const bool changed = assign();
    result.objective_trace.push_back(objective(points, result.centroids, result.assignment));
    result.iterations = iter;
    if (!changed || shift <= tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

AlphaFpsTrace alpha_fps(std::span<const PointRef> points, std::size_t n, double alpha) {
  AlphaFpsTrace trace;
  trace.prototypes.push_back(mean_of(points));
  if (points.size() < 2) return trace;

  const std::size_t m = points.size();
  std::vector<char> removed(m, 0);
  // Distance from each remaining point to its nearest prototype, and which one.
  std::vector<double> near_d(m);
  std::vector<std::size_t> near_p(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    near_d[i] = kernels::euclidean_distance(points[i], trace.prototypes[0]);
  }
  for (std::size_t iter = 0; iter < n && trace.picked.size() < m; ++iter) {
    std::size_t x = m;
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!removed[i] && near_d[i] > best) {
        best = near_d[i];
        x = i;
      }
    }
    const Vec& p = trace.prototypes[near_p[x]];
    removed[x] = 1;
    Vec proto(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
      proto[j] = (1.0 - alpha) * points[x][j] + alpha * p[j];
    }
    trace.picked.push_back(x);
    trace.nearest_prior.push_back(near_p[x]);
    trace.prototypes.push_back(std::move(proto));
    const std::size_t added = trace.prototypes.size() - 1;
    for (std::size_t i = 0; i < m; ++i) {
      if (removed[i]) continue;
      const double d = kernels::euclidean_distance(points[i], trace.prototypes[added]);
      if (d < near_d[i]) {
        near_d[i] = d;
        near_p[i] = added;
      }
    }
  }
  return trace;
}

std::vector<Vec> select_for_class(std::span<const PointRef> points, const SelectorConfig& cfg) {
  std::vector<Vec> out;
  switch (cfg.method) {
    case SelectorKind::kInstance:
      for (const auto& p : points) out.emplace_back(p.begin(), p.end());
      break;
    case SelectorKind::kCentroid:
      out.push_back(mean_of(points));
      break;
    case SelectorKind::kKCentroid:
      out = kmeans(points, cfg.n_prototypes, cfg.kmeans_max_iters, cfg.kmeans_tol, cfg.seed)
                .centroids;
      break;
    case SelectorKind::kFps: {
      const auto start = nearest_index(points, mean_of(points));
      for (std::size_t i : farthest_point_order(points, cfg.n_prototypes, start)) {
        out.emplace_back(points[i].begin(), points[i].end());
      }
      break;
    }
    case SelectorKind::kAlphaFps:
      out = alpha_fps(points, cfg.n_prototypes, cfg.alpha).prototypes;
      break;
    case SelectorKind::kGcp:
      throw Error(ErrorCategory::kConfig, "gcp prototypes require a trained model");
  }
  return out;
}

namespace {

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// `per_class(slot, points)` computes one class; slot indexes set.class_ids().
template <typename PerClass>
PrototypeSet run_per_class(const EmbeddingSet& set, SelectorKind kind, Execution exec,
                           PerClass&& per_class) {
  if (set.empty()) throw Error(ErrorCategory::kEmptyInput, "cannot select from an empty set");
  const auto& classes = set.class_ids();
  std::vector<std::vector<Vec>> results(classes.size());
  const auto n = static_cast<std::ptrdiff_t>(classes.size());
  if (exec == Execution::kParallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const auto c = classes[static_cast<std::size_t>(i)];
      results[static_cast<std::size_t>(i)] =
          per_class(static_cast<std::size_t>(i), point_refs(set, set.class_indices(c)));
    }
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const auto c = classes[static_cast<std::size_t>(i)];
      results[static_cast<std::size_t>(i)] =
          per_class(static_cast<std::size_t>(i), point_refs(set, set.class_indices(c)));
    }
  }
  PrototypeSet out;
  out.selector = kind;
  out.dim = set.dim();
  for (std::size_t i = 0; i < classes.size(); ++i) out.per_class[classes[i]] = std::move(results[i]);
  out.params_echo["method"] = selector_name(kind);
  out.params_echo["total_prototypes"] = std::to_string(out.total_count());
  return out;
}

}  // namespace

PrototypeSet select_instance(const EmbeddingSet& set) {
  SelectorConfig cfg;
  cfg.method = SelectorKind::kInstance;
  return run_per_class(set, cfg.method, Execution::kSerial,
                       [&](std::size_t, const std::vector<PointRef>& pts) { return select_for_class(pts, cfg); });
}

PrototypeSet select_centroid(const EmbeddingSet& set, Execution exec) {
  SelectorConfig cfg;
  cfg.method = SelectorKind::kCentroid;
  return run_per_class(set, cfg.method, exec,
                       [&](std::size_t, const std::vector<PointRef>& pts) { return select_for_class(pts, cfg); });
}

PrototypeSet select_kcentroid(const EmbeddingSet& set, const SelectorConfig& cfg, Execution exec) {
  cfg.validate();
  std::vector<char> unconverged(set.class_ids().size(), 0);
  const auto& classes = set.class_ids();
  auto out = run_per_class(set, SelectorKind::kKCentroid, exec,
                           [&](std::size_t slot, const std::vector<PointRef>& pts) {
    auto r = kmeans(pts, cfg.n_prototypes, cfg.kmeans_max_iters, cfg.kmeans_tol, cfg.seed);
    if (!r.converged) unconverged[slot] = 1;
    return std::move(r.centroids);
  });
  std::string flagged;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!unconverged[i]) continue;
    if (!flagged.empty()) flagged += ';';
    flagged += std::to_string(classes[i]);
  }
  out.params_echo["n"] = std::to_string(cfg.n_prototypes);
  out.params_echo["kmeans_max_iters"] = std::to_string(cfg.kmeans_max_iters);
  out.params_echo["kmeans_tol"] = format_real(cfg.kmeans_tol);
  out.params_echo["seed"] = std::to_string(cfg.seed);
  out.params_echo["kmeans_unconverged_classes"] = flagged;
  return out;
}

PrototypeSet select_fps(const EmbeddingSet& set, const SelectorConfig& cfg, Execution exec) {
  cfg.validate();
  SelectorConfig local = cfg;
  local.method = SelectorKind::kFps;
  auto out = run_per_class(set, SelectorKind::kFps, exec, [&](std::size_t, const std::vector<PointRef>& pts) {
    return select_for_class(pts, local);
  });
  out.params_echo["n"] = std::to_string(cfg.n_prototypes);
  out.params_echo["seed_rule"] = "nearest_to_centroid";
  return out;
}

PrototypeSet select_alpha_fps(const EmbeddingSet& set, const SelectorConfig& cfg, Execution exec) {
  cfg.validate();
  auto out = run_per_class(set, SelectorKind::kAlphaFps, exec, [&](std::size_t, const std::vector<PointRef>& pts) {
    return alpha_fps(pts, cfg.n_prototypes, cfg.alpha).prototypes;
  });
  out.params_echo["n"] = std::to_string(cfg.n_prototypes);
  out.params_echo["alpha"] = format_real(cfg.alpha);
  out.params_echo["count_rule"] = "centroid_plus_n";
  return out;
}

PrototypeSet select_prototypes(const EmbeddingSet& set, const SelectorConfig& cfg, Execution exec) {
  switch (cfg.method) {
    case SelectorKind::kInstance: return select_instance(set);
    case SelectorKind::kCentroid: return select_centroid(set, exec);
    case SelectorKind::kKCentroid: return select_kcentroid(set, cfg, exec);
    case SelectorKind::kFps: return select_fps(set, cfg, exec);
    case SelectorKind::kAlphaFps: return select_alpha_fps(set, cfg, exec);
    case SelectorKind::kGcp: break;
  }
  throw Error(ErrorCategory::kConfig, "gcp prototypes require a trained model");
}

}  // namespace gcp

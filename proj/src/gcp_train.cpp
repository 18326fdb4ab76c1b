#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "decoder.hpp"
#include "gcp/error.hpp"
#include "gcp/gcp_model.hpp"

namespace gcp {

namespace {

double norm_diff(PointRef a, PointRef b) { return kernels::euclidean_distance(a, b); }

}  // namespace

double triplet_term(PointRef anchor, PointRef positive, PointRef negative, double margin) {
  return std::max(0.0, margin + norm_diff(anchor, positive) - norm_diff(anchor, negative));
}

double diversity_term(const std::vector<Vec>& prototypes, double margin) {
  const std::size_t k = prototypes.size();
  if (k < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i != j) sum += std::max(0.0, margin - norm_diff(prototypes[i], prototypes[j]));
    }
  }
  return sum / static_cast<double>(k * (k - 1));
}

LossResult batch_loss(const std::vector<ClassLossInput>& classes, double margin, double lambda) {
  LossResult res;
  res.prototype_grads.resize(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    res.prototype_grads[c].assign(classes[c].prototypes.size(), Vec{});
    for (std::size_t k = 0; k < classes[c].prototypes.size(); ++k) {
      res.prototype_grads[c][k].assign(classes[c].prototypes[k].size(), 0.0);
    }
  }

  // Hardest negative of each anchor: nearest feature of another class.
  struct Active {
    std::size_t cls, proto;
    const Vec* anchor;
  };
  std::vector<Active> active;
  double triplet_sum = 0.0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (const auto& a : classes[c].anchors) {
      double neg = std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < classes.size(); ++o) {
        if (o == c || classes[o].class_id == classes[c].class_id) continue;
        for (const auto& f : classes[o].anchors) neg = std::min(neg, norm_diff(a, f));
      }
      if (!std::isfinite(neg)) continue;
      for (std::size_t k = 0; k < classes[c].prototypes.size(); ++k) {
        const double h = margin + norm_diff(a, classes[c].prototypes[k]) - neg;
        ++res.triplet_count;
        if (h > 0.0) {
          triplet_sum += h;
          ++res.active_triplets;
          active.push_back({c, k, &a});
        }
      }
    }
  }
  if (res.triplet_count > 0) {
    res.triplet = triplet_sum / static_cast<double>(res.triplet_count);
    const double w = 1.0 / static_cast<double>(res.triplet_count);
    for (const auto& t : active) {
      const Vec& p = classes[t.cls].prototypes[t.proto];
      const double d = norm_diff(*t.anchor, p);
      if (d == 0.0) continue;
      Vec& g = res.prototype_grads[t.cls][t.proto];
      for (std::size_t j = 0; j < p.size(); ++j) g[j] += w * (p[j] - (*t.anchor)[j]) / d;
    }
  }

  std::size_t reg_classes = 0;
  for (const auto& c : classes) reg_classes += c.prototypes.size() >= 2 ? 1 : 0;
  if (reg_classes > 0) {
    double reg_sum = 0.0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto& protos = classes[c].prototypes;
      const std::size_t k = protos.size();
      if (k < 2) continue;
      reg_sum += diversity_term(protos, margin);
      const double w = lambda / static_cast<double>(k * (k - 1) * reg_classes);
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          if (i == j) continue;
          const double d = norm_diff(protos[i], protos[j]);
          if (d >= margin || d == 0.0) continue;
          for (std::size_t e = 0; e < protos[i].size(); ++e) {
            const double u = (protos[i][e] - protos[j][e]) / d;
            res.prototype_grads[c][i][e] -= w * u;
            res.prototype_grads[c][j][e] += w * u;
          }
        }
      }
    }
    res.reg = reg_sum / static_cast<double>(reg_classes);
  }
  res.value = res.triplet + lambda * res.reg;
  return res;
}

namespace {

struct ClassPasses {
  detail::Mat memory;
  std::vector<detail::Mat> inputs;
  std::vector<detail::PassCache> caches;
  std::vector<Vec> last_rows;
  std::vector<Vec> prototypes;
};

ClassPasses forward_class(const GcpModel& model, const BatchClass& bc, std::size_t slot,
                          const TrainingBatch& batch) {
  const auto& cfg = model.config();
  const std::size_t d = cfg.dim;
  const std::size_t n = cfg.n_prototypes;
  const double* params = model.parameters().data();
  const auto& layout = model.layout();

  ClassPasses out;
  const Memory mem = memory_from_features(model, bc.class_id, bc.memory_features, bc.memory_cameras);
  out.memory = detail::rows_to_mat(mem.tokens, d);
  out.caches.resize(n);
  detail::Mat input(1, d);
  const auto sos = model.sos_token();
  std::copy(sos.begin(), sos.end(), input.row(0));
  for (std::size_t t = 0; t < n; ++t) {
    detail::DropoutPlan plan;
    if (batch.dropout) {
      plan.rate = cfg.dropout_rate;
      plan.key = detail::mix_key(detail::mix_key(batch.dropout_key, slot), t);
    }
    const detail::Mat y = detail::decoder_forward(model, input, out.memory, plan, &out.caches[t]);
    Vec last(y.row(y.rows - 1), y.row(y.rows - 1) + d);
    Vec p(params + layout.head_b, params + layout.head_b + d);
    for (std::size_t k = 0; k < d; ++k) {
      const double* wr = params + layout.head_w + k * d;
      for (std::size_t o = 0; o < d; ++o) p[o] += last[k] * wr[o];
    }
    out.inputs.push_back(input);
    detail::Mat next(input.rows + 1, d);
    std::copy(input.data.begin(), input.data.end(), next.data.begin());
    std::copy(p.begin(), p.end(), next.row(input.rows));
    input = std::move(next);
    out.last_rows.push_back(std::move(last));
    out.prototypes.push_back(std::move(p));
  }
  return out;
}

// Reverse pass over the unrolled generation. Pass t's input rows 1..t-1 are
// earlier prototypes, so their gradients are complete once every later pass
// has been processed.
void backward_class(const GcpModel& model, const BatchClass& bc, const ClassPasses& fw,
                    std::vector<Vec> d_protos, std::vector<double>& grad) {
  const std::size_t d = model.config().dim;
  const std::size_t n = fw.prototypes.size();
  const double* params = model.parameters().data();
  const auto& layout = model.layout();
  detail::Mat d_memory(fw.memory.rows, d);
  for (std::size_t t = n; t-- > 0;) {
    const Vec& dp = d_protos[t];
    detail::Mat dy(fw.inputs[t].rows, d);
    double* dlast = dy.row(dy.rows - 1);
    for (std::size_t k = 0; k < d; ++k) {
      const double* wr = params + layout.head_w + k * d;
      double* gw = grad.data() + layout.head_w + k * d;
      double acc = 0.0;
      for (std::size_t o = 0; o < d; ++o) {
        gw[o] += fw.last_rows[t][k] * dp[o];
        acc += dp[o] * wr[o];
      }
      dlast[k] = acc;
    }
    for (std::size_t o = 0; o < d; ++o) grad[layout.head_b + o] += dp[o];

    const detail::Mat dx =
        detail::decoder_backward(model, fw.caches[t], fw.memory, std::move(dy), grad.data(), d_memory);
    for (std::size_t j = 0; j < d; ++j) grad[layout.sos + j] += dx.at(0, j);
    for (std::size_t r = 1; r < dx.rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) d_protos[r - 1][j] += dx.at(r, j);
    }
  }
  for (std::size_t i = 0; i < d_memory.rows; ++i) {
    const std::size_t off = layout.camera_embeddings + bc.memory_cameras[i] * d;
    for (std::size_t j = 0; j < d; ++j) grad[off + j] += d_memory.at(i, j);
  }
}

}  // namespace

double batch_objective(const GcpModel& model, const TrainingBatch& batch,
                       std::vector<double>* grad, LossResult* detail) {
  const auto& cfg = model.config();
  const std::size_t nc = batch.classes.size();
  std::vector<ClassPasses> passes(nc);
  const auto count = static_cast<std::ptrdiff_t>(nc);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto c = static_cast<std::size_t>(i);
    passes[c] = forward_class(model, batch.classes[c], c, batch);
  }

  std::vector<ClassLossInput> inputs(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    inputs[c].class_id = batch.classes[c].class_id;
    inputs[c].anchors = batch.classes[c].anchors;
    inputs[c].prototypes = passes[c].prototypes;
  }
  LossResult loss = batch_loss(inputs, cfg.margin, cfg.lambda);

  if (grad) {
    const std::size_t total = model.parameters().size();
    std::vector<std::vector<double>> partial(nc);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      const auto c = static_cast<std::size_t>(i);
      partial[c].assign(total, 0.0);
      backward_class(model, batch.classes[c], passes[c], loss.prototype_grads[c], partial[c]);
    }
    // Fixed-order reduction keeps the result independent of scheduling.
    grad->assign(total, 0.0);
    for (const auto& p : partial) {
      for (std::size_t j = 0; j < total; ++j) (*grad)[j] += p[j];
    }
  }
  const double value = loss.value;
  if (detail) *detail = std::move(loss);
  return value;
}

TrainingBatch sample_batch(const EmbeddingSet& set, const std::vector<ClassId>& class_ids,
                           const GcpConfig& cfg, std::uint64_t batch_index) {
  const std::uint64_t sampling = detail::mix_key(cfg.seed, detail::kSamplingStream);
  std::mt19937_64 rng(detail::mix_key(sampling, batch_index));
  TrainingBatch batch;
  batch.dropout_key = detail::mix_key(detail::mix_key(cfg.seed, detail::kDropoutStream), batch_index);
  batch.dropout = cfg.dropout_rate > 0.0;
  const std::size_t k = cfg.instances_per_class;
  for (ClassId c : class_ids) {
    std::vector<std::size_t> perm = set.class_indices(c);
    std::shuffle(perm.begin(), perm.end(), rng);
    BatchClass bc;
    bc.class_id = c;
    std::vector<std::size_t> picked(perm.begin(), perm.begin() + std::min(k, perm.size()));
    while (picked.size() < k) {
      picked.push_back(perm[std::uniform_int_distribution<std::size_t>(0, perm.size() - 1)(rng)]);
    }
    for (std::size_t i : picked) bc.anchors.push_back(set[i].vector);
    const std::size_t hi = std::min(k, perm.size());
    const std::size_t lo = std::min<std::size_t>(2, hi);
    const std::size_t s = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    for (std::size_t i = 0; i < s; ++i) {
      bc.memory_features.push_back(set[perm[i]].vector);
      bc.memory_cameras.push_back(set[perm[i]].camera_id);
    }
    batch.classes.push_back(std::move(bc));
  }
  return batch;
}

void sgd_step(std::vector<double>& params, std::vector<double>& velocity,
              std::vector<double> grad, const GcpConfig& cfg) {
  if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    grad[i] += cfg.weight_decay * params[i];
    velocity[i] = cfg.momentum * velocity[i] + grad[i];
    params[i] -= cfg.lr * velocity[i];
  }
}

TrainResult train(const EmbeddingSet& set, const GcpConfig& cfg) {
  return train(set, cfg, GcpModel(cfg));
}

TrainResult train(const EmbeddingSet& set, const GcpConfig& cfg, GcpModel initial) {
  cfg.validate();
  if (set.dim() != cfg.dim) {
    throw Error(ErrorCategory::kDimensionMismatch,
                "set dimension " + std::to_string(set.dim()) + " does not match config dim " +
                    std::to_string(cfg.dim));
  }
  if (initial.parameters().size() != ModelLayout::build(cfg).total) {
    throw Error(ErrorCategory::kConfig, "initial model does not match the training config");
  }
  for (const auto& r : set.records()) {
    if (r.camera_id >= cfg.n_cameras) {
      throw Error(ErrorCategory::kUnknownCamera, "record '" + r.id + "' has camera " +
                                                     std::to_string(r.camera_id) +
                                                     " >= n_cameras " + std::to_string(cfg.n_cameras));
    }
  }

  TrainResult result{std::move(initial), {}};
  GcpModel& model = result.model;
  std::vector<double> velocity(model.parameters().size(), 0.0);
  std::vector<double> grad;
  std::vector<ClassId> order = set.class_ids();
  std::mt19937_64 shuffle_rng(detail::mix_key(cfg.seed, detail::kSamplingStream + 1));
  std::uint64_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_classes) {
      const std::vector<ClassId> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_classes)));
      const TrainingBatch batch = sample_batch(set, chunk, cfg, batch_index);
      const double loss = batch_objective(model, batch, &grad);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCategory::kNonFinite, "non-finite loss at epoch " + std::to_string(epoch + 1) +
                                                   ", batch " + std::to_string(batches + 1));
      }
      sgd_step(model.mutable_parameters(), velocity, std::move(grad), cfg);
      for (double v : model.parameters()) {
        if (!std::isfinite(v)) {
          throw Error(ErrorCategory::kNonFinite,
                      "non-finite parameter after epoch " + std::to_string(epoch + 1) + ", batch " +
                          std::to_string(batches + 1));
        }
      }
      grad.clear();
      loss_sum += loss;
      ++batches;
      ++batch_index;
      ++result.trace.steps;
    }
    result.trace.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  return result;
}

}  // namespace gcp

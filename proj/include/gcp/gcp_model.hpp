#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcp/embedding_store.hpp"
#include "gcp/kernels.hpp"

namespace gcp {

/// Hyperparameters of the prototype decoder and its training loop.
///
/// Defaults are the desk-scale setting (D=32, 2 blocks, 4 heads, FFN 64).
/// The published configuration (6 blocks, FFN 512, dropout 0.2) is accepted
/// unchanged.
struct GcpConfig {
  std::size_t dim = 32;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 64;
  double dropout_rate = 0.2;
  std::size_t n_prototypes = 3;
  double margin = 1.2;
  double lambda = 1.0;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_classes = 16;
  std::size_t instances_per_class = 8;
  std::size_t epochs = 30;
  std::size_t n_cameras = 1;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static GcpConfig from_json(const nlohmann::json& j);

  friend bool operator==(const GcpConfig&, const GcpConfig&) = default;
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

/// Offsets of every parameter tensor inside the flat parameter vector.
struct ModelLayout {
  struct Attention {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Block {
    std::size_t ln1_gain, ln1_bias;
    Attention self_attn;
    std::size_t ln2_gain, ln2_bias;
    Attention cross_attn;
    std::size_t ln3_gain, ln3_bias;
    std::size_t ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };

  std::size_t camera_embeddings = 0;
  std::size_t sos = 0;
  std::vector<Block> blocks;
  std::size_t head_w = 0;
  std::size_t head_b = 0;
  std::vector<TensorInfo> manifest;
  std::size_t total = 0;

  static ModelLayout build(const GcpConfig& cfg);
  const TensorInfo& tensor(const std::string& name) const;
};

/// Decoder parameters. Immutable once trained; generation is thread-safe.
class GcpModel {
 public:
  GcpModel() = default;
  /// Freshly initialised parameters drawn from the config seed's init stream.
  explicit GcpModel(const GcpConfig& cfg);

  const GcpConfig& config() const { return config_; }
  const ModelLayout& layout() const { return layout_; }
  const std::vector<double>& parameters() const { return params_; }
  std::vector<double>& mutable_parameters() { return params_; }

  std::span<const double> camera_embedding(CameraId cam) const;
  std::span<const double> sos_token() const;

  friend bool operator==(const GcpModel& a, const GcpModel& b) {
    return a.config_ == b.config_ && a.params_ == b.params_;
  }

 private:
  friend GcpModel load_checkpoint(const std::filesystem::path& path);

  GcpConfig config_;
  ModelLayout layout_;
  std::vector<double> params_;
};

/// Decoder memory for one class: feature vectors with camera embeddings added
/// row-wise. No sequence position is encoded.
struct Memory {
  std::vector<Vec> tokens;
  std::vector<CameraId> cameras;
  std::vector<Vec> features;
  ClassId class_id = 0;
  std::vector<std::string> source_record_ids;
  bool fallback_unfiltered = false;  // filter removed every record
};

Memory build_memory(const EmbeddingSet& set, const GcpModel& model, ClassId class_id,
                    std::optional<CameraId> excluded_camera = std::nullopt);
Memory memory_from_features(const GcpModel& model, ClassId class_id, std::vector<Vec> features,
                            std::vector<CameraId> cameras);

/// Autoregressive generation: step t decodes [sos; p_1..p_{t-1}] against the
/// memory and keeps the prototype head's output at the last position.
std::vector<Vec> generate_prototypes(const GcpModel& model, const Memory& memory, std::size_t n);

// ---------------------------------------------------------------------------
// Loss

double triplet_term(PointRef anchor, PointRef positive, PointRef negative, double margin);
/// Mean over ordered pairs k != k' of max(0, margin - |p_k - p_k'|).
double diversity_term(const std::vector<Vec>& prototypes, double margin);

struct ClassLossInput {
  ClassId class_id = 0;
  std::vector<Vec> anchors;     // batch features of this class
  std::vector<Vec> prototypes;  // generated prototypes of this class
};

struct LossResult {
  double value = 0.0;
  double triplet = 0.0;
  double reg = 0.0;
  std::size_t triplet_count = 0;
  std::size_t active_triplets = 0;
  /// d value / d prototype, same shape as the inputs' prototypes.
  std::vector<std::vector<Vec>> prototype_grads;
};

/// Triplet loss with prototypes as positives plus lambda times the diversity
/// hinge. For each prototype of class c every anchor of c is paired with its
/// nearest feature from another class in the batch.
LossResult batch_loss(const std::vector<ClassLossInput>& classes, double margin, double lambda);

// ---------------------------------------------------------------------------
// Training

/// One class's slice of a mini-batch.
struct BatchClass {
  ClassId class_id = 0;
  std::vector<Vec> anchors;
  std::vector<Vec> memory_features;
  std::vector<CameraId> memory_cameras;
};

struct TrainingBatch {
  std::vector<BatchClass> classes;
  std::uint64_t dropout_key = 0;
  bool dropout = true;
};

/// Batch loss through the full decoder. When `grad` is non-null it is resized
/// to the parameter count and receives the analytic gradient.
double batch_objective(const GcpModel& model, const TrainingBatch& batch,
                       std::vector<double>* grad, LossResult* detail = nullptr);

struct TrainingTrace {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

struct TrainResult {
  GcpModel model;
  TrainingTrace trace;
};

/// Samples a batch of `class_ids` from `set` following the config's batch
/// shape. Exposed for tests.
TrainingBatch sample_batch(const EmbeddingSet& set, const std::vector<ClassId>& class_ids,
                           const GcpConfig& cfg, std::uint64_t batch_index);

void sgd_step(std::vector<double>& params, std::vector<double>& velocity,
              std::vector<double> grad, const GcpConfig& cfg);

TrainResult train(const EmbeddingSet& set, const GcpConfig& cfg);
/// Continues from `initial`; used for checkpoint resumption and tests.
TrainResult train(const EmbeddingSet& set, const GcpConfig& cfg, GcpModel initial);

// ---------------------------------------------------------------------------
// Selection and checkpoints

/// Generates prototypes for every class. For classes present in
/// `query_camera_by_class` the memory excludes records from that camera.
PrototypeSet select_gcp(const EmbeddingSet& set, const GcpModel& model, std::size_t n,
                        const std::map<ClassId, CameraId>& query_camera_by_class = {},
                        Execution exec = Execution::kParallel);

/// Prototypes for one class, optionally excluding a camera. Sets
/// `*fallback` when the filter emptied the class.
std::vector<Vec> gcp_class_prototypes(const EmbeddingSet& set, const GcpModel& model,
                                      ClassId class_id, std::size_t n,
                                      std::optional<CameraId> excluded_camera,
                                      bool* fallback = nullptr);

void save_checkpoint(const GcpModel& model, const std::filesystem::path& path);
GcpModel load_checkpoint(const std::filesystem::path& path);

}  // namespace gcp

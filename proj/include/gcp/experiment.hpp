#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcp/embedding_store.hpp"
#include "gcp/gcp_model.hpp"
#include "gcp/retrieval.hpp"
#include "gcp/selectors.hpp"

namespace gcp {

// ---------------------------------------------------------------------------
// Synthetic data

/// Generative recipe for a gallery/query pair.
///
/// Each class has a center drawn from N(0, class_center_scale^2 I). Records
/// are center + camera offset + isotropic noise. With `chain_length > 1` or
/// `elongation > 0`, classes are laid out in chains along a random axis,
/// `chain_spacing` apart and alternately `chain_offset` to the side, and each
/// class is spread uniformly along the axis over +-`elongation`.
///
/// Distractors are records shifted by `distractor_distance`, the same share
/// in gallery and queries. In chains they sit on the side facing away from
/// the next class; the last class of a chain has none.
struct SyntheticSpec {
  std::size_t n_classes = 50;
  std::size_t min_instances = 8;
  std::size_t max_instances = 8;
  std::size_t queries_per_class = 2;
  std::size_t dim = 32;
  std::size_t n_cameras = 4;
  double class_center_scale = 1.0;
  double within_class_noise = 0.1;
  double camera_offset_scale = 0.05;
  double elongation = 0.0;
  std::size_t chain_length = 1;
  double chain_spacing = 0.0;
  double chain_offset = 0.0;
  // Share of each class's gallery and query records that are distractors.
  double distractor_fraction = 0.0;
  double distractor_distance = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Named presets: "default" and "tradeoff".
SyntheticSpec synthetic_preset(const std::string& name);

struct SyntheticData {
  EmbeddingSet gallery;
  EmbeddingSet queries;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// Experiments

enum class Protocol { kPlain, kCameraFilteredRegen };
enum class SweepAxis { kNone, kN, kAlpha };

std::string protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);

/// Versioned experiment description; see README for the schema.
struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::optional<std::filesystem::path> gallery_path;
  std::optional<std::filesystem::path> query_path;
  std::optional<SyntheticSpec> synthetic;

  SelectorConfig selector;
  std::optional<GcpConfig> gcp;
  std::optional<std::filesystem::path> gcp_checkpoint;

  Protocol protocol = Protocol::kPlain;
  SweepAxis sweep_axis = SweepAxis::kNone;
  std::vector<double> sweep_values;
  std::string buckets = "1-15,16-30,31-50,51+";
  std::size_t max_rank = 25;
  ApMode ap_mode = ApMode::kPerPrototype;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;

  /// Reports conflicts (missing dataset, gcp without model config, empty
  /// sweep list) as Error(kConfig) before any compute happens.
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

struct Dataset {
  EmbeddingSet gallery;
  EmbeddingSet queries;
};

/// Loads files or generates the synthetic set. Gallery and queries share one
/// label map. The experiment seed replaces the synthetic spec's seed.
Dataset load_dataset(const ExperimentConfig& cfg);

struct ExperimentResult {
  EvalReport report;
  PrototypeSet prototypes;  // plain selection over the whole gallery
  std::optional<GcpModel> model;
  std::size_t regenerated_groups = 0;  // distinct (class, camera) cache entries
};

/// Selects, ranks and evaluates. Writes artifacts when output_dir is set.
ExperimentResult run_experiment(const ExperimentConfig& cfg);
/// Same, on an already loaded dataset, optionally reusing a trained model.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& data,
                                const GcpModel* model = nullptr);

struct SweepRow {
  double value = 0.0;
  double rank1 = 0.0;
  double map = 0.0;
  std::size_t total_prototypes = 0;
};

/// One experiment per N; GCP is retrained per N. Writes sweep_n.csv.
std::vector<SweepRow> sweep_n(const ExperimentConfig& cfg, const std::vector<std::size_t>& n_list);
/// One experiment per alpha (alphafps selector). Writes sweep_alpha.csv.
std::vector<SweepRow> sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& alphas);
/// Per-bucket mAP of a single run. Writes group_eval.csv.
std::vector<GroupResult> group_evaluate(const ExperimentConfig& cfg,
                                        const std::vector<GroupBucket>& buckets);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& axis,
                     const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Artifacts

nlohmann::json prototypes_to_json(const PrototypeSet& protos);
PrototypeSet prototypes_from_json(const nlohmann::json& j);
void write_prototypes(const PrototypeSet& protos, const std::filesystem::path& path);
PrototypeSet read_prototypes(const std::filesystem::path& path);
void write_labels(const LabelMap& labels, const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace gcp

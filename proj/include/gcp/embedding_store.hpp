#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gcp {

using Vec = std::vector<double>;
using ClassId = std::uint32_t;
using CameraId = std::uint32_t;

struct EmbeddingRecord {
  std::string id;
  Vec vector;
  ClassId class_id = 0;
  CameraId camera_id = 0;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

// Dense class/camera ids are assigned in order of first appearance. Query
// files are loaded against the gallery's map so both agree on the ids.
class LabelMap {
 public:
  ClassId intern_class(const std::string& label);
  CameraId intern_camera(const std::string& label);

  // Registers labels for ids that were read as raw integers (binary files).
  void ensure_class(ClassId id);
  void ensure_camera(CameraId id);

  const std::vector<std::string>& class_labels() const { return class_labels_; }
  const std::vector<std::string>& camera_labels() const { return camera_labels_; }
  const std::string& class_label(ClassId id) const;
  const std::string& camera_label(CameraId id) const;

 private:
  static std::uint32_t intern(const std::string& label, std::vector<std::string>& labels,
                              std::unordered_map<std::string, std::uint32_t>& lookup);
  static void ensure(std::uint32_t id, std::vector<std::string>& labels,
                     std::unordered_map<std::string, std::uint32_t>& lookup);

  std::vector<std::string> class_labels_;
  std::vector<std::string> camera_labels_;
  std::unordered_map<std::string, std::uint32_t> class_lookup_;
  std::unordered_map<std::string, std::uint32_t> camera_lookup_;
};

using RecordView = std::vector<const EmbeddingRecord*>;

/// Immutable, indexed collection of labeled embedding vectors.
///
/// Construction validates that every vector has the same dimension with
/// finite entries and that record ids are unique. After that the set is
/// read-only and may be shared across threads.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::vector<EmbeddingRecord> records, LabelMap labels = {});

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t dim() const { return dim_; }

  const std::vector<EmbeddingRecord>& records() const { return records_; }
  const EmbeddingRecord& operator[](std::size_t i) const { return records_[i]; }
  const LabelMap& labels() const { return labels_; }

  /// Sorted list of classes present in the set.
  const std::vector<ClassId>& class_ids() const { return class_ids_; }
  bool has_class(ClassId c) const { return class_index_.count(c) != 0; }
  std::size_t class_size(ClassId c) const;
  const std::vector<std::size_t>& class_indices(ClassId c) const;
  /// Record indices of class c captured by camera `cam`; empty if none.
  const std::vector<std::size_t>& camera_indices(ClassId c, CameraId cam) const;

  /// One past the largest camera id used by any record.
  std::size_t camera_count() const { return camera_count_; }

  friend bool operator==(const EmbeddingSet& a, const EmbeddingSet& b) {
    return a.dim_ == b.dim_ && a.records_ == b.records_;
  }

 private:
  std::vector<EmbeddingRecord> records_;
  LabelMap labels_;
  std::size_t dim_ = 0;
  std::size_t camera_count_ = 0;
  std::vector<ClassId> class_ids_;
  std::map<ClassId, std::vector<std::size_t>> class_index_;
  std::map<std::pair<ClassId, CameraId>, std::vector<std::size_t>> camera_index_;
};

enum class FileFormat { kCsv, kBinary };

FileFormat parse_file_format(const std::string& name);
/// Picks binary for a `.bin`/`.gcpe` extension, CSV otherwise.
FileFormat format_from_extension(const std::filesystem::path& path);

EmbeddingSet load_embedding_set(const std::filesystem::path& path, FileFormat format);
/// Loads with class/camera labels interned into `labels`, which is updated
/// in place. Use this to load a query file against a gallery's label map.
EmbeddingSet load_embedding_set(const std::filesystem::path& path, FileFormat format,
                                LabelMap& labels);
void save_embedding_set(const EmbeddingSet& set, const std::filesystem::path& path,
                        FileFormat format);

RecordView class_view(const EmbeddingSet& set, ClassId class_id);
/// Records of `class_id` whose camera differs from `excluded_camera`.
RecordView camera_filtered_view(const EmbeddingSet& set, ClassId class_id,
                                CameraId excluded_camera);

enum class SelectorKind { kInstance, kCentroid, kKCentroid, kFps, kAlphaFps, kGcp };

std::string selector_name(SelectorKind kind);
SelectorKind parse_selector(const std::string& name);

/// Per-class ordered prototype lists. List position is the generation step.
struct PrototypeSet {
  std::map<ClassId, std::vector<Vec>> per_class;
  SelectorKind selector = SelectorKind::kInstance;
  std::map<std::string, std::string> params_echo;
  std::size_t dim = 0;

  std::size_t total_count() const;

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;
};

}  // namespace gcp

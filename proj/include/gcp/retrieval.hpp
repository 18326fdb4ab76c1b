#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcp/embedding_store.hpp"
#include "gcp/kernels.hpp"

namespace gcp {

/// Euclidean distance; throws Error(kDimensionMismatch) on unequal sizes.
double distance(PointRef p, PointRef q);

struct RankedItem {
  ClassId class_id = 0;
  std::uint32_t prototype_index = 0;
  double distance = 0.0;

  friend bool operator==(const RankedItem&, const RankedItem&) = default;
};

struct Ranking {
  std::string query_id;
  std::vector<RankedItem> items;  // ascending distance, ties by (class, index)
  bool tie_rule_applied = false;
};

/// The prototypes a single query is ranked against: a shared base set, with
/// the query's own class optionally replaced by prototypes regenerated
/// without the query's camera.
struct PrototypeView {
  const PrototypeSet* base = nullptr;
  std::optional<ClassId> override_class;
  const std::vector<Vec>* override_prototypes = nullptr;

  const std::vector<Vec>* prototypes_for(ClassId c) const;
};

Ranking rank_query(const EmbeddingRecord& query, const PrototypeView& view);
Ranking rank_query(const EmbeddingRecord& query, const PrototypeSet& prototypes);

/// How relevant items are counted when computing average precision.
enum class ApMode {
  kPerPrototype,  // every own-class prototype in the ranking is a relevant item
  kPerClass,      // ranking collapsed to classes; one relevant item per query
};

double average_precision(const std::vector<bool>& relevance);
double precision_at_k(const Ranking& ranking, ClassId query_class, std::size_t k);

struct GroupBucket {
  std::size_t lo = 1;
  std::optional<std::size_t> hi;  // inclusive; open-ended when absent
  std::string label() const;
  bool contains(std::size_t n) const { return n >= lo && (!hi || n <= *hi); }
};

/// Parses "1-15,16-30,31-50,51+" style bucket lists.
std::vector<GroupBucket> parse_buckets(const std::string& text);

struct GroupResult {
  std::string label;
  std::size_t query_count = 0;
  std::optional<double> map;  // absent for empty buckets
};

struct QueryResult {
  std::string query_id;
  ClassId class_id = 0;
  double ap = 0.0;
  std::optional<std::size_t> first_hit;  // 1-based rank of the first own-class prototype
};

struct EvalOptions {
  std::size_t max_rank = 25;
  ApMode ap_mode = ApMode::kPerPrototype;
  std::vector<GroupBucket> buckets;
  /// Gallery size per class; bucketing keys on the query class's entry.
  std::map<ClassId, std::size_t> gallery_class_sizes;
  bool keep_per_query = false;
  Execution exec = Execution::kParallel;
};

struct EvalReport {
  std::vector<double> cmc;  // cmc[k-1] is rank-k accuracy
  double top1 = 0.0;
  double map = 0.0;
  std::size_t query_count = 0;
  std::vector<GroupResult> per_group;
  std::vector<std::string> flagged_queries;  // query class had no prototypes
  std::vector<QueryResult> per_query;
  nlohmann::json config_echo = nlohmann::json::object();
};

using PrototypeProvider = std::function<PrototypeView(const EmbeddingRecord&)>;

/// Ranks every query against its prototypes and aggregates CMC, mAP and the
/// per-group breakdown. The provider must be safe to call concurrently.
EvalReport evaluate(const EmbeddingSet& queries, const PrototypeProvider& provider,
                    const EvalOptions& options);
EvalReport evaluate(const EmbeddingSet& queries, const PrototypeSet& prototypes,
                    const EvalOptions& options);

struct CoverageResult {
  std::size_t violations = 0;
  std::vector<std::string> violating_ids;

  friend bool operator==(const CoverageResult&, const CoverageResult&) = default;
};

/// Gallery records with no own-class prototype strictly nearer than every
/// other-class prototype. Ties count as violations.
CoverageResult coverage_violations(const EmbeddingSet& set, const PrototypeSet& prototypes,
                                   Execution exec = Execution::kParallel);

/// Per class, distance from each prototype to the class's gallery centroid.
std::map<ClassId, std::vector<double>> prototype_displacement(const PrototypeSet& prototypes,
                                                              const EmbeddingSet& set);

// Report serialization. JSON keys are emitted in sorted order.
nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
void write_report_json(const EvalReport& report, const std::filesystem::path& path);
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace gcp

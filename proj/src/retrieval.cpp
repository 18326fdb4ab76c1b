#include "gcp/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "gcp/error.hpp"
#include "gcp/selectors.hpp"

namespace gcp {

double distance(PointRef p, PointRef q) {
  if (p.size() != q.size()) {
    throw Error(ErrorCategory::kDimensionMismatch,
                "distance between vectors of dimension " + std::to_string(p.size()) + " and " +
                    std::to_string(q.size()));
  }
  return kernels::euclidean_distance(p, q);
}

const std::vector<Vec>* PrototypeView::prototypes_for(ClassId c) const {
  if (override_class && *override_class == c && override_prototypes != nullptr) {
    return override_prototypes;
  }
  auto it = base->per_class.find(c);
  return it == base->per_class.end() ? nullptr : &it->second;
}

Ranking rank_query(const EmbeddingRecord& query, const PrototypeView& view) {
  if (view.base == nullptr || view.base->per_class.empty()) {
    throw Error(ErrorCategory::kEmptyInput, "empty prototype set");
  }
  Ranking ranking;
  ranking.query_id = query.id;
  ranking.items.reserve(view.base->total_count());
  auto add_class = [&](ClassId c, const std::vector<Vec>& protos) {
    for (std::size_t k = 0; k < protos.size(); ++k) {
      ranking.items.push_back({c, static_cast<std::uint32_t>(k), distance(protos[k], query.vector)});
    }
  };
  for (const auto& [c, protos] : view.base->per_class) add_class(c, *view.prototypes_for(c));
  if (view.override_class && view.base->per_class.count(*view.override_class) == 0 &&
      view.override_prototypes != nullptr) {
    add_class(*view.override_class, *view.override_prototypes);
  }
  std::sort(ranking.items.begin(), ranking.items.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.prototype_index < b.prototype_index;
  });
  for (std::size_t i = 1; i < ranking.items.size(); ++i) {
    if (ranking.items[i].distance == ranking.items[i - 1].distance) {
      ranking.tie_rule_applied = true;
      break;
    }
  }
  return ranking;
}

Ranking rank_query(const EmbeddingRecord& query, const PrototypeSet& prototypes) {
  return rank_query(query, PrototypeView{&prototypes, std::nullopt, nullptr});
}

double average_precision(const std::vector<bool>& relevance) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < relevance.size(); ++r) {
    if (!relevance[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits == 0 ? 0.0 : sum / static_cast<double>(hits);
}

double precision_at_k(const Ranking& ranking, ClassId query_class, std::size_t k) {
  k = std::min(k, ranking.items.size());
  if (k == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += ranking.items[i].class_id == query_class;
  return static_cast<double>(hits) / static_cast<double>(k);
}

std::string GroupBucket::label() const {
  return hi ? std::to_string(lo) + "-" + std::to_string(*hi) : std::to_string(lo) + "+";
}

std::vector<GroupBucket> parse_buckets(const std::string& text) {
  std::vector<GroupBucket> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    GroupBucket b;
    try {
      if (item.back() == '+') {
        b.lo = std::stoul(item.substr(0, item.size() - 1));
      } else {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
          b.lo = std::stoul(item);
          b.hi = b.lo;
        } else {
          b.lo = std::stoul(item.substr(0, dash));
          b.hi = std::stoul(item.substr(dash + 1));
        }
      }
    } catch (const std::exception&) {
      throw Error(ErrorCategory::kConfig, "bad bucket '" + item + "'");
    }
    if (b.lo == 0 || (b.hi && *b.hi < b.lo)) {
      throw Error(ErrorCategory::kConfig, "bad bucket '" + item + "'");
    }
    out.push_back(b);
  }
  if (out.empty()) throw Error(ErrorCategory::kConfig, "empty bucket list");
  return out;
}

namespace {

QueryResult score_query(const EmbeddingRecord& query, const PrototypeView& view, ApMode mode) {
  const Ranking ranking = rank_query(query, view);
  QueryResult result;
  result.query_id = query.id;
  result.class_id = query.class_id;
  std::vector<bool> relevance;
  relevance.reserve(ranking.items.size());
  for (std::size_t r = 0; r < ranking.items.size(); ++r) {
    const bool rel = ranking.items[r].class_id == query.class_id;
    if (rel && !result.first_hit) result.first_hit = r + 1;
    relevance.push_back(rel);
  }
  if (mode == ApMode::kPerClass) {
    std::set<ClassId> seen;
    relevance.clear();
    for (const auto& item : ranking.items) {
      if (seen.insert(item.class_id).second) relevance.push_back(item.class_id == query.class_id);
    }
  }
  result.ap = average_precision(relevance);
  return result;
}

}  // namespace

EvalReport evaluate(const EmbeddingSet& queries, const PrototypeProvider& provider,
                    const EvalOptions& options) {
  if (queries.empty()) throw Error(ErrorCategory::kEmptyInput, "no queries to evaluate");
  if (options.max_rank == 0) throw Error(ErrorCategory::kConfig, "max_rank must be >= 1");
  const std::size_t n = queries.size();
  std::vector<QueryResult> results(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
  if (options.exec == Execution::kParallel) {
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      const auto& q = queries[static_cast<std::size_t>(i)];
      results[static_cast<std::size_t>(i)] = score_query(q, provider(q), options.ap_mode);
    }
  } else {
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      const auto& q = queries[static_cast<std::size_t>(i)];
      results[static_cast<std::size_t>(i)] = score_query(q, provider(q), options.ap_mode);
    }
  }

  EvalReport report;
  report.query_count = n;
  std::vector<std::size_t> hits_at(options.max_rank, 0);
  double ap_sum = 0.0;
  for (const auto& r : results) {
    ap_sum += r.ap;
    if (!r.first_hit) {
      report.flagged_queries.push_back(r.query_id);
      continue;
    }
    if (*r.first_hit <= options.max_rank) ++hits_at[*r.first_hit - 1];
  }
  report.cmc.resize(options.max_rank);
  std::size_t running = 0;
  for (std::size_t k = 0; k < options.max_rank; ++k) {
    running += hits_at[k];
    report.cmc[k] = static_cast<double>(running) / static_cast<double>(n);
  }
  report.top1 = report.cmc[0];
  report.map = ap_sum / static_cast<double>(n);

  for (const auto& bucket : options.buckets) {
    GroupResult g;
    g.label = bucket.label();
    double sum = 0.0;
    for (const auto& r : results) {
      auto it = options.gallery_class_sizes.find(r.class_id);
      const std::size_t size = it == options.gallery_class_sizes.end() ? 0 : it->second;
      if (!bucket.contains(size)) continue;
      ++g.query_count;
      sum += r.ap;
    }
    if (g.query_count > 0) g.map = sum / static_cast<double>(g.query_count);
    report.per_group.push_back(std::move(g));
  }
  if (options.keep_per_query) report.per_query = std::move(results);
  report.config_echo["max_rank"] = options.max_rank;
  report.config_echo["ap_mode"] = options.ap_mode == ApMode::kPerClass ? "per_class" : "per_prototype";
  return report;
}

EvalReport evaluate(const EmbeddingSet& queries, const PrototypeSet& prototypes,
                    const EvalOptions& options) {
  const PrototypeView view{&prototypes, std::nullopt, nullptr};
  return evaluate(queries, [&](const EmbeddingRecord&) { return view; }, options);
}

CoverageResult coverage_violations(const EmbeddingSet& set, const PrototypeSet& prototypes,
                                   Execution exec) {
  const std::size_t n = set.size();
  std::vector<char> violated(n, 0);
  auto check = [&](std::size_t i) {
    const auto& x = set[i];
    double own = std::numeric_limits<double>::infinity();
    double other = std::numeric_limits<double>::infinity();
    for (const auto& [c, protos] : prototypes.per_class) {
      for (const auto& p : protos) {
        const double d = distance(p, x.vector);
        if (c == x.class_id) {
          own = std::min(own, d);
        } else {
          other = std::min(other, d);
        }
      }
    }
    violated[i] = !(own < other);
  };
  const auto count = static_cast<std::ptrdiff_t>(n);
  if (exec == Execution::kParallel) {
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t i = 0; i < count; ++i) check(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < n; ++i) check(i);
  }
  CoverageResult result;
  for (std::size_t i = 0; i < n; ++i) {
    if (!violated[i]) continue;
    ++result.violations;
    result.violating_ids.push_back(set[i].id);
  }
  return result;
}

std::map<ClassId, std::vector<double>> prototype_displacement(const PrototypeSet& prototypes,
                                                              const EmbeddingSet& set) {
  std::map<ClassId, std::vector<double>> out;
  for (const auto& [c, protos] : prototypes.per_class) {
    if (!set.has_class(c)) continue;
    const auto refs = point_refs(set, set.class_indices(c));
    const Vec centre = mean_of(refs);
    auto& row = out[c];
    for (const auto& p : protos) row.push_back(distance(p, centre));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json report_to_json(const EvalReport& report) {
  using nlohmann::json;
  json j;
  j["cmc"] = report.cmc;
  j["top1"] = report.top1;
  j["map"] = report.map;
  j["query_count"] = report.query_count;
  j["flagged_queries"] = report.flagged_queries;
  j["config"] = report.config_echo;
  json groups = json::array();
  for (const auto& g : report.per_group) {
    json row;
    row["label"] = g.label;
    row["query_count"] = g.query_count;
    row["map"] = g.map ? json(*g.map) : json(nullptr);
    groups.push_back(row);
  }
  j["per_group"] = groups;
  json per_query = json::array();
  for (const auto& q : report.per_query) {
    json row;
    row["id"] = q.query_id;
    row["class"] = q.class_id;
    row["ap"] = q.ap;
    row["first_hit"] = q.first_hit ? json(*q.first_hit) : json(nullptr);
    per_query.push_back(row);
  }
  j["per_query"] = per_query;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.cmc = j.at("cmc").get<std::vector<double>>();
    r.top1 = j.at("top1").get<double>();
    r.map = j.at("map").get<double>();
    r.query_count = j.at("query_count").get<std::size_t>();
    r.flagged_queries = j.at("flagged_queries").get<std::vector<std::string>>();
    r.config_echo = j.at("config");
    for (const auto& row : j.at("per_group")) {
      GroupResult g;
      g.label = row.at("label").get<std::string>();
      g.query_count = row.at("query_count").get<std::size_t>();
      if (!row.at("map").is_null()) g.map = row.at("map").get<double>();
      r.per_group.push_back(std::move(g));
    }
    for (const auto& row : j.at("per_query")) {
      QueryResult q;
      q.query_id = row.at("id").get<std::string>();
      q.class_id = row.at("class").get<ClassId>();
      q.ap = row.at("ap").get<double>();
      if (!row.at("first_hit").is_null()) q.first_hit = row.at("first_hit").get<std::size_t>();
      r.per_query.push_back(std::move(q));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kFormat, std::string("malformed report: ") + e.what());
  }
  return r;
}

void write_report_json(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out << report_to_json(report).dump(2) << '\n';
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  auto real = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "metric,key,value\n";
  for (std::size_t k = 0; k < report.cmc.size(); ++k) {
    out << "cmc," << (k + 1) << ',' << real(report.cmc[k]) << '\n';
  }
  out << "summary,top1," << real(report.top1) << '\n';
  out << "summary,map," << real(report.map) << '\n';
  out << "summary,query_count," << report.query_count << '\n';
  for (const auto& g : report.per_group) {
    out << "group_map," << g.label << ',' << (g.map ? real(*g.map) : std::string("NA")) << '\n';
    out << "group_count," << g.label << ',' << g.query_count << '\n';
  }
  if (!out) throw Error(ErrorCategory::kIo, "write failed for " + path.string());
}

}  // namespace gcp

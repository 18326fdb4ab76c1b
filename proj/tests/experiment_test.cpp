#include "gcp/experiment.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "gcp/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gcp;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_classes = 10;
  s.min_instances = 4;
  s.max_instances = 9;
  s.queries_per_class = 3;
  s.dim = 8;
  s.n_cameras = 3;
  s.class_center_scale = 1.0;
  s.within_class_noise = 0.3;
  s.camera_offset_scale = 0.05;
  return s;
}

ExperimentConfig synthetic_config(SelectorKind method, std::size_t n = 1) {
  ExperimentConfig cfg;
  cfg.synthetic = small_spec();
  cfg.selector.method = method;
  cfg.selector.n_prototypes = n;
  cfg.seed = 5;
  return cfg;
}

GcpConfig small_gcp() {
  GcpConfig g;
  g.n_blocks = 1;
  g.n_heads = 2;
  g.ffn_dim = 16;
  g.epochs = 3;
  g.batch_classes = 4;
  g.instances_per_class = 4;
  return g;
}

void expect_same_report(const EvalReport& a, const EvalReport& b) {
  EXPECT_EQ(a.top1, b.top1);
  EXPECT_EQ(a.map, b.map);
  EXPECT_EQ(a.cmc, b.cmc);
  ASSERT_EQ(a.per_query.size(), b.per_query.size());
  for (std::size_t i = 0; i < a.per_query.size(); ++i) EXPECT_EQ(a.per_query[i].ap, b.per_query[i].ap);
}

bool same_records(const EmbeddingSet& a, const EmbeddingSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || a[i].vector != b[i].vector || a[i].class_id != b[i].class_id ||
        a[i].camera_id != b[i].camera_id) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Synthetic, SameSeedSameData) {
  const auto a = generate_synthetic(small_spec());
  const auto b = generate_synthetic(small_spec());
  EXPECT_TRUE(same_records(a.gallery, b.gallery));
  EXPECT_TRUE(same_records(a.queries, b.queries));
  SyntheticSpec other = small_spec();
  other.seed = 99;
  EXPECT_FALSE(same_records(a.gallery, generate_synthetic(other).gallery));
}

TEST(Synthetic, NoNoiseGivesIdenticalClassRecords) {
  SyntheticSpec s = small_spec();
  s.within_class_noise = 0.0;
  s.camera_offset_scale = 0.0;
  const auto data = generate_synthetic(s);
  for (ClassId c : data.gallery.class_ids()) {
    const auto& idx = data.gallery.class_indices(c);
    for (std::size_t i : idx) EXPECT_EQ(data.gallery[i].vector, data.gallery[idx.front()].vector);
  }
}

TEST(Synthetic, SizesAndLabelsFollowSpec) {
  const SyntheticSpec s = small_spec();
  const auto data = generate_synthetic(s);
  EXPECT_EQ(data.gallery.class_ids().size(), s.n_classes);
  EXPECT_EQ(data.queries.size(), s.n_classes * s.queries_per_class);
  for (ClassId c : data.gallery.class_ids()) {
    EXPECT_GE(data.gallery.class_size(c), s.min_instances);
    EXPECT_LE(data.gallery.class_size(c), s.max_instances);
  }
  EXPECT_EQ(data.gallery.labels().class_label(0), "c0");
  EXPECT_EQ(data.queries.labels().camera_labels(), data.gallery.labels().camera_labels());
}

TEST(Synthetic, DistractorsSitAwayFromChainNeighbour) {
  SyntheticSpec s = small_spec();
  s.n_classes = 2;
  s.min_instances = s.max_instances = 10;
  s.within_class_noise = 0.0;
  s.camera_offset_scale = 0.0;
  s.chain_length = 2;
  s.chain_spacing = 3.0;
  s.distractor_fraction = 0.3;
  s.distractor_distance = 2.0;
  const auto data = generate_synthetic(s);
  const auto& g = data.gallery;
  const Vec core0 = g[g.class_indices(0).front()].vector;
  const Vec core1 = g[g.class_indices(1).front()].vector;
  EXPECT_NEAR(oracle::l2(core0, core1), 3.0, 1e-12);

  std::size_t displaced = 0;
  for (std::size_t i : g.class_indices(0)) {
    const double d = oracle::l2(g[i].vector, core0);
    if (d == 0.0) continue;
    ++displaced;
    EXPECT_NEAR(d, 2.0, 1e-12);
    EXPECT_NEAR(oracle::l2(g[i].vector, core1), 5.0, 1e-12);
  }
  EXPECT_EQ(displaced, 3u);
  for (std::size_t i : g.class_indices(1)) EXPECT_EQ(g[i].vector, core1);
  // Three queries per class: one of class 0's is a distractor.
  std::size_t displaced_queries = 0;
  for (const auto& q : data.queries.records()) {
    if (q.class_id == 1) EXPECT_EQ(q.vector, core1);
    if (q.class_id == 0 && q.vector != core0) {
      ++displaced_queries;
      EXPECT_NEAR(oracle::l2(q.vector, core0), 2.0, 1e-12);
    }
  }
  EXPECT_EQ(displaced_queries, 1u);
}

TEST(Synthetic, SpecJsonRoundTripAndPresets) {
  SyntheticSpec s = synthetic_preset("tradeoff");
  EXPECT_EQ(SyntheticSpec::from_json(s.to_json()), s);
  EXPECT_EQ(SyntheticSpec::from_json(nlohmann::json("tradeoff")), s);

  const auto tweaked = SyntheticSpec::from_json({{"preset", "tradeoff"}, {"n_classes", 6}});
  EXPECT_EQ(tweaked.n_classes, 6u);
  EXPECT_EQ(tweaked.chain_spacing, s.chain_spacing);

  try {
    SyntheticSpec::from_json({{"n_class", 3}});
    FAIL() << "expected a config error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kConfig);
  }
  EXPECT_THROW(synthetic_preset("nope"), Error);
}

TEST(Experiment, CentroidIsExactWhenNoiseIsSmall) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kCentroid);
  cfg.synthetic->within_class_noise = 1e-3;
  cfg.synthetic->camera_offset_scale = 0.0;
  const auto r = run_experiment(cfg);
  EXPECT_EQ(r.report.top1, 1.0);
}

TEST(Experiment, InstanceRankOneMatchesNearestNeighbour) {
  const ExperimentConfig cfg = synthetic_config(SelectorKind::kInstance);
  const Dataset data = load_dataset(cfg);
  const auto r = run_experiment(cfg, data);

  std::size_t correct = 0;
  for (const auto& q : data.queries.records()) {
    double best = std::numeric_limits<double>::infinity();
    ClassId best_class = 0;
    for (const auto& g : data.gallery.records()) {
      const double d = oracle::l2(q.vector, g.vector);
      if (d < best) {
        best = d;
        best_class = g.class_id;
      }
    }
    correct += best_class == q.class_id;
  }
  EXPECT_DOUBLE_EQ(r.report.top1, static_cast<double>(correct) / data.queries.size());
}

TEST(Experiment, CentroidEqualsOneMeansCluster) {
  const ExperimentConfig a = synthetic_config(SelectorKind::kCentroid);
  const ExperimentConfig b = synthetic_config(SelectorKind::kKCentroid, 1);
  const Dataset data = load_dataset(a);
  expect_same_report(run_experiment(a, data).report, run_experiment(b, data).report);
}

TEST(Experiment, GcpRunIsDeterministic) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kGcp, 2);
  cfg.gcp = small_gcp();
  const Dataset data = load_dataset(cfg);
  const auto a = run_experiment(cfg, data);
  const auto b = run_experiment(cfg, data);
  EXPECT_EQ(a.prototypes.per_class, b.prototypes.per_class);
  EXPECT_EQ(a.model->parameters(), b.model->parameters());
  expect_same_report(a.report, b.report);
  EXPECT_EQ(a.report.config_echo.at("gcp_resolved").at("dim"), 8);
}

TEST(Experiment, ConfigConflictsFailBeforeWork) {
  const auto dir = tu::temp_dir("conflict");
  ExperimentConfig cfg = synthetic_config(SelectorKind::kGcp, 3);
  cfg.synthetic->n_classes = 100000;
  cfg.output_dir = dir / "out";
  try {
    run_experiment(cfg);
    FAIL() << "expected a config error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kConfig);
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "out"));

  ExperimentConfig both = synthetic_config(SelectorKind::kCentroid);
  both.gallery_path = "g.csv";
  both.query_path = "q.csv";
  EXPECT_THROW(both.validate(), Error);

  ExperimentConfig alpha = synthetic_config(SelectorKind::kCentroid);
  alpha.sweep_axis = SweepAxis::kAlpha;
  alpha.sweep_values = {0.5};
  EXPECT_THROW(alpha.validate(), Error);
}

TEST(Experiment, ConfigJsonRoundTrip) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kAlphaFps, 4);
  cfg.selector.alpha = 0.25;
  cfg.gcp = small_gcp();
  cfg.protocol = Protocol::kCameraFilteredRegen;
  cfg.sweep_axis = SweepAxis::kAlpha;
  cfg.sweep_values = {0.0, 0.5, 1.0};
  cfg.ap_mode = ApMode::kPerClass;
  cfg.output_dir = "out";
  const ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.selector.alpha, 0.25);
  EXPECT_EQ(*back.gcp, *cfg.gcp);

  auto j = cfg.to_json();
  j["selectr"] = 1;
  EXPECT_THROW(ExperimentConfig::from_json(j), Error);
  j = cfg.to_json();
  j["version"] = 2;
  EXPECT_THROW(ExperimentConfig::from_json(j), Error);
}

TEST(Experiment, SingleSweepPointEqualsDirectRun) {
  const ExperimentConfig cfg = synthetic_config(SelectorKind::kKCentroid, 1);
  const auto rows = sweep_n(cfg, {1});
  ASSERT_EQ(rows.size(), 1u);
  const auto direct = run_experiment(cfg);
  EXPECT_EQ(rows[0].rank1, direct.report.top1);
  EXPECT_EQ(rows[0].map, direct.report.map);
  EXPECT_EQ(rows[0].total_prototypes, direct.prototypes.total_count());
}

TEST(Experiment, SweepWritesCsvAndPointDirectories) {
  const auto dir = tu::temp_dir("sweep");
  ExperimentConfig cfg = synthetic_config(SelectorKind::kAlphaFps, 3);
  cfg.output_dir = dir;
  const auto rows = sweep_alpha(cfg, {0.0, 1.0});
  ASSERT_EQ(rows.size(), 2u);
  std::ifstream in(dir / "sweep_alpha.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "alpha,rank1,map,total_prototypes");
  EXPECT_TRUE(std::filesystem::exists(dir / "alpha_0" / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "alpha_1" / "report.json"));
}

TEST(GroupEvaluate, SingleBucketEqualsOverall) {
  const ExperimentConfig cfg = synthetic_config(SelectorKind::kCentroid);
  const auto groups = group_evaluate(cfg, parse_buckets("1+"));
  ASSERT_EQ(groups.size(), 1u);
  const auto direct = run_experiment(cfg);
  ASSERT_TRUE(groups[0].map.has_value());
  EXPECT_NEAR(*groups[0].map, direct.report.map, 1e-12);
  EXPECT_EQ(groups[0].query_count, direct.report.query_count);
}

TEST(GroupEvaluate, EmptyBucketHasNoMap) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kCentroid);
  cfg.synthetic->min_instances = cfg.synthetic->max_instances = 5;
  const auto dir = tu::temp_dir("groups");
  cfg.output_dir = dir;
  const auto groups = group_evaluate(cfg, parse_buckets("1-10,11+"));
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[1].query_count, 0u);
  EXPECT_FALSE(groups[1].map.has_value());
  EXPECT_TRUE(std::filesystem::exists(dir / "group_eval.csv"));
}

TEST(GroupEvaluate, CountsSumToQueryTotal) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kInstance);
  cfg.synthetic->min_instances = 1;
  cfg.synthetic->max_instances = 12;
  const auto groups = group_evaluate(cfg, parse_buckets("1-3,4-6,7-9,10+"));
  std::size_t total = 0;
  for (const auto& g : groups) total += g.query_count;
  EXPECT_EQ(total, cfg.synthetic->n_classes * cfg.synthetic->queries_per_class);
}

TEST(Artifacts, ReloadBitExact) {
  const auto dir = tu::temp_dir("artifacts");
  ExperimentConfig cfg = synthetic_config(SelectorKind::kGcp, 2);
  cfg.gcp = small_gcp();
  cfg.output_dir = dir;
  const auto r = run_experiment(cfg);

  const PrototypeSet protos = read_prototypes(dir / "prototypes.json");
  EXPECT_EQ(protos.per_class, r.prototypes.per_class);
  EXPECT_EQ(protos.params_echo, r.prototypes.params_echo);
  EXPECT_EQ(protos.selector, SelectorKind::kGcp);

  const auto report = read_json_file(dir / "report.json");
  EXPECT_EQ(report.at("top1").get<double>(), r.report.top1);
  EXPECT_EQ(report.at("map").get<double>(), r.report.map);
  EXPECT_EQ(report.at("cmc").get<std::vector<double>>(), r.report.cmc);
  EXPECT_EQ(report.at("config"), read_json_file(dir / "config.json"));

  const GcpModel model = load_checkpoint(dir / "model.gcpm");
  EXPECT_EQ(model.parameters(), r.model->parameters());
  EXPECT_EQ(model.config(), r.model->config());

  const auto labels = read_json_file(dir / "labels.json");
  EXPECT_EQ(labels.at("classes").size(), cfg.synthetic->n_classes);
}

TEST(Artifacts, CheckpointDrivesTheSameSelection) {
  const auto dir = tu::temp_dir("ckpt_run");
  ExperimentConfig train_cfg = synthetic_config(SelectorKind::kGcp, 2);
  train_cfg.gcp = small_gcp();
  train_cfg.output_dir = dir;
  const auto trained = run_experiment(train_cfg);

  ExperimentConfig reuse = synthetic_config(SelectorKind::kGcp, 2);
  reuse.gcp_checkpoint = dir / "model.gcpm";
  const auto again = run_experiment(reuse);
  EXPECT_EQ(again.prototypes.per_class, trained.prototypes.per_class);
  expect_same_report(again.report, trained.report);
}

TEST(CameraFilter, RegeneratesPerClassCameraGroup) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kCentroid);
  cfg.protocol = Protocol::kCameraFilteredRegen;
  const Dataset data = load_dataset(cfg);
  const auto r = run_experiment(cfg, data);

  std::set<std::pair<ClassId, CameraId>> groups;
  for (const auto& q : data.queries.records()) groups.insert({q.class_id, q.camera_id});
  EXPECT_EQ(r.regenerated_groups, groups.size());

  // Oracle: each query's own class is represented by the mean of its
  // other-camera records; other classes keep their plain centroids.
  for (std::size_t qi = 0; qi < data.queries.size(); ++qi) {
    const auto& q = data.queries[qi];
    std::vector<std::pair<unsigned, std::vector<Vec>>> protos;
    for (ClassId c : data.gallery.class_ids()) {
      std::vector<std::size_t> kept;
      for (std::size_t i : data.gallery.class_indices(c)) {
        if (c != q.class_id || data.gallery[i].camera_id != q.camera_id) kept.push_back(i);
      }
      if (kept.empty()) kept = data.gallery.class_indices(c);
      Vec mean(data.gallery.dim(), 0.0);
      for (std::size_t i : kept) {
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += data.gallery[i].vector[j];
      }
      for (auto& v : mean) v /= static_cast<double>(kept.size());
      protos.push_back({c, {mean}});
    }
    std::vector<int> rel;
    for (const auto& item : oracle::brute_rank(q.vector, protos)) rel.push_back(item.cls == q.class_id);
    EXPECT_NEAR(r.report.per_query[qi].ap, oracle::brute_ap(rel), 1e-12) << q.id;
  }
}

TEST(CameraFilter, SameGroupQueriesShareGcpPrototypes) {
  ExperimentConfig cfg = synthetic_config(SelectorKind::kGcp, 2);
  cfg.gcp = small_gcp();
  cfg.protocol = Protocol::kCameraFilteredRegen;
  Dataset data = load_dataset(cfg);

  // Duplicate every query under a new id: the copy must score identically.
  std::vector<EmbeddingRecord> queries = data.queries.records();
  const std::size_t n = queries.size();
  for (std::size_t i = 0; i < n; ++i) {
    EmbeddingRecord copy = queries[i];
    copy.id += "_dup";
    queries.push_back(std::move(copy));
  }
  data.queries = EmbeddingSet(std::move(queries), data.gallery.labels());
  const auto r = run_experiment(cfg, data);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(r.report.per_query[i].ap, r.report.per_query[i + n].ap);
    EXPECT_EQ(r.report.per_query[i].first_hit, r.report.per_query[i + n].first_hit);
  }

  // The cached entry equals a direct regeneration for that group.
  const auto& q = data.queries[0];
  std::vector<std::pair<unsigned, std::vector<Vec>>> protos;
  for (const auto& [c, list] : r.prototypes.per_class) {
    protos.push_back({c, c == q.class_id ? gcp_class_prototypes(data.gallery, *r.model, c, 2, q.camera_id) : list});
  }
  std::vector<int> rel;
  for (const auto& item : oracle::brute_rank(q.vector, protos)) rel.push_back(item.cls == q.class_id);
  EXPECT_NEAR(r.report.per_query[0].ap, oracle::brute_ap(rel), 1e-12);
}

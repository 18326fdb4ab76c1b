#include "gcp/gcp_model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "gcp/error.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace gcp;
using gcp::tu::make_record;

namespace {

GcpConfig tiny_config() {
  GcpConfig cfg;
  cfg.dim = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.ffn_dim = 16;
  cfg.n_prototypes = 3;
  cfg.n_cameras = 2;
  cfg.dropout_rate = 0.2;
  cfg.margin = 3.0;
  cfg.seed = 11;
  return cfg;
}

void zero_camera_embeddings(GcpModel& model) {
  const auto& t = model.layout().tensor("camera_embeddings");
  std::fill_n(model.mutable_parameters().begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0.0);
}

// Two classes far apart along the first axis, several cameras.
EmbeddingSet separated_set(std::size_t dim, std::size_t per_class, std::size_t n_classes,
                           std::uint64_t seed, std::size_t n_cameras = 2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  std::vector<EmbeddingRecord> recs;
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      Vec v(dim);
      for (auto& x : v) x = normal(rng);
      v[c % dim] += 3.0;
      recs.push_back(make_record("c" + std::to_string(c) + "_" + std::to_string(i),
                                 static_cast<ClassId>(c), static_cast<CameraId>(i % n_cameras), v));
    }
  }
  return EmbeddingSet(std::move(recs));
}

double max_abs_diff(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

}  // namespace

TEST(GcpConfig, RejectsIndivisibleHeads) {
  GcpConfig cfg;
  cfg.dim = 10;
  cfg.n_heads = 4;
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kConfig);
  }
  cfg = GcpConfig{};
  cfg.dropout_rate = 1.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(GcpConfig, JsonRoundTripAndUnknownKeys) {
  GcpConfig cfg = tiny_config();
  cfg.lambda = 0.25;
  EXPECT_EQ(GcpConfig::from_json(cfg.to_json()), cfg);
  auto j = cfg.to_json();
  j["typo"] = 1;
  EXPECT_THROW(GcpConfig::from_json(j), Error);
}

TEST(GcpConfig, PaperScaleAccepted) {
  GcpConfig cfg;
  cfg.n_blocks = 6;
  cfg.ffn_dim = 512;
  cfg.dim = 64;
  EXPECT_NO_THROW(cfg.validate());
  GcpModel model(cfg);
  EXPECT_EQ(model.layout().blocks.size(), 6u);
}

TEST(GcpModelInit, HeadIsIdentityAndGroupsPresent) {
  GcpModel model(tiny_config());
  const auto& head = model.layout().tensor("head.w");
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_EQ(model.parameters()[head.offset + i * 8 + j], i == j ? 1.0 : 0.0);
    }
  }
  EXPECT_EQ(model.layout().total, model.parameters().size());
  EXPECT_EQ(model.layout().manifest.back().offset + model.layout().manifest.back().size(),
            model.layout().total);
  EXPECT_EQ(GcpModel(tiny_config()), model);
}

TEST(BuildMemory, ZeroCameraEmbeddingGivesRawVectors) {
  GcpModel model(tiny_config());
  zero_camera_embeddings(model);
  Vec a(8, 1.0), b(8, -2.0);
  EmbeddingSet set({make_record("a", 0, 0, a), make_record("b", 0, 1, b)});
  Memory mem = build_memory(set, model, 0);
  EXPECT_EQ(mem.tokens, (std::vector<Vec>{a, b}));
  EXPECT_EQ(mem.source_record_ids, (std::vector<std::string>{"a", "b"}));
}

TEST(BuildMemory, CameraEmbeddingAddedRowWise) {
  GcpModel model(tiny_config());
  zero_camera_embeddings(model);
  const auto& t = model.layout().tensor("camera_embeddings");
  for (std::size_t j = 0; j < 8; ++j) model.mutable_parameters()[t.offset + 8 + j] = 0.5;
  Vec v{1, 2, 3, 4, 5, 6, 7, 8};
  EmbeddingSet set({make_record("x", 0, 1, v)});
  Memory mem = build_memory(set, model, 0);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(mem.tokens[0][j], v[j] + 0.5);
}

TEST(BuildMemory, ExcludedCameraDropsItsRecords) {
  GcpModel model(tiny_config());
  EmbeddingSet set = separated_set(8, 5, 2, 1);
  Memory full = build_memory(set, model, 0);
  Memory filtered = build_memory(set, model, 0, CameraId{0});
  EXPECT_EQ(full.tokens.size(), 5u);
  EXPECT_EQ(filtered.tokens.size(), 2u);  // cameras 0,1,0,1,0
  EXPECT_FALSE(filtered.fallback_unfiltered);
  for (CameraId c : filtered.cameras) EXPECT_NE(c, 0u);
}

TEST(BuildMemory, FallsBackWhenFilterEmptiesClass) {
  GcpModel model(tiny_config());
  EmbeddingSet set({make_record("a", 0, 1, Vec(8, 0.0)), make_record("b", 1, 0, Vec(8, 1.0))});
  Memory mem = build_memory(set, model, 0, CameraId{1});
  EXPECT_TRUE(mem.fallback_unfiltered);
  EXPECT_EQ(mem.tokens.size(), 1u);
}

TEST(BuildMemory, Errors) {
  GcpModel model(tiny_config());
  EmbeddingSet set({make_record("a", 0, 5, Vec(8, 0.0))});
  try {
    build_memory(set, model, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kUnknownCamera);
  }
  EmbeddingSet ok({make_record("a", 0, 0, Vec(8, 0.0))});
  try {
    build_memory(ok, model, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kUnknownClass);
  }
  EXPECT_THROW(build_memory(ok, model, 0, CameraId{9}), Error);
}

TEST(Generate, DeterministicBitwise) {
  GcpModel model = tu::jittered_model(tiny_config(), 3);
  EmbeddingSet set = separated_set(8, 6, 2, 2);
  Memory mem = build_memory(set, model, 1);
  EXPECT_EQ(generate_prototypes(model, mem, 1), generate_prototypes(model, mem, 1));
  EXPECT_EQ(generate_prototypes(model, mem, 4), generate_prototypes(model, mem, 4));
}

TEST(Generate, MemoryPermutationInvariance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GcpModel model = tu::jittered_model(tiny_config(), seed);
    EmbeddingSet set = separated_set(8, 7, 2, seed + 10);
    Memory mem = build_memory(set, model, 0);
    std::vector<std::size_t> perm(mem.tokens.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vec> feats;
    std::vector<CameraId> cams;
    for (std::size_t i : perm) {
      feats.push_back(mem.features[i]);
      cams.push_back(mem.cameras[i]);
    }
    Memory permuted = memory_from_features(model, 0, feats, cams);
    EXPECT_LE(max_abs_diff(generate_prototypes(model, mem, 3), generate_prototypes(model, permuted, 3)),
              1e-9);
  }
}

TEST(Generate, CausalPrefixProperty) {
  GcpModel model = tu::jittered_model(tiny_config(), 4);
  EmbeddingSet set = separated_set(8, 4, 2, 3);
  Memory mem = build_memory(set, model, 0);
  const auto three = generate_prototypes(model, mem, 3);
  const auto five = generate_prototypes(model, mem, 5);
  EXPECT_EQ(generate_prototypes(model, mem, 1)[0], three[0]);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(three[t], five[t]);
}

TEST(Loss, TripletExamples) {
  const Vec a{0.0, 0.0};
  EXPECT_EQ(triplet_term(a, a, Vec{2.4, 0.0}, 1.2), 0.0);
  EXPECT_NEAR(triplet_term(a, Vec{0.5, 0.0}, Vec{0.0, 1.0}, 1.2), 0.7, 1e-15);
}

TEST(Loss, DuplicatePrototypesGiveFullMargin) {
  const std::vector<Vec> protos{{1.0, 2.0}, {1.0, 2.0}};
  EXPECT_EQ(diversity_term(protos, 1.2), 1.2);
  ClassLossInput c{0, {}, protos};
  const LossResult r = batch_loss({c}, 1.2, 1.0);
  EXPECT_EQ(r.reg, 1.2);
  EXPECT_EQ(r.triplet_count, 0u);
  EXPECT_EQ(r.value, 1.2);
}

TEST(Loss, HardestNegativeAndAveraging) {
  // Class 0 anchor at origin, prototype at 0.5; class 1 features at 1 and 3.
  ClassLossInput c0{0, {{0.0}}, {{0.5}}};
  ClassLossInput c1{1, {{1.0}, {3.0}}, {{2.0}}};
  const LossResult r = batch_loss({c0, c1}, 1.2, 0.0);
  // c0: 1.2 + 0.5 - 1 = 0.7. c1 anchors: 1.2 + 1 - 1 = 1.2 and 1.2 + 1 - 3 < 0.
  EXPECT_EQ(r.triplet_count, 3u);
  EXPECT_EQ(r.active_triplets, 2u);
  EXPECT_NEAR(r.triplet, (0.7 + 1.2) / 3.0, 1e-15);
}

TEST(Loss, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ClassLossInput> classes(3);
    for (std::size_t c = 0; c < 3; ++c) {
      classes[c].class_id = static_cast<ClassId>(c);
      for (int i = 0; i < 3; ++i) {
        classes[c].anchors.push_back({normal(rng), normal(rng)});
        classes[c].prototypes.push_back({normal(rng), normal(rng)});
      }
    }
    const LossResult r = batch_loss(classes, 1.2, 1.0);
    EXPECT_GE(r.value, 0.0);
    EXPECT_EQ(r.triplet == 0.0, r.active_triplets == 0);
  }
}

TEST(Loss, PrototypeGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ClassLossInput> classes(3);
  for (std::size_t c = 0; c < 3; ++c) {
    classes[c].class_id = static_cast<ClassId>(c);
    for (int i = 0; i < 4; ++i) {
      classes[c].anchors.push_back({normal(rng), normal(rng), normal(rng)});
      classes[c].prototypes.push_back({normal(rng), normal(rng), normal(rng)});
    }
  }
  const LossResult r = batch_loss(classes, 2.0, 0.7);
  const double eps = 1e-6;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t j = 0; j < 3; ++j) {
        auto up = classes, down = classes;
        up[c].prototypes[k][j] += eps;
        down[c].prototypes[k][j] -= eps;
        const double numeric =
            (batch_loss(up, 2.0, 0.7).value - batch_loss(down, 2.0, 0.7).value) / (2 * eps);
        EXPECT_LE(tu::relative_error(r.prototype_grads[c][k][j], numeric), 1e-6);
      }
    }
  }
}

TEST(GradientCheck, EveryParameterOfTinyDecoder) {
  GcpConfig cfg = tiny_config();
  cfg.margin = 8.0;  // wide enough that the diversity hinge is active too
  for (std::uint64_t draw = 0; draw < 2; ++draw) {
    GcpModel model = tu::jittered_model(cfg, 100 + draw);
    TrainingBatch batch = tu::random_batch(cfg, 3, 4, 3, 200 + draw);
    LossResult detail;
    batch_objective(model, batch, nullptr, &detail);
    ASSERT_GT(detail.reg, 0.0);
    ASSERT_GT(detail.active_triplets, 0u);
    std::vector<std::size_t> all(model.parameters().size());
    std::iota(all.begin(), all.end(), 0);
    const auto res = tu::check_gradient(model, batch, all);
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst;
    EXPECT_EQ(res.checked, model.parameters().size());
  }
}

TEST(GradientCheck, EveryGroupReceivesGradient) {
  const GcpConfig cfg = tiny_config();
  GcpModel model = tu::jittered_model(cfg, 7);
  std::vector<double> grad;
  batch_objective(model, tu::random_batch(cfg, 3, 4, 3, 8), &grad);
  for (const auto& t : model.layout().manifest) {
    double norm = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) norm += std::abs(grad[t.offset + i]);
    EXPECT_GT(norm, 0.0) << t.name;
  }
}

TEST(Sgd, StepOrder) {
  GcpConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.5;
  cfg.weight_decay = 0.01;
  std::vector<double> p{1.0}, v{2.0};
  sgd_step(p, v, {3.0}, cfg);
  // g = 3 + 0.01; v = 0.5*2 + 3.01 = 4.01; p = 1 - 0.401
  EXPECT_DOUBLE_EQ(v[0], 4.01);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.401);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  GcpConfig cfg = tiny_config();
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.batch_classes = 2;
  cfg.instances_per_class = 4;
  EmbeddingSet set = separated_set(8, 6, 4, 4);
  const TrainResult r = train(set, cfg);
  EXPECT_EQ(r.model, GcpModel(cfg));
  EXPECT_EQ(r.trace.epoch_loss.size(), 3u);
  EXPECT_EQ(r.trace.steps, 6u);
}

TEST(Train, LossDecreasesOnSeparatedClasses) {
  GcpConfig cfg = tiny_config();
  cfg.margin = 1.2;
  cfg.epochs = 20;
  cfg.batch_classes = 2;
  cfg.instances_per_class = 6;
  cfg.n_cameras = 2;
  EmbeddingSet set = separated_set(8, 12, 2, 5);
  const TrainResult r = train(set, cfg);
  ASSERT_EQ(r.trace.epoch_loss.size(), 20u);
  EXPECT_LT(r.trace.epoch_loss.back(), r.trace.epoch_loss.front());
  for (double v : r.model.parameters()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Train, BitDeterministicWithoutDropout) {
  GcpConfig cfg = tiny_config();
  cfg.dropout_rate = 0.0;
  cfg.epochs = 3;
  cfg.batch_classes = 3;
  cfg.instances_per_class = 4;
  EmbeddingSet set = separated_set(8, 5, 5, 6);
  const TrainResult a = train(set, cfg);
  const TrainResult b = train(set, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.trace.epoch_loss, b.trace.epoch_loss);
  cfg.dropout_rate = 0.2;
  EXPECT_EQ(train(set, cfg).model, train(set, cfg).model);
}

TEST(Train, ResumeContinuesFromInitialModel) {
  GcpConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_classes = 2;
  cfg.instances_per_class = 3;
  EmbeddingSet set = separated_set(8, 4, 2, 7);
  const TrainResult first = train(set, cfg);
  const TrainResult second = train(set, cfg, first.model);
  EXPECT_NE(first.model, second.model);
  GcpConfig other = cfg;
  other.dim = 16;
  other.n_heads = 2;
  EXPECT_THROW(train(set, cfg, GcpModel(other)), Error);
}

TEST(Train, SingletonClassesUseReplacement) {
  GcpConfig cfg = tiny_config();
  cfg.instances_per_class = 4;
  EmbeddingSet set({make_record("a", 0, 0, Vec(8, 0.0)), make_record("b", 1, 1, Vec(8, 1.0)),
                    make_record("c", 1, 0, Vec(8, 1.5))});
  const TrainingBatch batch = sample_batch(set, {0, 1}, cfg, 0);
  ASSERT_EQ(batch.classes.size(), 2u);
  EXPECT_EQ(batch.classes[0].anchors.size(), 4u);
  EXPECT_EQ(batch.classes[0].memory_features.size(), 1u);
  EXPECT_EQ(batch.classes[1].memory_features.size(), 2u);
}

TEST(Train, RejectsUnknownCamera) {
  GcpConfig cfg = tiny_config();
  EmbeddingSet set({make_record("a", 0, 4, Vec(8, 0.0)), make_record("b", 1, 0, Vec(8, 1.0))});
  try {
    train(set, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kUnknownCamera);
  }
}

TEST(SelectGcp, CountsPerClass) {
  GcpConfig cfg = tiny_config();
  GcpModel model(cfg);
  EmbeddingSet set = separated_set(8, 4, 5, 8);
  const PrototypeSet protos = select_gcp(set, model, 3);
  EXPECT_EQ(protos.total_count(), 15u);
  EXPECT_EQ(protos.selector, SelectorKind::kGcp);
  EXPECT_EQ(protos.params_echo.at("total_prototypes"), "15");
}

TEST(SelectGcp, CountCappedByMemorySize) {
  GcpModel model(tiny_config());
  EmbeddingSet set({make_record("a", 0, 0, Vec(8, 0.0)), make_record("b", 1, 0, Vec(8, 1.0)),
                    make_record("c", 1, 1, Vec(8, 2.0))});
  const PrototypeSet protos = select_gcp(set, model, 3);
  EXPECT_EQ(protos.per_class.at(0).size(), 1u);
  EXPECT_EQ(protos.per_class.at(1).size(), 2u);
  EXPECT_EQ(protos.params_echo.at("reduced_classes"), "0:1,1:2");
}

TEST(SelectGcp, DeterministicAndParallelMatchesSerial) {
  GcpModel model = tu::jittered_model(tiny_config(), 9);
  EmbeddingSet set = separated_set(8, 5, 6, 9);
  const PrototypeSet a = select_gcp(set, model, 3, {}, Execution::kParallel);
  EXPECT_EQ(a, select_gcp(set, model, 3, {}, Execution::kParallel));
  EXPECT_EQ(a, select_gcp(set, model, 3, {}, Execution::kSerial));
}

TEST(SelectGcp, CameraFilterChangesQueryClassOnly) {
  GcpModel model = tu::jittered_model(tiny_config(), 10);
  EmbeddingSet set = separated_set(8, 6, 3, 10);
  const PrototypeSet plain = select_gcp(set, model, 2);
  const PrototypeSet filtered = select_gcp(set, model, 2, {{1, 0}});
  EXPECT_NE(plain.per_class.at(1), filtered.per_class.at(1));
  EXPECT_EQ(plain.per_class.at(0), filtered.per_class.at(0));
  EXPECT_EQ(plain.per_class.at(2), filtered.per_class.at(2));
}

TEST(SelectGcp, FallbackFlagged) {
  GcpModel model(tiny_config());
  EmbeddingSet set({make_record("a", 0, 1, Vec(8, 0.0)), make_record("b", 1, 0, Vec(8, 1.0))});
  const PrototypeSet protos = select_gcp(set, model, 2, {{0, 1}});
  EXPECT_EQ(protos.params_echo.at("fallback_unfiltered_classes"), "0");
  EXPECT_EQ(protos.per_class.at(0).size(), 1u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = tu::temp_dir("ckpt");
  GcpModel model = tu::jittered_model(tiny_config(), 12);
  save_checkpoint(model, dir / "m.gcpm");
  const GcpModel loaded = load_checkpoint(dir / "m.gcpm");
  EXPECT_EQ(loaded, model);
  EXPECT_EQ(loaded.layout().manifest, model.layout().manifest);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  const auto dir = tu::temp_dir("ckpt_bad");
  {
    std::ofstream out(dir / "bad.gcpm", std::ios::binary);
    out << "NOPE0000";
  }
  try {
    load_checkpoint(dir / "bad.gcpm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kFormat);
  }
  GcpModel model(tiny_config());
  save_checkpoint(model, dir / "m.gcpm");
  const auto size = std::filesystem::file_size(dir / "m.gcpm");
  std::filesystem::resize_file(dir / "m.gcpm", size - 9);
  EXPECT_THROW(load_checkpoint(dir / "m.gcpm"), Error);
  EXPECT_THROW(load_checkpoint(dir / "missing.gcpm"), Error);
}

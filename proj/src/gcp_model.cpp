#include "gcp/gcp_model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>

#include "decoder.hpp"
#include "gcp/error.hpp"

namespace gcp {

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'G', 'C', 'P', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorCategory::kConfig, msg);
}

}  // namespace

void GcpConfig::validate() const {
  require(dim > 0, "dim must be positive");
  require(n_blocks > 0, "n_blocks must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(dim % n_heads == 0, "dim must be divisible by n_heads");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate must be in [0,1)");
  require(n_prototypes > 0, "n_prototypes must be positive");
  require(margin > 0.0, "margin must be positive");
  require(lambda >= 0.0, "lambda must be non-negative");
  require(lr >= 0.0 && std::isfinite(lr), "lr must be a finite non-negative value");
  require(std::isfinite(momentum) && momentum >= 0.0 && momentum < 1.0, "momentum must be in [0,1)");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(batch_classes > 0, "batch_classes must be positive");
  require(instances_per_class > 0, "instances_per_class must be positive");
  require(epochs > 0, "epochs must be positive");
  require(n_cameras > 0, "n_cameras must be positive");
}

nlohmann::json GcpConfig::to_json() const {
  return {{"dim", dim},
          {"n_blocks", n_blocks},
          {"n_heads", n_heads},
          {"ffn_dim", ffn_dim},
          {"dropout_rate", dropout_rate},
          {"n_prototypes", n_prototypes},
          {"margin", margin},
          {"lambda", lambda},
          {"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"batch_classes", batch_classes},
          {"instances_per_class", instances_per_class},
          {"epochs", epochs},
          {"n_cameras", n_cameras},
          {"seed", seed}};
}

GcpConfig GcpConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCategory::kConfig, "gcp config must be an object");
  GcpConfig cfg;
  static const std::array<const char*, 16> known = {
      "dim",      "n_blocks",     "n_heads",      "ffn_dim",       "dropout_rate", "n_prototypes",
      "margin",   "lambda",       "lr",           "momentum",      "weight_decay", "batch_classes",
      "instances_per_class",      "epochs",       "n_cameras",     "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) ==
        known.end()) {
      throw Error(ErrorCategory::kConfig, "unknown gcp config key '" + key + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("dim", cfg.dim);
    get("n_blocks", cfg.n_blocks);
    get("n_heads", cfg.n_heads);
    get("ffn_dim", cfg.ffn_dim);
    get("dropout_rate", cfg.dropout_rate);
    get("n_prototypes", cfg.n_prototypes);
    get("margin", cfg.margin);
    get("lambda", cfg.lambda);
    get("lr", cfg.lr);
    get("momentum", cfg.momentum);
    get("weight_decay", cfg.weight_decay);
    get("batch_classes", cfg.batch_classes);
    get("instances_per_class", cfg.instances_per_class);
    get("epochs", cfg.epochs);
    get("n_cameras", cfg.n_cameras);
    get("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kConfig, std::string("gcp config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ModelLayout ModelLayout::build(const GcpConfig& cfg) {
  ModelLayout layout;
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    layout.manifest.push_back({name, rows, cols, layout.total});
    layout.total += rows * cols;
    return layout.manifest.back().offset;
  };
  const std::size_t d = cfg.dim;
  layout.camera_embeddings = add("camera_embeddings", cfg.n_cameras, d);
  layout.sos = add("sos", 1, d);
  auto attention = [&](const std::string& prefix) {
    Attention a{};
    a.wq = add(prefix + ".wq", d, d);
    a.bq = add(prefix + ".bq", 1, d);
    a.wk = add(prefix + ".wk", d, d);
    a.bk = add(prefix + ".bk", 1, d);
    a.wv = add(prefix + ".wv", d, d);
    a.bv = add(prefix + ".bv", 1, d);
    a.wo = add(prefix + ".wo", d, d);
    a.bo = add(prefix + ".bo", 1, d);
    return a;
  };
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    Block blk{};
    blk.ln1_gain = add(p + ".ln1.gain", 1, d);
    blk.ln1_bias = add(p + ".ln1.bias", 1, d);
    blk.self_attn = attention(p + ".self");
    blk.ln2_gain = add(p + ".ln2.gain", 1, d);
    blk.ln2_bias = add(p + ".ln2.bias", 1, d);
    blk.cross_attn = attention(p + ".cross");
    blk.ln3_gain = add(p + ".ln3.gain", 1, d);
    blk.ln3_bias = add(p + ".ln3.bias", 1, d);
    blk.ffn_w1 = add(p + ".ffn.w1", d, cfg.ffn_dim);
    blk.ffn_b1 = add(p + ".ffn.b1", 1, cfg.ffn_dim);
    blk.ffn_w2 = add(p + ".ffn.w2", cfg.ffn_dim, d);
    blk.ffn_b2 = add(p + ".ffn.b2", 1, d);
    layout.blocks.push_back(blk);
  }
  layout.head_w = add("head.w", d, d);
  layout.head_b = add("head.b", 1, d);
  return layout;
}

const TensorInfo& ModelLayout::tensor(const std::string& name) const {
  for (const auto& t : manifest) {
    if (t.name == name) return t;
  }
  throw Error(ErrorCategory::kConfig, "no tensor named '" + name + "'");
}

GcpModel::GcpModel(const GcpConfig& cfg) : config_(cfg) {
  cfg.validate();
  layout_ = ModelLayout::build(cfg);
  params_.assign(layout_.total, 0.0);
  std::mt19937_64 rng(detail::mix_key(cfg.seed, detail::kInitStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill_normal = [&](const TensorInfo& t, double sd) {
    for (std::size_t i = 0; i < t.size(); ++i) params_[t.offset + i] = sd * normal(rng);
  };
  const std::string last_block = "block" + std::to_string(cfg.n_blocks - 1);
  for (const auto& t : layout_.manifest) {
    const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".b") ||
                         t.name.ends_with(".bq") || t.name.ends_with(".bk") ||
                         t.name.ends_with(".bv") || t.name.ends_with(".bo") ||
                         t.name.ends_with(".b1") || t.name.ends_with(".b2");
    if (t.name == "camera_embeddings" || t.name == "sos") {
      fill_normal(t, 0.02);
    } else if (t.name.ends_with(".gain")) {
      std::fill_n(params_.begin() + t.offset, t.size(), 1.0);
    } else if (is_bias) {
      // zero
    } else if (t.name == "head.w" || t.name == last_block + ".cross.wv" ||
               t.name == last_block + ".cross.wo") {
      // Identity path from memory to output: the untrained decoder emits an
      // attention-weighted memory mean rather than noise.
      for (std::size_t i = 0; i < t.rows; ++i) params_[t.offset + i * t.cols + i] = 1.0;
    } else if (t.name.ends_with(".wo") || t.name.ends_with(".ffn.w2")) {
      // Remaining residual branches start closed.
    } else {
      fill_normal(t, std::sqrt(2.0 / static_cast<double>(t.rows + t.cols)));
    }
  }
}

std::span<const double> GcpModel::camera_embedding(CameraId cam) const {
  if (cam >= config_.n_cameras) {
    throw Error(ErrorCategory::kUnknownCamera,
                "camera " + std::to_string(cam) + " >= n_cameras " +
                    std::to_string(config_.n_cameras));
  }
  return {params_.data() + layout_.camera_embeddings + cam * config_.dim, config_.dim};
}

std::span<const double> GcpModel::sos_token() const {
  return {params_.data() + layout_.sos, config_.dim};
}

Memory memory_from_features(const GcpModel& model, ClassId class_id, std::vector<Vec> features,
                            std::vector<CameraId> cameras) {
  if (features.size() != cameras.size()) {
    throw Error(ErrorCategory::kDimensionMismatch, "features and cameras differ in length");
  }
  Memory mem;
  mem.class_id = class_id;
  mem.tokens.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != model.config().dim) {
      throw Error(ErrorCategory::kDimensionMismatch,
                  "feature dimension " + std::to_string(features[i].size()) +
                      " does not match model dim " + std::to_string(model.config().dim));
    }
    const auto psi = model.camera_embedding(cameras[i]);
    Vec token = features[i];
    for (std::size_t j = 0; j < token.size(); ++j) token[j] += psi[j];
    mem.tokens.push_back(std::move(token));
  }
  mem.features = std::move(features);
  mem.cameras = std::move(cameras);
  return mem;
}

Memory build_memory(const EmbeddingSet& set, const GcpModel& model, ClassId class_id,
                    std::optional<CameraId> excluded_camera) {
  if (excluded_camera) (void)model.camera_embedding(*excluded_camera);
  const auto& indices = set.class_indices(class_id);
  std::vector<std::size_t> kept;
  for (std::size_t i : indices) {
    if (!excluded_camera || set[i].camera_id != *excluded_camera) kept.push_back(i);
  }
  const bool fallback = kept.empty();
  if (fallback) kept = indices;

  std::vector<Vec> features;
  std::vector<CameraId> cameras;
  std::vector<std::string> ids;
  for (std::size_t i : kept) {
    features.push_back(set[i].vector);
    cameras.push_back(set[i].camera_id);
    ids.push_back(set[i].id);
  }
  Memory mem = memory_from_features(model, class_id, std::move(features), std::move(cameras));
  mem.source_record_ids = std::move(ids);
  mem.fallback_unfiltered = fallback;
  return mem;
}

std::vector<Vec> generate_prototypes(const GcpModel& model, const Memory& memory, std::size_t n) {
  const std::size_t d = model.config().dim;
  const detail::Mat mem = detail::rows_to_mat(memory.tokens, d);
  const double* params = model.parameters().data();
  const auto& layout = model.layout();
  std::vector<Vec> out;
  out.reserve(n);
  detail::Mat input(1, d);
  const auto sos = model.sos_token();
  std::copy(sos.begin(), sos.end(), input.row(0));
  for (std::size_t t = 0; t < n; ++t) {
    const detail::Mat y = detail::decoder_forward(model, input, mem, {}, nullptr);
    const double* last = y.row(y.rows - 1);
    Vec p(params + layout.head_b, params + layout.head_b + d);
    for (std::size_t k = 0; k < d; ++k) {
      const double* wr = params + layout.head_w + k * d;
      for (std::size_t o = 0; o < d; ++o) p[o] += last[k] * wr[o];
    }
    detail::Mat next(input.rows + 1, d);
    std::copy(input.data.begin(), input.data.end(), next.data.begin());
    std::copy(p.begin(), p.end(), next.row(input.rows));
    input = std::move(next);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Vec> gcp_class_prototypes(const EmbeddingSet& set, const GcpModel& model,
                                      ClassId class_id, std::size_t n,
                                      std::optional<CameraId> excluded_camera, bool* fallback) {
  const Memory mem = build_memory(set, model, class_id, excluded_camera);
  if (fallback) *fallback = mem.fallback_unfiltered;
  return generate_prototypes(model, mem, std::min(n, mem.tokens.size()));
}

PrototypeSet select_gcp(const EmbeddingSet& set, const GcpModel& model, std::size_t n,
                        const std::map<ClassId, CameraId>& query_camera_by_class, Execution exec) {
  if (n == 0) throw Error(ErrorCategory::kConfig, "n_prototypes must be >= 1");
  if (set.dim() != model.config().dim) {
    throw Error(ErrorCategory::kDimensionMismatch,
                "set dimension " + std::to_string(set.dim()) + " does not match model dim " +
                    std::to_string(model.config().dim));
  }
  const auto classes = set.class_ids();
  std::vector<std::vector<Vec>> slots(classes.size());
  std::vector<char> fallbacks(classes.size(), 0);
  std::vector<std::optional<Error>> errors(classes.size());
  auto run = [&](std::size_t i) {
    try {
      std::optional<CameraId> excluded;
      if (auto it = query_camera_by_class.find(classes[i]); it != query_camera_by_class.end()) {
        excluded = it->second;
      }
      bool fb = false;
      slots[i] = gcp_class_prototypes(set, model, classes[i], n, excluded, &fb);
      fallbacks[i] = fb;
    } catch (const Error& e) {
      errors[i] = e;
    }
  };
  const auto count = static_cast<std::ptrdiff_t>(classes.size());
  if (exec == Execution::kParallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) run(static_cast<std::size_t>(i));
  } else {
    for (std::ptrdiff_t i = 0; i < count; ++i) run(static_cast<std::size_t>(i));
  }
  for (const auto& e : errors) {
    if (e) throw *e;
  }

  PrototypeSet out;
  out.selector = SelectorKind::kGcp;
  out.dim = set.dim();
  std::string reduced;
  std::string fallback_classes;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (slots[i].size() < n) {
      reduced += (reduced.empty() ? "" : ",") + std::to_string(classes[i]) + ":" +
                 std::to_string(slots[i].size());
    }
    if (fallbacks[i]) {
      fallback_classes += (fallback_classes.empty() ? "" : ",") + std::to_string(classes[i]);
    }
    out.per_class[classes[i]] = std::move(slots[i]);
  }
  out.params_echo["method"] = "gcp";
  out.params_echo["n"] = std::to_string(n);
  out.params_echo["count_rule"] = "min(n,memory_size)";
  out.params_echo["total_prototypes"] = std::to_string(out.total_count());
  out.params_echo["reduced_classes"] = reduced;
  out.params_echo["fallback_unfiltered_classes"] = fallback_classes;
  out.params_echo["camera_filtered_classes"] = std::to_string(query_camera_by_class.size());
  return out;
}

namespace {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error(ErrorCategory::kFormat, path.string() + ": truncated checkpoint");
  return value;
}

std::string read_string(std::istream& in, const std::filesystem::path& path) {
  const auto len = read_le<std::uint32_t>(in, path);
  if (len > (1u << 24)) throw Error(ErrorCategory::kFormat, path.string() + ": bad string length");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw Error(ErrorCategory::kFormat, path.string() + ": truncated checkpoint");
  return s;
}

void write_string(std::ostream& out, const std::string& s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

void save_checkpoint(const GcpModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_string(out, model.config().to_json().dump());
  const auto& manifest = model.layout().manifest;
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  for (const auto& t : manifest) {
    write_string(out, t.name);
    write_le<std::uint64_t>(out, t.rows);
    write_le<std::uint64_t>(out, t.cols);
    write_le<std::uint64_t>(out, t.offset);
  }
  write_le<std::uint64_t>(out, model.parameters().size());
  for (double v : model.parameters()) write_le<double>(out, v);
  if (!out) throw Error(ErrorCategory::kIo, "failed writing " + path.string());
}

GcpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::kIo, "cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) {
    throw Error(ErrorCategory::kFormat, path.string() + ": bad magic, not a GCPM checkpoint");
  }
  const auto version = read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCategory::kFormat,
                path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  GcpConfig cfg;
  try {
    cfg = GcpConfig::from_json(nlohmann::json::parse(read_string(in, path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kFormat, path.string() + ": bad config block: " + e.what());
  }
  GcpModel model;
  model.config_ = cfg;
  model.layout_ = ModelLayout::build(cfg);
  const auto count = read_le<std::uint32_t>(in, path);
  if (count != model.layout_.manifest.size()) {
    throw Error(ErrorCategory::kFormat, path.string() + ": tensor count does not match config");
  }
  for (const auto& expected : model.layout_.manifest) {
    TensorInfo t;
    t.name = read_string(in, path);
    t.rows = read_le<std::uint64_t>(in, path);
    t.cols = read_le<std::uint64_t>(in, path);
    t.offset = read_le<std::uint64_t>(in, path);
    if (!(t == expected)) {
      throw Error(ErrorCategory::kFormat,
                  path.string() + ": tensor '" + t.name + "' does not match config shape");
    }
  }
  const auto total = read_le<std::uint64_t>(in, path);
  if (total != model.layout_.total) {
    throw Error(ErrorCategory::kFormat, path.string() + ": parameter count mismatch");
  }
  model.params_.resize(total);
  for (auto& v : model.params_) {
    v = read_le<double>(in, path);
    if (!std::isfinite(v)) throw Error(ErrorCategory::kNonFinite, path.string() + ": non-finite parameter");
  }
  return model;
}

}  // namespace gcp

#include "gcp/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "gcp/error.hpp"

namespace gcp {

namespace {

void config_error(const std::string& msg) { throw Error(ErrorCategory::kConfig, msg); }

std::string ap_mode_name(ApMode m) { return m == ApMode::kPerClass ? "per_class" : "per_prototype"; }

ApMode parse_ap_mode(const std::string& s) {
  if (s == "per_prototype") return ApMode::kPerPrototype;
  if (s == "per_class") return ApMode::kPerClass;
  throw Error(ErrorCategory::kConfig, "unknown ap_mode '" + s + "'");
}

std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::kN: return "n";
    case SweepAxis::kAlpha: return "alpha";
    case SweepAxis::kNone: break;
  }
  return "none";
}

SweepAxis parse_axis(const std::string& s) {
  if (s == "none") return SweepAxis::kNone;
  if (s == "n") return SweepAxis::kN;
  if (s == "alpha") return SweepAxis::kAlpha;
  throw Error(ErrorCategory::kConfig, "unknown sweep axis '" + s + "'");
}

// Copies of the config with the experiment seed pushed into every component.
SelectorConfig resolved_selector(const ExperimentConfig& cfg) {
  SelectorConfig s = cfg.selector;
  s.seed = cfg.seed;
  return s;
}

GcpConfig resolved_gcp(const ExperimentConfig& cfg, const Dataset* data) {
  GcpConfig g = cfg.gcp.value_or(GcpConfig{});
  g.seed = cfg.seed;
  g.n_prototypes = cfg.selector.n_prototypes;
  if (data) {
    g.dim = data->gallery.dim();
    g.n_cameras = std::max({g.n_cameras, data->gallery.camera_count(), data->queries.camera_count()});
  }
  return g;
}

std::size_t whole(double v, const char* what) {
  if (!(v >= 1.0) || v != std::floor(v)) {
    throw Error(ErrorCategory::kConfig, std::string(what) + " values must be positive integers");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string protocol_name(Protocol p) {
  return p == Protocol::kCameraFilteredRegen ? "camera_filtered_regen" : "plain";
}

Protocol parse_protocol(const std::string& name) {
  if (name == "plain") return Protocol::kPlain;
  if (name == "camera_filtered_regen" || name == "camera-filter") return Protocol::kCameraFilteredRegen;
  throw Error(ErrorCategory::kConfig, "unknown protocol '" + name + "'");
}

void ExperimentConfig::validate() const {
  const bool files = gallery_path.has_value() || query_path.has_value();
  if (files && synthetic) config_error("dataset: give either files or a synthetic spec, not both");
  if (!files && !synthetic) config_error("dataset: no gallery/queries and no synthetic spec");
  if (files && (!gallery_path || !query_path)) config_error("dataset: gallery and queries must both be set");
  if (synthetic) synthetic->validate();
  selector.validate();
  if (selector.method == SelectorKind::kGcp) {
    if (!gcp && !gcp_checkpoint) config_error("selector gcp needs a gcp config or gcp_checkpoint");
    if (gcp) gcp->validate();
  }
  if (sweep_axis != SweepAxis::kNone && sweep_values.empty()) config_error("sweep values are empty");
  for (double v : sweep_values) {
    if (sweep_axis == SweepAxis::kN) whole(v, "sweep n");
    if (sweep_axis == SweepAxis::kAlpha && !(v >= 0.0 && v <= 1.0)) config_error("sweep alpha values must be in [0,1]");
  }
  if (sweep_axis == SweepAxis::kAlpha && selector.method != SelectorKind::kAlphaFps) {
    config_error("alpha sweep requires the alphafps selector");
  }
  if (max_rank == 0) config_error("max_rank must be positive");
  parse_buckets(buckets);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["version"] = kVersion;
  nlohmann::json ds = nlohmann::json::object();
  if (gallery_path) ds["gallery"] = gallery_path->string();
  if (query_path) ds["queries"] = query_path->string();
  if (synthetic) ds["synthetic"] = synthetic->to_json();
  j["dataset"] = ds;
  j["selector"] = {{"method", selector_name(selector.method)},
                   {"n", selector.n_prototypes},
                   {"alpha", selector.alpha},
                   {"kmeans_max_iters", selector.kmeans_max_iters},
                   {"kmeans_tol", selector.kmeans_tol}};
  if (gcp) j["gcp"] = gcp->to_json();
  if (gcp_checkpoint) j["gcp_checkpoint"] = gcp_checkpoint->string();
  j["protocol"] = protocol_name(protocol);
  j["sweep"] = {{"axis", axis_name(sweep_axis)}, {"values", sweep_values}};
  j["buckets"] = buckets;
  j["max_rank"] = max_rank;
  j["ap_mode"] = ap_mode_name(ap_mode);
  j["output_dir"] = output_dir.string();
  j["seed"] = seed;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) config_error("experiment config must be a JSON object");
  static const std::vector<std::string> known = {
      "version", "dataset", "selector", "gcp", "gcp_checkpoint", "protocol", "sweep",
      "buckets", "max_rank", "ap_mode", "output_dir", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      config_error("unknown config key '" + key + "'");
    }
  }
  ExperimentConfig cfg;
  try {
    const int version = j.value("version", kVersion);
    if (version != kVersion) config_error("unsupported config version " + std::to_string(version));
    if (j.contains("dataset")) {
      const auto& ds = j.at("dataset");
      if (ds.contains("gallery")) cfg.gallery_path = ds.at("gallery").get<std::string>();
      if (ds.contains("queries")) cfg.query_path = ds.at("queries").get<std::string>();
      if (ds.contains("synthetic")) cfg.synthetic = SyntheticSpec::from_json(ds.at("synthetic"));
    }
    if (j.contains("selector")) {
      const auto& s = j.at("selector");
      if (s.contains("method")) cfg.selector.method = parse_selector(s.at("method").get<std::string>());
      cfg.selector.n_prototypes = s.value("n", cfg.selector.n_prototypes);
      cfg.selector.alpha = s.value("alpha", cfg.selector.alpha);
      cfg.selector.kmeans_max_iters = s.value("kmeans_max_iters", cfg.selector.kmeans_max_iters);
      cfg.selector.kmeans_tol = s.value("kmeans_tol", cfg.selector.kmeans_tol);
    }
    if (j.contains("gcp")) cfg.gcp = GcpConfig::from_json(j.at("gcp"));
    if (j.contains("gcp_checkpoint")) cfg.gcp_checkpoint = j.at("gcp_checkpoint").get<std::string>();
    if (j.contains("protocol")) cfg.protocol = parse_protocol(j.at("protocol").get<std::string>());
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      cfg.sweep_axis = parse_axis(s.value("axis", std::string("none")));
      cfg.sweep_values = s.value("values", std::vector<double>{});
    }
    cfg.buckets = j.value("buckets", cfg.buckets);
    cfg.max_rank = j.value("max_rank", cfg.max_rank);
    if (j.contains("ap_mode")) cfg.ap_mode = parse_ap_mode(j.at("ap_mode").get<std::string>());
    cfg.output_dir = j.value("output_dir", std::string());
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(read_json_file(path));
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCategory::kFormat, path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.synthetic) {
    SyntheticSpec spec = *cfg.synthetic;
    spec.seed = cfg.seed;
    auto data = generate_synthetic(spec);
    return {std::move(data.gallery), std::move(data.queries)};
  }
  LabelMap labels;
  EmbeddingSet gallery = load_embedding_set(*cfg.gallery_path, format_from_extension(*cfg.gallery_path), labels);
  EmbeddingSet queries = load_embedding_set(*cfg.query_path, format_from_extension(*cfg.query_path), labels);
  if (gallery.dim() != queries.dim()) {
    throw Error(ErrorCategory::kDimensionMismatch,
                "gallery dimension " + std::to_string(gallery.dim()) + " differs from query dimension " +
                    std::to_string(queries.dim()));
  }
  // Re-wrap so both sets carry the complete label map.
  return {EmbeddingSet(gallery.records(), labels), EmbeddingSet(queries.records(), labels)};
}

nlohmann::json prototypes_to_json(const PrototypeSet& protos) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [c, list] : protos.per_class) classes.push_back({{"class", c}, {"prototypes", list}});
  return {{"selector", selector_name(protos.selector)},
          {"dim", protos.dim},
          {"params", protos.params_echo},
          {"classes", classes}};
}

PrototypeSet prototypes_from_json(const nlohmann::json& j) {
  PrototypeSet out;
  try {
    out.selector = parse_selector(j.at("selector").get<std::string>());
    out.dim = j.at("dim").get<std::size_t>();
    out.params_echo = j.value("params", std::map<std::string, std::string>{});
    for (const auto& c : j.at("classes")) {
      auto list = c.at("prototypes").get<std::vector<Vec>>();
      for (const auto& p : list) {
        if (p.size() != out.dim) throw Error(ErrorCategory::kDimensionMismatch, "prototype of wrong dimension");
      }
      out.per_class[c.at("class").get<ClassId>()] = std::move(list);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kFormat, std::string("prototype file: ") + e.what());
  }
  return out;
}

void write_prototypes(const PrototypeSet& protos, const std::filesystem::path& path) {
  write_json_file(prototypes_to_json(protos), path);
}

PrototypeSet read_prototypes(const std::filesystem::path& path) {
  return prototypes_from_json(read_json_file(path));
}

void write_labels(const LabelMap& labels, const std::filesystem::path& path) {
  write_json_file({{"classes", labels.class_labels()}, {"cameras", labels.camera_labels()}}, path);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset data = load_dataset(cfg);
  return run_experiment(cfg, data);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& data, const GcpModel* model) {
  cfg.validate();
  const SelectorConfig sel = resolved_selector(cfg);
  const bool is_gcp = sel.method == SelectorKind::kGcp;
  const auto buckets = parse_buckets(cfg.buckets);
  const EmbeddingSet& gallery = data.gallery;

  ExperimentResult result;
  bool trained_here = false;
  if (is_gcp) {
    if (model) {
      result.model = *model;
    } else if (cfg.gcp_checkpoint) {
      result.model = load_checkpoint(*cfg.gcp_checkpoint);
    } else {
      result.model = train(gallery, resolved_gcp(cfg, &data)).model;
      trained_here = true;
    }
    if (result.model->config().dim != gallery.dim()) {
      throw Error(ErrorCategory::kDimensionMismatch, "model dim does not match the gallery");
    }
    result.prototypes = select_gcp(gallery, *result.model, sel.n_prototypes);
  } else {
    result.prototypes = select_prototypes(gallery, sel);
  }

  // Fig. 5 protocol: one cache entry per distinct (class, camera) among queries.
  std::map<std::pair<ClassId, CameraId>, std::vector<Vec>> cache;
  std::vector<std::string> fallbacks;
  if (cfg.protocol == Protocol::kCameraFilteredRegen) {
    for (const auto& q : data.queries.records()) {
      if (gallery.has_class(q.class_id)) cache[{q.class_id, q.camera_id}];
    }
    std::vector<std::pair<ClassId, CameraId>> keys;
    for (const auto& [k, _] : cache) keys.push_back(k);
    std::vector<std::vector<Vec>> slots(keys.size());
    std::vector<char> fell_back(keys.size(), 0);
    std::vector<std::optional<Error>> errors(keys.size());
    const auto count = static_cast<std::ptrdiff_t>(keys.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
      const auto [c, cam] = keys[static_cast<std::size_t>(i)];
      try {
        if (is_gcp) {
          bool fb = false;
          slots[i] = gcp_class_prototypes(gallery, *result.model, c, sel.n_prototypes, cam, &fb);
          fell_back[i] = fb;
        } else {
          std::vector<std::size_t> kept;
          for (std::size_t r : gallery.class_indices(c)) {
            if (gallery[r].camera_id != cam) kept.push_back(r);
          }
          if (kept.empty()) {
            kept = gallery.class_indices(c);
            fell_back[i] = 1;
          }
          const auto pts = point_refs(gallery, kept);
          slots[i] = select_for_class(pts, sel);
        }
      } catch (const Error& e) {
        errors[i] = e;
      }
    }
    for (const auto& e : errors) {
      if (e) throw *e;
    }
    for (std::size_t i = 0; i < keys.size(); ++i) {
      cache[keys[i]] = std::move(slots[i]);
      if (fell_back[i]) {
        fallbacks.push_back(std::to_string(keys[i].first) + ":" + std::to_string(keys[i].second));
      }
    }
    result.regenerated_groups = keys.size();
  }

  EvalOptions opts;
  opts.max_rank = cfg.max_rank;
  opts.ap_mode = cfg.ap_mode;
  opts.buckets = buckets;
  for (ClassId c : gallery.class_ids()) opts.gallery_class_sizes[c] = gallery.class_size(c);
  opts.keep_per_query = true;

  const PrototypeSet& base = result.prototypes;
  if (cfg.protocol == Protocol::kCameraFilteredRegen) {
    const PrototypeProvider provider = [&](const EmbeddingRecord& q) {
      PrototypeView view{&base, std::nullopt, nullptr};
      if (auto it = cache.find({q.class_id, q.camera_id}); it != cache.end()) {
        view.override_class = q.class_id;
        view.override_prototypes = &it->second;
      }
      return view;
    };
    result.report = evaluate(data.queries, provider, opts);
  } else {
    result.report = evaluate(data.queries, base, opts);
  }

  nlohmann::json echo = cfg.to_json();
  echo["max_rank"] = cfg.max_rank;
  echo["ap_mode"] = ap_mode_name(cfg.ap_mode);
  if (is_gcp) echo["gcp_resolved"] = result.model->config().to_json();
  if (cfg.protocol == Protocol::kCameraFilteredRegen) {
    echo["regenerated_groups"] = result.regenerated_groups;
    echo["camera_filter_fallbacks"] = fallbacks;
  }
  result.report.config_echo = echo;

  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    write_report_json(result.report, cfg.output_dir / "report.json");
    write_report_csv(result.report, cfg.output_dir / "report.csv");
    write_prototypes(result.prototypes, cfg.output_dir / "prototypes.json");
    write_json_file(echo, cfg.output_dir / "config.json");
    write_labels(gallery.labels(), cfg.output_dir / "labels.json");
    if (trained_here) save_checkpoint(*result.model, cfg.output_dir / "model.gcpm");
  }
  return result;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& axis,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::kIo, "cannot write " + path.string());
  out.precision(17);
  out << axis << ",rank1,map,total_prototypes\n";
  for (const auto& r : rows) {
    out << r.value << ',' << r.rank1 << ',' << r.map << ',' << r.total_prototypes << '\n';
  }
}

namespace {

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::vector<double>& values,
                                const std::string& axis) {
  ExperimentConfig base = cfg;
  base.sweep_axis = axis == "n" ? SweepAxis::kN : SweepAxis::kAlpha;
  base.sweep_values = values;
  base.validate();
  const Dataset data = load_dataset(base);
  std::vector<SweepRow> rows;
  for (double v : values) {
    ExperimentConfig point = base;
    point.sweep_axis = SweepAxis::kNone;
    point.sweep_values.clear();
    if (axis == "n") {
      point.selector.n_prototypes = whole(v, "sweep n");
    } else {
      point.selector.alpha = v;
    }
    if (!cfg.output_dir.empty()) {
      std::ostringstream name;
      name << axis << "_" << v;
      point.output_dir = cfg.output_dir / name.str();
    }
    const ExperimentResult r = run_experiment(point, data);
    rows.push_back({v, r.report.top1, r.report.map, r.prototypes.total_count()});
  }
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    write_sweep_csv(rows, axis, cfg.output_dir / ("sweep_" + axis + ".csv"));
  }
  return rows;
}

}  // namespace

std::vector<SweepRow> sweep_n(const ExperimentConfig& cfg, const std::vector<std::size_t>& n_list) {
  return run_sweep(cfg, std::vector<double>(n_list.begin(), n_list.end()), "n");
}

std::vector<SweepRow> sweep_alpha(const ExperimentConfig& cfg, const std::vector<double>& alphas) {
  return run_sweep(cfg, alphas, "alpha");
}

std::vector<GroupResult> group_evaluate(const ExperimentConfig& cfg, const std::vector<GroupBucket>& buckets) {
  ExperimentConfig run = cfg;
  std::string text;
  for (const auto& b : buckets) text += (text.empty() ? "" : ",") + b.label();
  if (text.empty()) config_error("group evaluation needs at least one bucket");
  run.buckets = text;
  const ExperimentResult r = run_experiment(run);
  if (!cfg.output_dir.empty()) {
    std::ofstream out(cfg.output_dir / "group_eval.csv");
    if (!out) throw Error(ErrorCategory::kIo, "cannot write group_eval.csv");
    out.precision(17);
    out << "bucket,query_count,map\n";
    for (const auto& g : r.report.per_group) {
      out << g.label << ',' << g.query_count << ',';
      if (g.map) out << *g.map;
      out << '\n';
    }
  }
  return r.report.per_group;
}

}  // namespace gcp

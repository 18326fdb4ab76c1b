#include <cmath>
#include <random>

#include "gcp/error.hpp"
#include "gcp/experiment.hpp"
#include "seeding.hpp"

namespace gcp {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorCategory::kConfig, "synthetic spec: " + msg);
}

Vec gaussian(std::mt19937_64& rng, std::size_t dim, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(dim);
  for (auto& x : v) x = scale * normal(rng);
  return v;
}

Vec unit(Vec v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

// Unit vector orthogonal to `u`.
Vec orthogonal_unit(std::mt19937_64& rng, const Vec& u) {
  Vec v = gaussian(rng, u.size(), 1.0);
  double dot = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) dot += v[j] * u[j];
  for (std::size_t j = 0; j < u.size(); ++j) v[j] -= dot * u[j];
  return unit(std::move(v));
}

}  // namespace

void SyntheticSpec::validate() const {
  require(n_classes > 0, "n_classes must be positive");
  require(min_instances > 0 && min_instances <= max_instances,
          "need 1 <= min_instances <= max_instances");
  require(queries_per_class > 0, "queries_per_class must be positive");
  require(dim > 0, "dim must be positive");
  require(n_cameras > 0, "n_cameras must be positive");
  require(class_center_scale > 0.0, "class_center_scale must be positive");
  require(within_class_noise >= 0.0, "within_class_noise must be non-negative");
  require(camera_offset_scale >= 0.0, "camera_offset_scale must be non-negative");
  require(elongation >= 0.0, "elongation must be non-negative");
  require(chain_length > 0, "chain_length must be positive");
  require(chain_spacing >= 0.0, "chain_spacing must be non-negative");
  require(chain_offset >= 0.0, "chain_offset must be non-negative");
  require(dim >= 2 || chain_offset == 0.0, "chain_offset needs dim >= 2");
  require(distractor_fraction >= 0.0 && distractor_fraction < 1.0,
          "distractor_fraction must lie in [0, 1)");
  require(distractor_distance >= 0.0, "distractor_distance must be non-negative");
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"n_classes", n_classes},
          {"min_instances", min_instances},
          {"max_instances", max_instances},
          {"queries_per_class", queries_per_class},
          {"dim", dim},
          {"n_cameras", n_cameras},
          {"class_center_scale", class_center_scale},
          {"within_class_noise", within_class_noise},
          {"camera_offset_scale", camera_offset_scale},
          {"elongation", elongation},
          {"chain_length", chain_length},
          {"chain_spacing", chain_spacing},
          {"chain_offset", chain_offset},
          {"distractor_fraction", distractor_fraction},
          {"distractor_distance", distractor_distance},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  if (j.is_string()) return synthetic_preset(j.get<std::string>());
  if (!j.is_object()) throw Error(ErrorCategory::kConfig, "synthetic spec must be an object or preset name");
  if (j.contains("preset")) spec = synthetic_preset(j.at("preset").get<std::string>());
  const nlohmann::json defaults = spec.to_json();
  for (const auto& [key, _] : j.items()) {
    if (key != "preset" && !defaults.contains(key)) {
      throw Error(ErrorCategory::kConfig, "unknown synthetic spec key '" + key + "'");
    }
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("n_classes", spec.n_classes);
    get("min_instances", spec.min_instances);
    get("max_instances", spec.max_instances);
    get("queries_per_class", spec.queries_per_class);
    get("dim", spec.dim);
    get("n_cameras", spec.n_cameras);
    get("class_center_scale", spec.class_center_scale);
    get("within_class_noise", spec.within_class_noise);
    get("camera_offset_scale", spec.camera_offset_scale);
    get("elongation", spec.elongation);
    get("chain_length", spec.chain_length);
    get("chain_spacing", spec.chain_spacing);
    get("chain_offset", spec.chain_offset);
    get("distractor_fraction", spec.distractor_fraction);
    get("distractor_distance", spec.distractor_distance);
    get("seed", spec.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kConfig, std::string("synthetic spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticSpec synthetic_preset(const std::string& name) {
  SyntheticSpec spec;
  if (name == "default") return spec;
  if (name == "tradeoff") {
    // Pairs of elongated classes sharing an axis. Each pair's first class
    // carries a distractor cluster on its far side, which drags its mean
    // away from the records a query is likely to resemble.
    spec.n_classes = 48;
    spec.min_instances = 10;
    spec.max_instances = 24;
    spec.queries_per_class = 4;
    spec.dim = 32;
    spec.n_cameras = 4;
    spec.class_center_scale = 1.0;
    spec.within_class_noise = 0.1;
    spec.camera_offset_scale = 0.03;
    spec.elongation = 1.5;
    spec.chain_length = 2;
    spec.chain_spacing = 3.5;
    spec.chain_offset = 0.0;
    spec.distractor_fraction = 0.3;
    spec.distractor_distance = 3.0;
    spec.seed = 7;
    return spec;
  }
  throw Error(ErrorCategory::kConfig, "unknown synthetic preset '" + name + "'");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(detail::mix_key(spec.seed, detail::kDataStream));
  const std::size_t d = spec.dim;

  std::vector<Vec> camera_offsets;
  for (std::size_t k = 0; k < spec.n_cameras; ++k) {
    camera_offsets.push_back(gaussian(rng, d, spec.camera_offset_scale));
  }

  struct ClassShape {
    Vec center;
    Vec axis;  // chain axis; empty for lone classes
    Vec away;  // unit direction pointing away from the next chain member
  };
  std::vector<ClassShape> shapes;
  const bool chained = spec.chain_length > 1 || spec.elongation > 0.0;
  while (shapes.size() < spec.n_classes) {
    const Vec base = gaussian(rng, d, spec.class_center_scale);
    if (!chained) {
      shapes.push_back({base, {}, {}});
      continue;
    }
    const Vec axis = unit(gaussian(rng, d, 1.0));
    const Vec side = d >= 2 ? orthogonal_unit(rng, axis) : Vec(d, 0.0);
    const double mid = 0.5 * static_cast<double>(spec.chain_length - 1);
    const std::size_t first = shapes.size();
    for (std::size_t k = 0; k < spec.chain_length && shapes.size() < spec.n_classes; ++k) {
      const double along = (static_cast<double>(k) - mid) * spec.chain_spacing;
      const double aside = (k % 2 == 1) ? spec.chain_offset : 0.0;
      Vec center = base;
      for (std::size_t j = 0; j < d; ++j) center[j] += along * axis[j] + aside * side[j];
      shapes.push_back({std::move(center), axis, {}});
    }
    const std::size_t count = shapes.size() - first;
    for (std::size_t k = 0; k + 1 < count; ++k) {
      const Vec& from = shapes[first + k].center;
      const Vec& to = shapes[first + k + 1].center;
      Vec dir(d);
      for (std::size_t j = 0; j < d; ++j) dir[j] = from[j] - to[j];
      shapes[first + k].away = unit(std::move(dir));
    }
  }

  std::uniform_int_distribution<std::size_t> size_dist(spec.min_instances, spec.max_instances);
  std::uniform_int_distribution<std::size_t> cam_dist(0, spec.n_cameras - 1);
  std::uniform_real_distribution<double> along_dist(-spec.elongation, spec.elongation);
  const bool elongated = spec.elongation > 0.0;
  const bool distracted = spec.distractor_fraction > 0.0 && spec.distractor_distance > 0.0;
  if (distracted && !chained) {
    for (auto& shape : shapes) shape.away = unit(gaussian(rng, d, 1.0));
  }
  auto draw = [&](const ClassShape& shape, std::size_t cam) {
    Vec v = gaussian(rng, d, spec.within_class_noise);
    const double t = elongated ? along_dist(rng) : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] += shape.center[j] + camera_offsets[cam][j];
      if (elongated) v[j] += t * shape.axis[j];
    }
    return v;
  };

  LabelMap labels;
  for (std::size_t c = 0; c < spec.n_classes; ++c) labels.intern_class("c" + std::to_string(c));
  for (std::size_t k = 0; k < spec.n_cameras; ++k) labels.intern_camera("cam" + std::to_string(k));

  std::vector<EmbeddingRecord> gallery;
  std::vector<EmbeddingRecord> queries;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const bool has_distractors = distracted && !shapes[c].away.empty();
    // The trailing round(fraction * count) records of each split are distractors.
    auto emit = [&](std::vector<EmbeddingRecord>& out, const std::string& prefix, std::size_t count) {
      const std::size_t n_distract =
          has_distractors ? static_cast<std::size_t>(std::lround(spec.distractor_fraction * static_cast<double>(count)))
                          : 0;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t cam = cam_dist(rng);
        Vec v = draw(shapes[c], cam);
        if (i + n_distract >= count) {
          for (std::size_t j = 0; j < d; ++j) v[j] += spec.distractor_distance * shapes[c].away[j];
        }
        out.push_back({prefix + std::to_string(c) + "_" + std::to_string(i), std::move(v), static_cast<ClassId>(c),
                       static_cast<CameraId>(cam)});
      }
    };
    emit(gallery, "g", size_dist(rng));
    emit(queries, "q", spec.queries_per_class);
  }
  return {EmbeddingSet(std::move(gallery), labels), EmbeddingSet(std::move(queries), labels)};
}

}  // namespace gcp

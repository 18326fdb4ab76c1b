// Command-line front end for the prototype selection and evaluation harness.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gcp/error.hpp"
#include "gcp/experiment.hpp"

using namespace gcp;

namespace {

// Flags shared by the experiment-style subcommands. Anything set here
// overrides the matching field of --config.
struct ExperimentFlags {
  std::string config;
  std::string data;
  std::string queries;
  std::string synthetic;
  std::string method;
  std::optional<std::size_t> n;
  std::optional<double> alpha;
  std::string protocol;
  std::optional<std::uint64_t> seed;
  std::string model;
  std::string out;
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--config", f.config, "experiment config JSON");
  cmd->add_option("--data", f.data, "gallery embeddings (.csv or .bin)");
  cmd->add_option("--queries", f.queries, "query embeddings (.csv or .bin)");
  cmd->add_option("--synthetic", f.synthetic, "synthetic preset name instead of files");
  cmd->add_option("--method", f.method, "instance|centroid|kcentroid|fps|alphafps|gcp");
  cmd->add_option("--n", f.n, "prototypes per class");
  cmd->add_option("--alpha", f.alpha, "alpha-FPS interpolation weight");
  cmd->add_option("--protocol", f.protocol, "plain|camera-filter");
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_option("--model", f.model, "GCP checkpoint to use instead of training");
  cmd->add_option("--out", f.out, "output directory");
}

ExperimentConfig build_config(const ExperimentFlags& f) {
  nlohmann::json j = f.config.empty() ? nlohmann::json::object() : read_json_file(f.config);
  if (!f.data.empty() || !f.queries.empty() || !f.synthetic.empty()) {
    nlohmann::json ds = nlohmann::json::object();
    if (!f.data.empty()) ds["gallery"] = f.data;
    if (!f.queries.empty()) ds["queries"] = f.queries;
    if (!f.synthetic.empty()) ds["synthetic"] = f.synthetic;
    j["dataset"] = ds;
  }
  if (!j.contains("selector")) j["selector"] = nlohmann::json::object();
  if (!f.method.empty()) j["selector"]["method"] = f.method;
  if (f.n) j["selector"]["n"] = *f.n;
  if (f.alpha) j["selector"]["alpha"] = *f.alpha;
  if (!f.protocol.empty()) j["protocol"] = f.protocol;
  if (f.seed) j["seed"] = *f.seed;
  if (!f.model.empty()) j["gcp_checkpoint"] = f.model;
  if (!f.out.empty()) j["output_dir"] = f.out;
  return ExperimentConfig::from_json(j);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCategory::kUsage, "bad list entry '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCategory::kUsage, "empty value list");
  return out;
}

void print_report(const EvalReport& r) {
  std::printf("queries %zu  R-1 %.4f  mAP %.4f\n", r.query_count, r.top1, r.map);
}

void print_rows(const std::vector<SweepRow>& rows, const char* axis) {
  std::printf("%-8s %-8s %-8s %s\n", axis, "R-1", "mAP", "prototypes");
  for (const auto& row : rows) {
    std::printf("%-8g %-8.4f %-8.4f %zu\n", row.value, row.rank1, row.map, row.total_prototypes);
  }
}

// Gallery-only commands reuse the dataset section of the config but do not
// need queries.
EmbeddingSet load_gallery(const ExperimentConfig& cfg) {
  if (cfg.synthetic) return load_dataset(cfg).gallery;
  return load_embedding_set(*cfg.gallery_path, format_from_extension(*cfg.gallery_path));
}

ExperimentConfig gallery_config(ExperimentFlags f) {
  // Satisfy the both-files rule when only a gallery was given.
  if (!f.data.empty() && f.queries.empty()) f.queries = f.data;
  return build_config(f);
}

int run(int argc, char** argv) {
  CLI::App app{"Prototype selection, GCP training and retrieval evaluation"};
  app.require_subcommand(1);

  // gen
  std::string preset = "default";
  std::string spec_file;
  std::string gen_out;
  std::string gen_format = "csv";
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen", "write a synthetic gallery/query pair");
  gen->add_option("--preset", preset, "default|tradeoff");
  gen->add_option("--spec", spec_file, "synthetic spec JSON (overrides --preset)");
  gen->add_option("--seed", gen_seed, "data seed");
  gen->add_option("--format", gen_format, "csv|bin");
  gen->add_option("--out", gen_out, "output directory")->required();

  ExperimentFlags select_f, train_f, eval_f, sweep_n_f, sweep_a_f, group_f;
  auto* select = app.add_subcommand("select", "select prototypes and write them as JSON");
  add_experiment_flags(select, select_f);
  auto* train_cmd = app.add_subcommand("train", "train a GCP model and write a checkpoint");
  add_experiment_flags(train_cmd, train_f);
  auto* eval = app.add_subcommand("eval", "select, rank and evaluate");
  add_experiment_flags(eval, eval_f);
  std::string n_values;
  auto* sweep_n_cmd = app.add_subcommand("sweep-n", "evaluate across prototype counts");
  add_experiment_flags(sweep_n_cmd, sweep_n_f);
  sweep_n_cmd->add_option("--values", n_values, "comma-separated N list")->required();
  std::string alpha_values;
  auto* sweep_a_cmd = app.add_subcommand("sweep-alpha", "evaluate alpha-FPS across alpha values");
  add_experiment_flags(sweep_a_cmd, sweep_a_f);
  sweep_a_cmd->add_option("--values", alpha_values, "comma-separated alpha list")->required();
  std::string bucket_text;
  auto* group = app.add_subcommand("group-eval", "mAP per gallery-size bucket");
  add_experiment_flags(group, group_f);
  group->add_option("--buckets", bucket_text, "e.g. 1-15,16-30,31-50,51+");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  if (*gen) {
    SyntheticSpec spec = spec_file.empty() ? synthetic_preset(preset) : SyntheticSpec::from_json(read_json_file(spec_file));
    if (gen_seed) spec.seed = *gen_seed;
    const FileFormat format = parse_file_format(gen_format);
    const char* ext = format == FileFormat::kCsv ? ".csv" : ".bin";
    const auto data = generate_synthetic(spec);
    std::filesystem::create_directories(gen_out);
    const std::filesystem::path dir = gen_out;
    save_embedding_set(data.gallery, dir / (std::string("gallery") + ext), format);
    save_embedding_set(data.queries, dir / (std::string("queries") + ext), format);
    write_json_file(spec.to_json(), dir / "spec.json");
    std::printf("wrote %zu gallery and %zu query records to %s\n", data.gallery.size(), data.queries.size(),
                gen_out.c_str());
  } else if (*select) {
    std::string out = select_f.out;
    select_f.out.clear();
    const ExperimentConfig cfg = gallery_config(select_f);
    const EmbeddingSet gallery = load_gallery(cfg);
    SelectorConfig sel = cfg.selector;
    sel.seed = cfg.seed;
    PrototypeSet protos;
    if (sel.method == SelectorKind::kGcp) {
      GcpModel model = cfg.gcp_checkpoint ? load_checkpoint(*cfg.gcp_checkpoint) : [&] {
        GcpConfig g = cfg.gcp.value_or(GcpConfig{});
        g.seed = cfg.seed;
        g.n_prototypes = sel.n_prototypes;
        g.dim = gallery.dim();
        g.n_cameras = std::max(g.n_cameras, gallery.camera_count());
        return train(gallery, g).model;
      }();
      protos = select_gcp(gallery, model, sel.n_prototypes);
    } else {
      protos = select_prototypes(gallery, sel);
    }
    if (out.empty()) {
      std::cout << prototypes_to_json(protos).dump(2) << '\n';
    } else {
      write_prototypes(protos, out);
      std::printf("wrote %zu prototypes for %zu classes to %s\n", protos.total_count(), protos.per_class.size(),
                  out.c_str());
    }
  } else if (*train_cmd) {
    std::string out = train_f.out;
    train_f.out.clear();
    if (train_f.method.empty()) train_f.method = "gcp";
    const ExperimentConfig cfg = gallery_config(train_f);
    if (out.empty()) throw Error(ErrorCategory::kUsage, "train needs --out <checkpoint>");
    const EmbeddingSet gallery = load_gallery(cfg);
    GcpConfig g = cfg.gcp.value_or(GcpConfig{});
    g.seed = cfg.seed;
    g.n_prototypes = cfg.selector.n_prototypes;
    g.dim = gallery.dim();
    g.n_cameras = std::max(g.n_cameras, gallery.camera_count());
    const TrainResult r = train(gallery, g);
    save_checkpoint(r.model, out);
    std::printf("epochs %zu  loss %.6f -> %.6f  wrote %s\n", r.trace.epoch_loss.size(), r.trace.epoch_loss.front(),
                r.trace.epoch_loss.back(), out.c_str());
  } else if (*eval) {
    print_report(run_experiment(build_config(eval_f)).report);
  } else if (*sweep_n_cmd) {
    std::vector<std::size_t> ns;
    for (double v : parse_list(n_values)) {
      if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw Error(ErrorCategory::kUsage, "N values must be positive integers");
      }
      ns.push_back(static_cast<std::size_t>(v));
    }
    print_rows(sweep_n(build_config(sweep_n_f), ns), "N");
  } else if (*sweep_a_cmd) {
    if (sweep_a_f.method.empty()) sweep_a_f.method = "alphafps";
    print_rows(sweep_alpha(build_config(sweep_a_f), parse_list(alpha_values)), "alpha");
  } else if (*group) {
    const ExperimentConfig cfg = build_config(group_f);
    const auto rows = group_evaluate(cfg, parse_buckets(bucket_text.empty() ? cfg.buckets : bucket_text));
    std::printf("%-10s %-8s %s\n", "bucket", "queries", "mAP");
    for (const auto& g : rows) {
      if (g.map) {
        std::printf("%-10s %-8zu %.4f\n", g.label.c_str(), g.query_count, *g.map);
      } else {
        std::printf("%-10s %-8zu -\n", g.label.c_str(), g.query_count);
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << category_name(e.category()) << ": " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
  }
  return 1;
}

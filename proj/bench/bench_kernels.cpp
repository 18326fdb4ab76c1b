// Serial versus OpenMP timings for the hot paths. The second benchmark
// argument selects the execution mode: 0 = serial, 1 = parallel.

#include <benchmark/benchmark.h>

#include <random>

#include "gcp/experiment.hpp"

using namespace gcp;

namespace {

Execution mode(const benchmark::State& state) {
  return state.range(1) == 0 ? Execution::kSerial : Execution::kParallel;
}

std::vector<Vec> random_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vec> out(n, Vec(dim));
  for (auto& p : out) {
    for (auto& x : p) x = normal(rng);
  }
  return out;
}

const SyntheticData& dataset(std::size_t n_classes) {
  static std::map<std::size_t, SyntheticData> cache;
  auto it = cache.find(n_classes);
  if (it == cache.end()) {
    SyntheticSpec spec;
    spec.n_classes = n_classes;
    spec.min_instances = 10;
    spec.max_instances = 30;
    spec.dim = 128;
    spec.queries_per_class = 2;
    spec.seed = 1;
    it = cache.emplace(n_classes, generate_synthetic(spec)).first;
  }
  return it->second;
}

void BM_DistanceTable(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto rows = random_points(n, 128, 1);
  const auto cols = random_points(n, 128, 2);
  std::vector<PointRef> r(rows.begin(), rows.end());
  std::vector<PointRef> c(cols.begin(), cols.end());
  std::vector<double> out(n * n);
  for (auto _ : state) {
    kernels::distance_table(mode(state), r, c, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_DistanceTable)->ArgsProduct({{256, 1024}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_AlphaFps(benchmark::State& state) {
  const auto& data = dataset(static_cast<std::size_t>(state.range(0)));
  SelectorConfig cfg;
  cfg.method = SelectorKind::kAlphaFps;
  cfg.n_prototypes = 3;
  for (auto _ : state) benchmark::DoNotOptimize(select_alpha_fps(data.gallery, cfg, mode(state)));
}
BENCHMARK(BM_AlphaFps)->ArgsProduct({{200}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_KCentroid(benchmark::State& state) {
  const auto& data = dataset(static_cast<std::size_t>(state.range(0)));
  SelectorConfig cfg;
  cfg.method = SelectorKind::kKCentroid;
  cfg.n_prototypes = 3;
  for (auto _ : state) benchmark::DoNotOptimize(select_kcentroid(data.gallery, cfg, mode(state)));
}
BENCHMARK(BM_KCentroid)->ArgsProduct({{200}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  const auto& data = dataset(static_cast<std::size_t>(state.range(0)));
  const PrototypeSet protos = select_instance(data.gallery);
  EvalOptions opts;
  opts.exec = mode(state);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(data.queries, protos, opts));
}
BENCHMARK(BM_Evaluate)->ArgsProduct({{200}, {0, 1}})->Unit(benchmark::kMillisecond);

void BM_SelectGcp(benchmark::State& state) {
  const auto& data = dataset(static_cast<std::size_t>(state.range(0)));
  GcpConfig cfg;
  cfg.dim = data.gallery.dim();
  cfg.n_cameras = data.gallery.camera_count();
  cfg.seed = 3;
  const GcpModel model(cfg);
  for (auto _ : state) benchmark::DoNotOptimize(select_gcp(data.gallery, model, 3, {}, mode(state)));
}
BENCHMARK(BM_SelectGcp)->ArgsProduct({{50}, {0, 1}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

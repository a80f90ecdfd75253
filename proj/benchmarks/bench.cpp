#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "mvcbm/metrics/metrics.hpp"
#include "mvcbm/synthgen/synthgen.hpp"
#include "mvcbm/training/training.hpp"

using namespace mvcbm;

namespace {

const MultiviewDataset& bench_data() {
  static const MultiviewDataset ds = [] {
    synth::SyntheticConfig c;
    c.n = 1024;
    c.p = 100;
    c.test_size = 256;
    c.seed = 11;
    return synth::generate_dataset(c).dataset;
  }();
  return ds;
}

model::MvcbmConfig bench_arch(model::FusionMode fusion) {
  model::MvcbmConfig c;
  c.view_dim = 100;
  c.fusion = fusion;
  return c;
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
  const auto fusion = state.range(0) == 0 ? model::FusionMode::kMean : model::FusionMode::kLstm;
  const model::AnyModel m = model::init_mvcbm(bench_arch(fusion), Rng(1));
  const auto batch = model::pack(bench_data(), first_rows(static_cast<std::size_t>(state.range(1))));
  for (auto _ : state) {
    auto out = model::forward(m, batch);
    benchmark::DoNotOptimize(out.y_hat.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_Forward)->ArgsProduct({{0, 1}, {64, 512}});

static void BM_JointStep(benchmark::State& state) {
  const auto fusion = state.range(0) == 0 ? model::FusionMode::kMean : model::FusionMode::kLstm;
  const auto& ds = bench_data();
  auto m = model::init_mvcbm(bench_arch(fusion), Rng(2));
  const auto w = train::class_weights(ds);
  const auto rows = first_rows(64);
  for (auto _ : state) {
    num::Tape<float> tape(num::Mode::kTrain, 3);
    auto loss = train::joint_loss(tape, m, ds, w, rows, 1.0);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.value(loss).data());
  }
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_JointStep)->Arg(0)->Arg(1);

static void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u;
  std::vector<double> scores(n), labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i % 2;
    scores[i] = u(gen) + 0.3 * labels[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::auroc(scores, labels));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Auroc)->Arg(2000)->Arg(100000);

static void BM_GenerateDataset(benchmark::State& state) {
  synth::SyntheticConfig c;
  c.n = static_cast<std::size_t>(state.range(0));
  c.p = 100;
  c.test_size = c.n / 4;
  for (auto _ : state) {
    auto bench = synth::generate_dataset(c);
    benchmark::DoNotOptimize(bench.dataset.size());
  }
}
BENCHMARK(BM_GenerateDataset)->Arg(2000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();

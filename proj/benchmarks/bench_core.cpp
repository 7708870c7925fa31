#include <benchmark/benchmark.h>

#include "carotidseg/autograd.hpp"
#include "carotidseg/losses.hpp"
#include "carotidseg/nets.hpp"
#include "carotidseg/rng.hpp"
#include "carotidseg/synth.hpp"
#include "carotidseg/transforms.hpp"

namespace cs = carotidseg;

namespace {

cs::Tensor random_tensor(std::vector<std::int64_t> dims, std::uint64_t seed) {
  cs::Rng rng(seed);
  cs::Tensor t(std::move(dims));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  std::int64_t size = state.range(0);
  cs::Tensor x = random_tensor({1, 16, size, size}, 1);
  cs::Tensor w = random_tensor({16, 16, 3, 3}, 2);
  cs::Tensor b = random_tensor({16}, 3);
  cs::ag::NoGradGuard ng;
  for (auto _ : state) {
    auto y = cs::ag::conv2d(cs::ag::constant(x), cs::ag::constant(w), cs::ag::constant(b), 1, 1);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_Conv2dForward)->Arg(32)->Arg(64)->Arg(128);

void BM_FineModelTrainStepShape(benchmark::State& state) {
  cs::ModelConfig cfg = cs::ModelConfig::fine_defaults();
  cfg.depth = 3;
  cfg.base_channels = 8;
  cfg.n_classes = 1;
  cs::Model model(cfg, 7);
  cs::Tensor x = random_tensor({4, 5, 64, 64}, 4);
  cs::Tensor g({4, 1, 64, 64});
  cs::LossConfig lcfg = cs::LossConfig::seg_defaults();
  for (auto _ : state) {
    auto out = model.forward(x, true, 11);
    auto loss = cs::loc_supervised_loss(out.probs, g, lcfg);
    model.params().zero_grads();
    cs::ag::backward(loss);
    benchmark::DoNotOptimize(loss.value()[0]);
  }
}
BENCHMARK(BM_FineModelTrainStepShape)->Unit(benchmark::kMillisecond);

void BM_GeometricWarp(benchmark::State& state) {
  cs::Tensor img = random_tensor({5, 256, 256}, 5);
  cs::GeometricParams gamma;
  gamma.rotation_deg = 17.0;
  gamma.scale = 0.9;
  for (auto _ : state) {
    cs::Tensor out = cs::apply_geometric(img, gamma, cs::Interp::bilinear);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_GeometricWarp)->Unit(benchmark::kMillisecond);

void BM_PhantomSlice(benchmark::State& state) {
  cs::PhantomSpec spec;
  spec.n_patients = 1;
  spec.slices_per_patient = 1;
  spec.height = spec.width = 256;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    state.PauseTiming();
    spec.seed = ++seed;
    auto dir = std::filesystem::temp_directory_path() / "cseg_bench_phantom";
    std::filesystem::remove_all(dir);
    state.ResumeTiming();
    auto manifest = cs::generate_phantom(spec, dir);
    benchmark::DoNotOptimize(manifest.patients.size());
  }
}
BENCHMARK(BM_PhantomSlice)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

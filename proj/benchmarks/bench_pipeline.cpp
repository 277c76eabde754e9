// Preprocessing and embedding costs per drawing / tile.

#include <benchmark/benchmark.h>

#include "chunkpd/backbone.hpp"
#include "chunkpd/dataset.hpp"
#include "chunkpd/hashing.hpp"
#include "chunkpd/preprocess.hpp"

namespace {

using namespace chunkpd;

const DrawingSample& sample(DrawingType type) {
  static const Manifest m = synthesize_toy_manifest(ToyOptions{2, 3, 512});
  for (const auto& s : m.samples) {
    if (s.drawing_type == type) return s;
  }
  return m.samples.front();
}

void BM_Sha256(benchmark::State& state) {
  const std::string text(static_cast<std::size_t>(state.range(0)), 'x');
  for (auto _ : state) benchmark::DoNotOptimize(sha256(text));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sha256)->Arg(64)->Arg(1 << 20);

void BM_Resize(benchmark::State& state) {
  const auto& img = *sample(DrawingType::Spiral).image;
  const int side = ChunkGrid(static_cast<int>(state.range(0))).canvas_side();
  for (auto _ : state) benchmark::DoNotOptimize(resize(img, side));
}
BENCHMARK(BM_Resize)->Arg(1)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_NoiseField(benchmark::State& state) {
  const int side = ChunkGrid(2).canvas_side();
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(noise_field(++seed, side, side, 0.003));
}
BENCHMARK(BM_NoiseField)->Unit(benchmark::kMillisecond);

void BM_Rotate(benchmark::State& state) {
  const auto canvas = resize(*sample(DrawingType::Circle).image, ChunkGrid(2).canvas_side());
  for (auto _ : state) benchmark::DoNotOptimize(rotate(canvas, static_cast<double>(state.range(0))));
}
BENCHMARK(BM_Rotate)->Arg(90)->Arg(45)->Unit(benchmark::kMillisecond);

void BM_Pipeline(benchmark::State& state) {
  const auto type = static_cast<DrawingType>(state.range(0));
  const auto& s = sample(type);
  const ChunkGrid grid(2);
  const AugmentationSpec spec;
  for (auto _ : state) benchmark::DoNotOptimize(run_pipeline(s, grid, spec, true));
}
BENCHMARK(BM_Pipeline)
    ->Arg(static_cast<int>(DrawingType::Circle))
    ->Arg(static_cast<int>(DrawingType::Meander))
    ->Unit(benchmark::kMillisecond);

void BM_ChunkStitch(benchmark::State& state) {
  const ChunkGrid grid(static_cast<int>(state.range(0)));
  const Image canvas(grid.canvas_side(), grid.canvas_side(), 3, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(stitch(chunk(canvas, grid), grid));
}
BENCHMARK(BM_ChunkStitch)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_Embed(benchmark::State& state, BackboneKind kind, const char* variant) {
  const auto backbone = shared_backbone(kind, variant);
  const auto tile = chunk(resize(*sample(DrawingType::Meander).image, ChunkGrid(2).canvas_side()), ChunkGrid(2))[0];
  for (auto _ : state) benchmark::DoNotOptimize(backbone->embed(tile.pixels));
}
BENCHMARK_CAPTURE(BM_Embed, resnet10, BackboneKind::ResidualCnn, "resnet10")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Embed, resnet18, BackboneKind::ResidualCnn, "resnet18")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Embed, pvt_tiny, BackboneKind::PyramidTransformer, "pvt_tiny")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

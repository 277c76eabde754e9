// Tile classifier training/scoring and the image vote.

#include <benchmark/benchmark.h>

#include <random>

#include "chunkpd/classify.hpp"

namespace {

using namespace chunkpd;

struct Data {
  std::vector<std::vector<float>> x;
  std::vector<Label> y;
};

/// Two Gaussian blobs in 512 dimensions.
Data blobs(int n) {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> g(0.0f, 1.0f);
  Data d;
  for (int i = 0; i < n; ++i) {
    const bool pd = i % 2 == 1;
    std::vector<float> row(512);
    for (auto& v : row) v = g(rng) + (pd ? 0.3f : 0.0f);
    d.x.push_back(std::move(row));
    d.y.push_back(pd ? Label::PD : Label::Healthy);
  }
  return d;
}

void BM_Train(benchmark::State& state, ClassifierSpec spec) {
  const auto d = blobs(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(train_classifier(spec, d.x, d.y));
}
BENCHMARK_CAPTURE(BM_Train, knn, ClassifierSpec(ClassifierKind::Knn))->Arg(1000)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Train, decision_tree, ClassifierSpec(ClassifierKind::DecisionTree))
    ->Arg(1000)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Train, random_forest, ClassifierSpec(ClassifierKind::RandomForest, {{"n_trees", 20}}))
    ->Arg(1000)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Train, neural_net, ClassifierSpec(ClassifierKind::NeuralNet, {{"epochs", 20}}))
    ->Arg(1000)
    ->Unit(benchmark::kMillisecond);

void BM_ScoreKnn(benchmark::State& state) {
  const auto d = blobs(static_cast<int>(state.range(0)));
  const auto model = train_classifier(ClassifierSpec(ClassifierKind::Knn), d.x, d.y);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(model.score(d.x[i++ % d.x.size()]));
}
BENCHMARK(BM_ScoreKnn)->Arg(1000)->Arg(4000);

void BM_Vote(benchmark::State& state) {
  std::vector<TilePrediction> tiles(static_cast<std::size_t>(state.range(0)));
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    tiles[t].tile_ref.sample_id = "s";
    tiles[t].tile_ref.grid_pos = GridPos{static_cast<int>(t) / 3, static_cast<int>(t) % 3};
    tiles[t].label = t % 2 ? Label::PD : Label::Healthy;
    tiles[t].score = t % 2 ? 0.7 : 0.2;
  }
  for (auto _ : state) benchmark::DoNotOptimize(vote(tiles));
}
BENCHMARK(BM_Vote)->Arg(4)->Arg(9);

}  // namespace

#include <gtest/gtest.h>

#include <cmath>

#include "chunkpd/encoders.hpp"
#include "chunkpd/random.hpp"
#include "test_util.hpp"

using namespace chunkpd;
using chunkpd::testing_util::TempDir;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return ErrorCode::InvalidArgument;
}

Image random_tile(std::uint64_t seed, int side = kTileSide) {
  Rng rng(seed);
  Image img(side, side, 3);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

// Two Gaussian blobs in `dim` dimensions, separated along every axis.
void blobs(int n, int dim, std::vector<std::vector<float>>& x, std::vector<int>& y, std::uint64_t seed = 1) {
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    std::vector<float> row(static_cast<std::size_t>(dim));
    for (auto& v : row) v = static_cast<float>(rng.normal() + (label ? 1.5 : -1.5));
    x.push_back(std::move(row));
    y.push_back(label);
  }
}

}  // namespace

TEST(EncoderId, FactoriesAndNames) {
  EXPECT_EQ(EncoderId::residual().output_dim, 512);
  EXPECT_EQ(EncoderId::pyramid().output_dim, 512);
  const auto h = EncoderId::hybrid();
  EXPECT_EQ(h.output_dim, 1024);
  EXPECT_EQ(h.variant, "resnet18+pvt_tiny");
  EXPECT_EQ(EncoderId::residual().display_name(), "ResNet");
  EXPECT_EQ(EncoderId::pyramid().display_name(), "PVT");
  EXPECT_EQ(h.display_name(), "PVT+ResNet");
  EXPECT_EQ(code_of([] { EncoderId::make(EncoderKind::ResidualCnn, "resnet50"); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { EncoderId::make(EncoderKind::HybridConcat, "resnet18"); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(parse_encoder_kind("hybrid_concat"), EncoderKind::HybridConcat);
  EXPECT_FALSE(parse_encoder_kind("vgg"));
}

TEST(Backbone, SeededInitIsDeterministic) {
  const auto a = make_backbone(BackboneKind::ResidualCnn, "resnet10", {3, {}});
  const auto b = make_backbone(BackboneKind::ResidualCnn, "resnet10", {3, {}});
  const auto c = make_backbone(BackboneKind::ResidualCnn, "resnet10", {4, {}});
  EXPECT_EQ(a->digest(), b->digest());
  EXPECT_NE(a->digest(), c->digest());
  EXPECT_EQ(a->native_dim(), 512);
  const auto tile = random_tile(1);
  EXPECT_EQ(a->embed(tile), b->embed(tile));
  EXPECT_EQ(shared_backbone(BackboneKind::ResidualCnn, "resnet10", {3, {}}).get(),
            shared_backbone(BackboneKind::ResidualCnn, "resnet10", {3, {}}).get());
}

TEST(Backbone, WeightFileRoundTrip) {
  TempDir dir("weights");
  const auto a = make_backbone(BackboneKind::ResidualCnn, "resnet10", {9, {}});
  a->save_weights(dir / "w.bin");
  const auto b = make_backbone(BackboneKind::ResidualCnn, "resnet10", {0, dir / "w.bin"});
  EXPECT_EQ(a->digest(), b->digest());
  EXPECT_EQ(code_of([&] { make_backbone(BackboneKind::ResidualCnn, "resnet18", {0, dir / "w.bin"}); }),
            ErrorCode::FormatError);
}

TEST(Backbone, PyramidEmbeds) {
  const auto p = shared_backbone(BackboneKind::PyramidTransformer, "pvt_tiny", {});
  const auto e = p->embed(random_tile(2));
  ASSERT_EQ(e.size(), 512u);
  for (float v : e) ASSERT_TRUE(std::isfinite(v));
}

TEST(EmbeddingCacheTest, HitsAndPersistence) {
  TempDir dir("emb");
  const auto bb = shared_backbone(BackboneKind::ResidualCnn, "resnet10", {});
  const auto tile = random_tile(5);
  std::vector<float> first;
  {
    EmbeddingCache cache(dir.path());
    first = cache.embed(*bb, tile);
    EXPECT_EQ(cache.embed(*bb, tile), first);
    EXPECT_EQ(cache.misses(), 1u);
    EXPECT_EQ(cache.hits(), 1u);
    cache.flush();
  }
  EmbeddingCache reopened(dir.path());
  const auto found = reopened.find(*bb, EmbeddingCache::key(*bb, tile));
  ASSERT_TRUE(found);
  EXPECT_EQ(*found, first);
  EXPECT_FALSE(reopened.find(*bb, EmbeddingCache::key(*bb, random_tile(6))));
}

TEST(EmbeddingCacheTest, KeyCoversBackboneAndPixels) {
  const auto a = shared_backbone(BackboneKind::ResidualCnn, "resnet10", {1, {}});
  const auto b = shared_backbone(BackboneKind::ResidualCnn, "resnet10", {2, {}});
  const auto t = random_tile(1, 8);
  auto u = t;
  u.pixels[0] += 1e-3f;
  EXPECT_NE(EmbeddingCache::key(*a, t), EmbeddingCache::key(*b, t));
  EXPECT_NE(EmbeddingCache::key(*a, t), EmbeddingCache::key(*a, u));
  EXPECT_EQ(EmbeddingCache::key(*a, t), EmbeddingCache::key(*a, random_tile(1, 8)));
}

TEST(Heads, IdentityProjection) {
  const auto h = ProjectionHead::identity(4);
  const std::vector<float> x{1.f, -2.f, 3.5f, 0.f};
  EXPECT_EQ(h.apply(x), x);
}

TEST(Heads, ZeroEpochsReturnsHeadUnchanged) {
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  blobs(20, 6, x, y);
  FinetuneSchedule s;
  s.epochs = 0;
  const auto h = ProjectionHead::identity(6);
  EXPECT_EQ(finetune_projection(h, x, y, 2, s), h);
}

TEST(Heads, FinetuneLowersLoss) {
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  blobs(64, 8, x, y);
  FinetuneSchedule s;
  s.epochs = 30;
  s.learning_rate = 1e-2;
  TrainingLog log;
  const auto h = finetune_projection(ProjectionHead::identity(8), x, y, 2, s, &log);
  ASSERT_EQ(log.epoch_loss.size(), 30u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
  EXPECT_NE(h, ProjectionHead::identity(8));
  TrainingLog again;
  EXPECT_EQ(finetune_projection(ProjectionHead::identity(8), x, y, 2, s, &again), h);
  EXPECT_EQ(again.epoch_loss, log.epoch_loss);
}

TEST(Heads, Errors) {
  FinetuneSchedule s;
  EXPECT_EQ(code_of([&] { finetune_projection(ProjectionHead::identity(3), {}, {}, 2, s); }),
            ErrorCode::EmptyTrainingSet);
  s.batch_size = 0;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::InvalidConfig);
}

TEST(Heads, SoftmaxSeparatesBlobs) {
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  blobs(60, 5, x, y);
  FinetuneSchedule s;
  s.epochs = 20;
  s.learning_rate = 1e-2;
  const auto head = train_softmax(x, y, 2, s);
  int correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto p = head.probabilities(x[i]);
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-9);
    correct += (p[1] > p[0]) == (y[i] == 1);
  }
  EXPECT_EQ(correct, 60);
}

TEST(Heads, WeightDecayShrinksTowardsStart) {
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  blobs(60, 5, x, y);
  FinetuneSchedule s;
  s.epochs = 40;
  s.learning_rate = 1e-2;
  const auto norm = [](const std::vector<float>& w) {
    double n = 0;
    for (float v : w) n += double(v) * v;
    return n;
  };
  const auto free = train_softmax(x, y, 2, s);
  s.weight_decay = 0.5;
  const auto decayed = train_softmax(x, y, 2, s);
  EXPECT_LT(norm(decayed.weight), norm(free.weight));

  const auto id = ProjectionHead::identity(5);
  s.weight_decay = 0.0;
  const auto moved = finetune_projection(id, x, y, 2, s);
  s.weight_decay = 50.0;
  const auto anchored = finetune_projection(id, x, y, 2, s);
  const auto drift = [&](const ProjectionHead& h) {
    std::vector<float> d(h.weight.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = h.weight[i] - id.weight[i];
    return norm(d);
  };
  EXPECT_LT(drift(anchored), drift(moved));
  s.weight_decay = -1.0;
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::InvalidConfig);
}

TEST(EncoderTest, ExtractFeatures) {
  const Encoder unloaded;
  Tile tile;
  tile.pixels = random_tile(3);
  EXPECT_EQ(code_of([&] { extract_features(tile, unloaded); }), ErrorCode::ModelNotLoaded);

  const Encoder enc(initial_encoder_state(EncoderId::residual("resnet10")));
  const auto f = extract_features(tile, enc);
  EXPECT_EQ(f.values.size(), 512u);
  EXPECT_EQ(f.values, enc.backbones().front()->embed(tile.pixels));  // identity head

  Tile small;
  small.pixels = random_tile(3, 100);
  EXPECT_EQ(code_of([&] { extract_features(small, enc); }), ErrorCode::DimensionMismatch);
}

TEST(EncoderTest, HybridConcatenatesComponents) {
  const auto state = initial_encoder_state(EncoderId::hybrid("resnet10", "pvt_tiny"));
  ASSERT_EQ(state.components.size(), 2u);
  EXPECT_EQ(state.components[0].kind, BackboneKind::ResidualCnn);
  EXPECT_EQ(state.components[1].kind, BackboneKind::PyramidTransformer);
  const Encoder enc(state);
  Tile tile;
  tile.pixels = random_tile(4);
  const auto f = extract_features(tile, enc);
  ASSERT_EQ(f.values.size(), 1024u);
  const auto r = enc.backbones()[0]->embed(tile.pixels);
  EXPECT_TRUE(std::equal(r.begin(), r.end(), f.values.begin()));
}

TEST(EncoderTest, FinetuneOnEmbeddingsAndCheckpoint) {
  TempDir dir("enc");
  const auto state = initial_encoder_state(EncoderId::residual("resnet10"));
  std::vector<std::vector<float>> x;
  std::vector<int> y;
  blobs(40, 512, x, y);
  std::vector<std::vector<std::vector<float>>> raw;
  std::vector<Label> labels;
  for (std::size_t i = 0; i < x.size(); ++i) {
    raw.push_back({x[i]});
    labels.push_back(y[i] ? Label::PD : Label::Healthy);
  }
  FinetuneSchedule s;
  s.epochs = 3;
  const auto tuned = finetune_on_embeddings(state, raw, labels, s);
  EXPECT_NE(tuned.components[0].head, state.components[0].head);
  EXPECT_EQ(tuned.components[0].backbone_digest, state.components[0].backbone_digest);

  save_encoder(tuned, dir / "enc.ckpt", "cafe");
  const auto back = load_encoder(dir / "enc.ckpt");
  EXPECT_EQ(back.config_hash, "cafe");
  EXPECT_EQ(back.state.id, tuned.id);
  EXPECT_EQ(back.state.components[0].head, tuned.components[0].head);
  EXPECT_EQ(code_of([&] { load_encoder(dir / "absent.ckpt"); }), ErrorCode::MissingArtifact);
}

TEST(TypeClassifierTest, TrainClassifyAndCheckpoint) {
  TempDir dir("stage1");
  const auto bb = shared_backbone(BackboneKind::ResidualCnn, "resnet10", {});
  Rng rng(2);
  std::vector<std::vector<float>> emb;
  std::vector<DrawingType> types;
  for (int i = 0; i < 45; ++i) {
    const auto t = kDrawingTypes[static_cast<std::size_t>(i % 3)];
    std::vector<float> e(512);
    for (std::size_t k = 0; k < e.size(); ++k) {
      e[k] = static_cast<float>(rng.normal() + (static_cast<int>(k % 3) == i % 3 ? 2.0 : 0.0));
    }
    emb.push_back(std::move(e));
    types.push_back(t);
  }
  FinetuneSchedule s;
  s.epochs = 10;
  s.learning_rate = 1e-2;
  const auto state = train_type_classifier(emb, types, *bb, s, 96);
  EXPECT_EQ(state.input_side, 96);
  const TypeClassifier clf(state);
  for (std::size_t i = 0; i < emb.size(); ++i) EXPECT_EQ(clf.classify_embedding(emb[i]).drawing_type, types[i]);

  save_type_classifier(state, dir / "s1.ckpt", "beef");
  const auto back = load_type_classifier(dir / "s1.ckpt");
  EXPECT_EQ(back.config_hash, "beef");
  EXPECT_EQ(back.state.head, state.head);
  EXPECT_EQ(back.state.input_side, 96);

  // any canvas size is brought to the trained input side first
  Image canvas = random_tile(3);
  const auto small = type_classifier_input(canvas, 96);
  EXPECT_EQ(small.height, 96);
  EXPECT_EQ(type_classifier_input(small, 96), small);
  EXPECT_EQ(clf.embed(canvas), bb->embed(small));
  EXPECT_EQ(classify_drawing_type(canvas, clf).scores, clf.classify_embedding(bb->embed(small)).scores);
  EXPECT_EQ(code_of([&] { train_type_classifier(emb, types, *bb, s, 16); }), ErrorCode::InvalidConfig);

  const TypeClassifier unloaded;
  EXPECT_EQ(code_of([&] { classify_drawing_type(random_tile(1), unloaded); }), ErrorCode::ModelNotLoaded);
  s.epochs = 0;
  EXPECT_EQ(code_of([&] { train_type_classifier(emb, types, *bb, s); }), ErrorCode::InvalidConfig);
}

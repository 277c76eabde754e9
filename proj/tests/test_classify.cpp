#include <gtest/gtest.h>

#include "chunkpd/classify.hpp"
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

struct Data {
  std::vector<std::vector<float>> x;
  std::vector<Label> y;
};

Data blobs(int n, int dim, double gap, std::uint64_t seed) {
  Rng rng(seed);
  Data d;
  for (int i = 0; i < n; ++i) {
    const bool pd = i % 2 == 1;
    std::vector<float> row(static_cast<std::size_t>(dim));
    for (auto& v : row) v = static_cast<float>(rng.normal() + (pd ? gap : -gap));
    d.x.push_back(std::move(row));
    d.y.push_back(pd ? Label::PD : Label::Healthy);
  }
  return d;
}

TilePrediction tp(const std::string& parent, double score, int k = 0) {
  return {TileRef{parent, 0, GridPos{k / 2, k % 2}}, score >= 0.5 ? Label::PD : Label::Healthy, score};
}

}  // namespace

TEST(Spec, DefaultsAndValidation) {
  const ClassifierSpec knn(ClassifierKind::Knn);
  EXPECT_EQ(knn.get("k"), 5);
  EXPECT_EQ(knn.get("standardize"), 1);
  const ClassifierSpec rf(ClassifierKind::RandomForest);
  EXPECT_EQ(rf.get("n_trees"), 100);
  EXPECT_EQ(rf.resolved().size(), 4u);
  EXPECT_EQ(ClassifierSpec(ClassifierKind::NeuralNet).get("hidden"), 128);
  EXPECT_EQ(code_of([] { ClassifierSpec(ClassifierKind::Knn, {{"depth", 3}}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { ClassifierSpec(ClassifierKind::Knn, {{"k", 0}}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { ClassifierSpec(ClassifierKind::Knn, {{"k", 2.5}}); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([] { ClassifierSpec(ClassifierKind::NeuralNet, {{"learning_rate", -1}}); }),
            ErrorCode::InvalidConfig);
  try {
    ClassifierSpec(ClassifierKind::DecisionTree, {{"n_trees", 3}});
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("decision_tree.n_trees"), std::string::npos);
  }
  EXPECT_EQ(parse_classifier_kind("random_forest"), ClassifierKind::RandomForest);
  EXPECT_FALSE(parse_classifier_kind("svm"));
  EXPECT_EQ(short_name(ClassifierKind::DecisionTree), "DT");
}

// Hand-checked neighbourhoods on a line (no standardisation).
TEST(Knn, LineOracle) {
  const std::vector<std::vector<float>> x{{0}, {1}, {2}, {10}, {11}, {12}};
  const std::vector<Label> y{Label::Healthy, Label::Healthy, Label::Healthy, Label::PD, Label::PD, Label::PD};
  const auto c = train_classifier(ClassifierSpec(ClassifierKind::Knn, {{"k", 3}, {"standardize", 0}}), x, y);
  EXPECT_DOUBLE_EQ(c.score({1.5f}), 0.0);
  EXPECT_DOUBLE_EQ(c.score({6.9f}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.score({5.2f}), 1.0 / 3.0);
  // 0 and 10 are both 5 away: the earlier training row wins the last slot
  EXPECT_DOUBLE_EQ(c.score({5.0f}), 0.0);
  EXPECT_DOUBLE_EQ(c.score({20.0f}), 1.0);
}

TEST(Classifiers, EveryKindSeparatesBlobs) {
  const auto train = blobs(80, 6, 1.5, 1);
  const auto test = blobs(40, 6, 1.5, 2);
  for (auto kind : {ClassifierKind::Knn, ClassifierKind::DecisionTree, ClassifierKind::RandomForest,
                    ClassifierKind::NeuralNet}) {
    std::map<std::string, double> hp;
    if (kind == ClassifierKind::RandomForest) hp["n_trees"] = 25;
    const auto c = train_classifier(ClassifierSpec(kind, hp, 3), train.x, train.y, "m");
    EXPECT_EQ(c.feature_dim(), 6);
    EXPECT_EQ(c.manifest_hash(), "m");
    int correct = 0;
    for (std::size_t i = 0; i < test.x.size(); ++i) {
      const double s = c.score(test.x[i]);
      ASSERT_GE(s, 0.0);
      ASSERT_LE(s, 1.0);
      correct += (s >= 0.5) == (test.y[i] == Label::PD);
    }
    EXPECT_GE(correct, 36) << to_string(kind);
  }
}

TEST(Classifiers, TreeFitsTrainingSet) {
  const auto d = blobs(50, 3, 0.3, 5);
  const auto c = train_classifier(ClassifierSpec(ClassifierKind::DecisionTree), d.x, d.y);
  for (std::size_t i = 0; i < d.x.size(); ++i) EXPECT_EQ(c.score(d.x[i]) >= 0.5, d.y[i] == Label::PD);
}

TEST(Classifiers, SeededAndDeterministic) {
  const auto d = blobs(60, 4, 0.5, 7);
  const ClassifierSpec a(ClassifierKind::RandomForest, {{"n_trees", 15}}, 11);
  const auto c1 = train_classifier(a, d.x, d.y);
  const auto c2 = train_classifier(a, d.x, d.y);
  const auto c3 = train_classifier(ClassifierSpec(ClassifierKind::RandomForest, {{"n_trees", 15}}, 12), d.x, d.y);
  bool differs = false;
  for (const auto& row : blobs(30, 4, 0.5, 8).x) {
    EXPECT_EQ(c1.score(row), c2.score(row));
    differs |= c1.score(row) != c3.score(row);
  }
  EXPECT_TRUE(differs);
}

TEST(Classifiers, TrainingErrors) {
  const ClassifierSpec spec(ClassifierKind::Knn);
  EXPECT_EQ(code_of([&] { train_classifier(spec, std::vector<std::vector<float>>{}, std::vector<Label>{}); }), ErrorCode::EmptyFeatures);
  EXPECT_EQ(code_of([&] { train_classifier(spec, {{1.f}, {2.f}}, {Label::PD, Label::PD}); }),
            ErrorCode::SingleClassTraining);
  EXPECT_EQ(code_of([&] { train_classifier(spec, {{1.f}, {2.f, 3.f}}, {Label::PD, Label::Healthy}); }),
            ErrorCode::DimensionMismatch);
  const auto c = train_classifier(spec, {{1.f}, {2.f}}, {Label::PD, Label::Healthy});
  EXPECT_EQ(code_of([&] { c.score({1.f, 2.f}); }), ErrorCode::DimensionMismatch);
  const TrainedClassifier empty;
  EXPECT_EQ(code_of([&] { predict_tile(empty, FeatureVector{{1.f}, {}, {}}); }), ErrorCode::ModelNotLoaded);
}

TEST(Classifiers, CheckpointRoundTrip) {
  TempDir dir("cls");
  const auto d = blobs(40, 5, 1.0, 3);
  for (auto kind : {ClassifierKind::Knn, ClassifierKind::DecisionTree, ClassifierKind::RandomForest,
                    ClassifierKind::NeuralNet}) {
    std::map<std::string, double> hp;
    if (kind == ClassifierKind::RandomForest) hp["n_trees"] = 7;
    if (kind == ClassifierKind::NeuralNet) hp["epochs"] = 20;
    const auto c = train_classifier(ClassifierSpec(kind, hp, 2), d.x, d.y, "mh");
    const auto path = dir / (std::string(to_string(kind)) + ".ckpt");
    save_classifier(c, path, "cfg");
    const auto back = load_classifier(path, 5);
    EXPECT_EQ(back.config_hash, "cfg");
    EXPECT_EQ(back.classifier.spec(), c.spec());
    EXPECT_EQ(back.classifier.manifest_hash(), "mh");
    for (const auto& row : d.x) EXPECT_EQ(back.classifier.score(row), c.score(row)) << to_string(kind);
    EXPECT_EQ(code_of([&] { load_classifier(path, 6); }), ErrorCode::DimensionMismatch);
  }
  EXPECT_EQ(code_of([&] { load_classifier(dir / "none.ckpt"); }), ErrorCode::MissingArtifact);
}

TEST(PredictTile, ThresholdAtHalf) {
  const auto c = train_classifier(ClassifierSpec(ClassifierKind::Knn, {{"k", 2}, {"standardize", 0}}),
                                  {{0.f}, {1.f}, {10.f}, {11.f}}, {Label::Healthy, Label::PD, Label::PD, Label::Healthy});
  const auto p = predict_tile(c, FeatureVector{{0.4f}, {}, TileRef{"s", 0, {}}});
  EXPECT_DOUBLE_EQ(p.score, 0.5);
  EXPECT_EQ(p.label, Label::PD);
}

TEST(Vote, MajorityAndTies) {
  auto v = vote({tp("a", 0.9, 0), tp("a", 0.8, 1), tp("a", 0.7, 2), tp("a", 0.1, 3)});
  EXPECT_EQ(v.label, Label::PD);
  EXPECT_EQ(v.pd_votes, 3);
  EXPECT_EQ(v.healthy_votes, 1);
  EXPECT_FALSE(v.tie_broken);
  EXPECT_EQ(v.sample_id, "a");
}

TEST(Vote, TieFollowsMeanScore) {
  // mean 0.45 -> Healthy
  auto v = vote({tp("a", 0.9, 0), tp("a", 0.6, 1), tp("a", 0.2, 2), tp("a", 0.1, 3)});
  EXPECT_TRUE(v.tie_broken);
  EXPECT_EQ(v.label, Label::Healthy);
  EXPECT_NEAR(v.mean_score, 0.45, 1e-12);
  // mean exactly 0.5 -> PD
  v = vote({tp("b", 0.9, 0), tp("b", 0.7, 1), tp("b", 0.3, 2), tp("b", 0.1, 3)});
  EXPECT_TRUE(v.tie_broken);
  EXPECT_EQ(v.label, Label::PD);
}

TEST(Vote, Errors) {
  EXPECT_EQ(code_of([] { vote({}); }), ErrorCode::EmptyVote);
  EXPECT_EQ(code_of([] { vote({tp("a", 0.9), tp("b", 0.1)}); }), ErrorCode::MixedParents);
}

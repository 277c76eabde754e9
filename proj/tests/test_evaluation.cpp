#include <gtest/gtest.h>

#include <set>

#include "chunkpd/evaluation.hpp"
#include "json.hpp"

using namespace chunkpd;

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

Manifest toy(int n, std::uint64_t seed = 0) { return synthesize_toy_manifest(ToyOptions{n, seed, 64, false}); }

// Every unit tested exactly once, train and test disjoint within each fold.
void expect_exhaustive(const SplitPlan& plan, const std::set<std::string>& units) {
  std::multiset<std::string> tested;
  for (const auto& f : plan.folds) {
    const std::set<std::string> train(f.train_ids.begin(), f.train_ids.end());
    for (const auto& id : f.test_ids) {
      EXPECT_FALSE(train.count(id)) << id;
      tested.insert(id);
    }
    EXPECT_EQ(train.size() + f.test_ids.size(), units.size());
  }
  EXPECT_EQ(tested.size(), units.size());
  EXPECT_EQ(std::set<std::string>(tested.begin(), tested.end()), units);
}

std::set<std::string> subject_ids(const Manifest& m) {
  std::set<std::string> s;
  for (const auto& r : m.subjects) s.insert(r.subject_id);
  return s;
}

// Runner predicting the truth except for samples listed in `wrong`.
FoldRunner oracle_runner(const Manifest& m, std::set<std::string> wrong = {}) {
  return [&m, wrong](const FoldSamples& fs, std::size_t fold) {
    std::vector<EvaluatedImage> out;
    for (const auto i : fs.test) {
      const auto& s = m.samples[i];
      EvaluatedImage e;
      e.fold = fold;
      e.sample_id = s.sample_id;
      e.subject_id = s.subject_id;
      e.true_type = s.drawing_type;
      e.truth = s.label;
      e.prediction.sample_id = s.sample_id;
      const bool flip = wrong.count(s.sample_id) > 0;
      e.prediction.label = flip ? (s.label == Label::PD ? Label::Healthy : Label::PD) : s.label;
      e.prediction.pd_votes = e.prediction.label == Label::PD ? 4 : 0;
      e.prediction.healthy_votes = 4 - e.prediction.pd_votes;
      e.prediction.routed_type = s.drawing_type;
      out.push_back(e);
    }
    return out;
  };
}

ReportMeta meta() {
  ReportMeta m;
  m.config_fingerprint = "cfg";
  for (auto t : kDrawingTypes) m.labels[t] = {"ResNet", "KNN"};
  return m;
}

}  // namespace

TEST(Split, ImgCv5CoversEverySampleOnce) {
  const auto m = toy(10, 1);
  const auto plan = make_split(m, SplitStrategy::ImgCv5, 3);
  EXPECT_EQ(plan.granularity, Granularity::Image);
  ASSERT_EQ(plan.folds.size(), 5u);
  std::set<std::string> ids;
  for (const auto& s : m.samples) ids.insert(s.sample_id);
  expect_exhaustive(plan, ids);
  // every fold tests every drawing type
  for (std::size_t f = 0; f < 5; ++f) {
    std::set<DrawingType> types;
    for (const auto i : fold_samples(plan, f, m).test) types.insert(m.samples[i].drawing_type);
    EXPECT_EQ(types.size(), 3u);
  }
}

TEST(Split, ImgCv5LeaksSubjects) {
  const auto m = toy(10, 1);
  EXPECT_GT(audit_leakage(make_split(m, SplitStrategy::ImgCv5, 0), m).total(), 0u);
}

TEST(Split, IndCv5IsSubjectPure) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = toy(12, seed);
    const auto plan = make_split(m, SplitStrategy::IndCv5, seed);
    EXPECT_EQ(plan.granularity, Granularity::Subject);
    EXPECT_EQ(plan.folds.size(), 5u);
    expect_exhaustive(plan, subject_ids(m));
    EXPECT_EQ(audit_leakage(plan, m).total(), 0u);
  }
}

TEST(Split, LoioOneFoldPerSubject) {
  const auto m = toy(10, 2);
  const auto plan = make_split(m, SplitStrategy::Loio, 0);
  ASSERT_EQ(plan.folds.size(), 10u);
  EXPECT_EQ(plan.folds[0].test_ids, std::vector<std::string>{"S001"});
  expect_exhaustive(plan, subject_ids(m));
  EXPECT_EQ(audit_leakage(plan, m).total(), 0u);
  const auto fs = fold_samples(plan, 3, m);
  EXPECT_EQ(fs.test.size(), 9u);
  EXPECT_EQ(fs.train.size(), 81u);
}

TEST(Split, DeterministicPerSeed) {
  const auto m = toy(15, 0);
  const auto a = make_split(m, SplitStrategy::IndCv5, 4);
  EXPECT_EQ(a.hash(), make_split(m, SplitStrategy::IndCv5, 4).hash());
  EXPECT_NE(a.hash(), make_split(m, SplitStrategy::IndCv5, 5).hash());
  EXPECT_NE(a.hash(), make_split(m, SplitStrategy::ImgCv5, 4).hash());
}

TEST(Split, Errors) {
  EXPECT_EQ(code_of([] { make_split(toy(4), SplitStrategy::IndCv5, 0); }), ErrorCode::TooFewSubjects);
  auto one = toy(3);
  for (auto& s : one.samples) s.label = Label::PD;
  for (auto& s : one.subjects) s.label = Label::PD;
  EXPECT_EQ(code_of([&] { make_split(one, SplitStrategy::Loio, 0); }), ErrorCode::DegenerateFold);
  const auto m = toy(6);
  auto plan = make_split(m, SplitStrategy::Loio, 0);
  plan.folds[0].test_ids.push_back("S999");
  EXPECT_EQ(code_of([&] { fold_samples(plan, 0, m); }), ErrorCode::UnknownId);
  EXPECT_EQ(code_of([&] { audit_leakage(plan, m); }), ErrorCode::UnknownId);
}

// Known confusion counts and their rounded metrics.
TEST(Metrics, KnownCountsRow) {
  const auto m = compute_metrics(ConfusionCounts{32, 4, 30, 0});
  EXPECT_NEAR(*m.accuracy, 0.939, 5e-4);
  EXPECT_NEAR(*m.precision, 0.889, 5e-4);
  EXPECT_NEAR(*m.recall, 1.000, 5e-4);
  EXPECT_NEAR(*m.f1, 0.941, 5e-4);
}

TEST(Metrics, UndefinedRatiosAreEmpty) {
  const auto m = compute_metrics(ConfusionCounts{0, 0, 5, 3});
  EXPECT_DOUBLE_EQ(*m.accuracy, 5.0 / 8.0);
  EXPECT_FALSE(m.precision);
  EXPECT_DOUBLE_EQ(*m.recall, 0.0);
  EXPECT_FALSE(m.f1);
  const auto empty = compute_metrics(ConfusionCounts{});
  EXPECT_FALSE(empty.accuracy);
}

TEST(Metrics, Identities) {
  for (std::size_t tp = 0; tp < 6; ++tp) {
    for (std::size_t fp = 0; fp < 6; ++fp) {
      const ConfusionCounts c{tp, fp, 3, 2};
      const auto m = compute_metrics(c);
      if (m.precision && m.recall && m.f1) {
        EXPECT_NEAR(*m.f1, 2 * *m.precision * *m.recall / (*m.precision + *m.recall), 1e-9);
      }
      EXPECT_NEAR(*m.accuracy, (tp + 3.0) / (tp + fp + 5.0), 1e-9);
    }
  }
}

TEST(Metrics, FromPredictions) {
  std::vector<ScoredPrediction> p(3);
  p[0].prediction.label = Label::PD;
  p[0].truth = Label::PD;
  p[1].prediction.label = Label::PD;
  p[1].truth = Label::Healthy;
  p[2].prediction.label = Label::Healthy;
  p[2].truth = Label::Healthy;
  const auto m = compute_metrics(p);
  EXPECT_EQ(m.counts, (ConfusionCounts{1, 1, 1, 0}));
  EXPECT_EQ(code_of([] { compute_metrics(std::vector<ScoredPrediction>{}); }), ErrorCode::EmptyPredictions);
}

TEST(WeightedAccuracy, EqualsPooledAndErrors) {
  EXPECT_NEAR(weighted_accuracy({{1.0, 66}, {0.5, 264}, {0.75, 264}}), (66 + 132 + 198) / 594.0, 1e-12);
  EXPECT_EQ(code_of([] { weighted_accuracy({}); }), ErrorCode::EmptyInput);
  EXPECT_EQ(code_of([] { weighted_accuracy({{0.9, 0}}); }), ErrorCode::InvalidArgument);
}

TEST(Report, PerfectRunnerAndConsistency) {
  const auto m = toy(10, 3);
  const auto plan = make_split(m, SplitStrategy::IndCv5, 0);
  const std::set<std::string> wrong{"S001_spiral_0", "S002_meander_1", "S003_circle_0"};
  const auto r = evaluate_plan(m, plan, oracle_runner(m, wrong), meta());
  EXPECT_EQ(r.images.size(), 90u);
  EXPECT_EQ(r.folds.size(), 5u);
  EXPECT_EQ(r.leakage.total(), 0u);
  EXPECT_DOUBLE_EQ(*r.type_accuracy, 1.0);
  std::vector<std::pair<double, std::size_t>> rows;
  ConfusionCounts pooled;
  for (const auto& [t, tr] : r.per_type) {
    rows.emplace_back(*tr.metrics.accuracy, tr.metrics.counts.total());
    pooled += tr.metrics.counts;
  }
  EXPECT_NEAR(*r.weighted_accuracy, weighted_accuracy(rows), 1e-9);
  EXPECT_NEAR(*r.weighted_accuracy, 87.0 / 90.0, 1e-9);
  EXPECT_EQ(pooled.total(), 90u);

  const auto csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "BB,Draw/Cls,Acc,Prec,Rec,F1,TP,FP,TN,FN,Aug,Chnk");
  EXPECT_NE(csv.find("ResNet,Circ-KNN,0.900,"), std::string::npos);
  EXPECT_NE(csv.find(",Yes,2x2\n"), std::string::npos);
  EXPECT_NE(csv.find("Weighted Avg,,96.67"), std::string::npos);

  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["config_hash"], "cfg");
  EXPECT_EQ(j["split_hash"], plan.hash());
}

TEST(Report, RunnerMustAnswerEveryTestImage) {
  const auto m = toy(6, 0);
  const auto plan = make_split(m, SplitStrategy::Loio, 0);
  const FoldRunner bad = [](const FoldSamples&, std::size_t) { return std::vector<EvaluatedImage>{}; };
  EXPECT_EQ(code_of([&] { evaluate_plan(m, plan, bad, meta()); }), ErrorCode::InvalidArgument);
}

TEST(Ablation, FourPairedRows) {
  const auto m = toy(10, 0);
  const CellRunnerFactory factory = [&](const AblationCell& cell) {
    std::set<std::string> wrong;
    if (!cell.chunking) wrong.insert("S001_spiral_0");
    if (!cell.augmentation) wrong.insert("S002_spiral_0");
    auto mt = meta();
    mt.grid_n = cell.chunking ? 2 : 1;
    mt.augmentation = cell.augmentation;
    return std::make_pair(oracle_runner(m, wrong), mt);
  };
  const auto table = run_ablation(m, full_ablation_matrix(), 7, factory);
  ASSERT_EQ(table.rows.size(), 4u);
  EXPECT_TRUE(table.rows[0].reference);
  EXPECT_DOUBLE_EQ(*table.rows[0].delta, 0.0);
  EXPECT_NEAR(*table.rows[3].delta, -2.0 / 90.0, 1e-12);
  for (const auto& r : table.rows) {
    EXPECT_EQ(r.report.split_hash, table.rows[0].report.split_hash);
    EXPECT_EQ(r.report.strategy, SplitStrategy::IndCv5);
  }
  EXPECT_NE(table.to_csv().find("TieBroken"), std::string::npos);
  EXPECT_TRUE(run_ablation(m, {}, 7, factory).rows.empty());
}

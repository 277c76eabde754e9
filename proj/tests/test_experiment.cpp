#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "chunkpd/experiment.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace chunkpd;
using chunkpd::testing_util::TempDir;
namespace fs = std::filesystem;

namespace {

template <typename F>
Error error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no exception";
  return Error(ErrorCode::InvalidArgument, "none");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small, fast configuration: light trunks, 1x1 grid, KNN everywhere.
ExperimentConfig tiny(const fs::path& out, int subjects = 6) {
  ExperimentConfig c;
  c.dataset.toy = ToyOptions{subjects, 5, 160};
  c.grid = 1;
  c.stage1_variant = "resnet10";
  c.stage1.epochs = 30;
  c.stage1.learning_rate = 1e-2;
  c.finetune.epochs = 2;
  for (auto t : kDrawingTypes) c.types[t] = TypeConfig{EncoderId::residual("resnet10"), ClassifierSpec(ClassifierKind::Knn)};
  c.output_dir = out;
  return c;
}

}  // namespace

TEST(Config, DefaultsFollowBestReportedSetup) {
  const ExperimentConfig c;
  EXPECT_EQ(c.grid, 2);
  EXPECT_TRUE(c.augment);
  EXPECT_EQ(c.strategy, SplitStrategy::IndCv5);
  EXPECT_EQ(c.types.at(DrawingType::Circle).classifier.kind, ClassifierKind::Knn);
  EXPECT_EQ(c.types.at(DrawingType::Meander).classifier.kind, ClassifierKind::RandomForest);
  EXPECT_EQ(c.types.at(DrawingType::Spiral).encoder.kind, EncoderKind::HybridConcat);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny("runs_x");
  c.types[DrawingType::Meander].classifier = ClassifierSpec(ClassifierKind::RandomForest, {{"n_trees", 30}}, 4);
  c.strategy = SplitStrategy::Loio;
  c.seed = 99;
  c.augmentation.noise_sigma = 0.01;
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.types.at(DrawingType::Meander).classifier.get("n_trees"), 30);
  EXPECT_EQ(back.output_dir, "runs_x");
}

TEST(Config, PartialDocumentsKeepDefaults) {
  const auto c = ExperimentConfig::from_json(R"({"dataset": {"toy": {"n_subjects": 8}}, "seed": 3})");
  EXPECT_EQ(c.dataset.toy->n_subjects, 8);
  EXPECT_EQ(c.dataset.toy->image_side, 512);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.types, default_type_configs());
}

TEST(Config, ErrorsNameTheField) {
  const auto expect_field = [](const std::string& doc, const std::string& field) {
    const auto e = error_of([&] { ExperimentConfig::from_json(doc); });
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
  };
  expect_field(R"({"types": {"circle": {"classifier": {"kind": "svm"}}}})", "types.circle.classifier.kind");
  expect_field(R"({"grdi": 2})", "grdi");
  expect_field(R"({"grid": 5})", "grid");
  expect_field(R"({"augmentation": {"repeats": {"circle": 0}}})", "augmentation");
  expect_field(R"({"types": {"spiral": {"encoder": {"kind": "hybrid_concat", "variant": "resnet18"}}}})",
               "types.spiral.encoder.variant");
  expect_field(R"({"types": {"meander": {"classifier": {"kind": "knn", "hyperparams": {"k": -1}}}}})",
               "types.meander.classifier");
  expect_field(R"({"strategy": "cv10"})", "strategy");
  expect_field(R"({"stage1": {"input_side": 16}})", "stage1.input_side");
  expect_field(R"({"finetune": {"weight_decay": -1}})", "finetune.weight_decay");
  expect_field(R"({"grid": 1, "stage1": {"input_side": 448}})", "stage1.input_side");
  expect_field(R"({"seed": -4})", "seed");
  expect_field(R"({"finetune": {"learning_rate": "fast"}})", "finetune.learning_rate");
  expect_field(R"({"dataset": {"toy": {"n_subjects": 4}, "root": "x"}})", "dataset");
  expect_field("{not json", "JSON");
}

TEST(Config, HashCoversEveryResultField) {
  const auto base = tiny("out");
  std::set<std::string> hashes{base.hash()};
  const std::vector<std::function<void(ExperimentConfig&)>> mutations = {
      [](auto& c) { c.dataset.toy->seed = 6; },
      [](auto& c) { c.dataset.toy->n_subjects = 7; },
      [](auto& c) { c.grid = 2; },
      [](auto& c) { c.augment = false; },
      [](auto& c) { c.augmentation.noise_sigma = 0.002; },
      [](auto& c) { c.augmentation.repeats[DrawingType::Circle] = 8; },
      [](auto& c) { c.stage1.epochs = 31; },
      [](auto& c) { c.stage1_variant = "resnet18"; },
      [](auto& c) { c.stage1_input_side = 160; },
      [](auto& c) { c.finetune.learning_rate = 2e-4; },
      [](auto& c) { c.finetune.seed = 1; },
      [](auto& c) { c.finetune.weight_decay = 1e-3; },
      [](auto& c) { c.stage1.weight_decay = 0.0; },
      [](auto& c) { c.backbones.seed = 1; },
      [](auto& c) { c.types[DrawingType::Spiral].encoder = EncoderId::pyramid(); },
      [](auto& c) { c.types[DrawingType::Circle].classifier = ClassifierSpec(ClassifierKind::Knn, {{"k", 3}}); },
      [](auto& c) { c.types[DrawingType::Circle].classifier.seed = 2; },
      [](auto& c) { c.strategy = SplitStrategy::ImgCv5; },
      [](auto& c) { c.seed = 1; },
  };
  for (const auto& m : mutations) {
    auto c = base;
    m(c);
    EXPECT_TRUE(hashes.insert(c.hash()).second);
  }
  auto moved = base;
  moved.output_dir = "elsewhere";
  moved.threads = 3;
  EXPECT_EQ(moved.hash(), base.hash());
  // explicitly spelling out a default hyperparameter does not change the fingerprint
  auto spelled = base;
  spelled.types[DrawingType::Circle].classifier = ClassifierSpec(ClassifierKind::Knn, {{"k", 5}});
  EXPECT_EQ(spelled.hash(), base.hash());
}

TEST(RunDir, NamedByConfigHash) {
  const auto c = tiny("out");
  EXPECT_EQ(run_directory(c), fs::path("out") / c.hash().substr(0, 16));
}

TEST(RunDir, LockIsExclusive) {
  TempDir dir("lock");
  {
    RunLock lock(dir.path());
    EXPECT_EQ(error_of([&] { RunLock second(dir.path()); }).code(), ErrorCode::RunLocked);
  }
  EXPECT_NO_THROW(RunLock again(dir.path()));
}

TEST(RunDir, RecordRoundTripAndVerification) {
  TempDir dir("record");
  RunRecord r;
  r.config_hash = "abc";
  r.created = "2026-01-01T00:00:00Z";
  r.updated = r.created;
  r.environment = environment_descriptor();
  std::ofstream(dir / "good.json") << R"({"config_hash": "abc"})";
  std::ofstream(dir / "other.json") << R"({"config_hash": "xyz"})";
  std::ofstream(dir / "table.tsv") << "#header\tconfig_hash=abc\nrow\n";
  r.artifacts = {{"good", "good.json"}, {"table", "table.tsv"}};
  EXPECT_TRUE(verify_run_record(r, dir.path()).empty());
  r.artifacts["other"] = "other.json";
  r.artifacts["gone"] = "gone.bin";
  EXPECT_EQ(verify_run_record(r, dir.path()).size(), 2u);
  r.save(dir.path());
  const auto back = RunRecord::load(dir.path());
  EXPECT_EQ(back.artifacts, r.artifacts);
  EXPECT_EQ(back.environment, r.environment);
  EXPECT_FALSE(back.environment.at("compiler").empty());
}

TEST(Commands, IngestToyIsReproducible) {
  TempDir dir("ingest");
  DatasetConfig ds;
  ds.toy = ToyOptions{10, 7, 96};
  const auto a = cmd_ingest(ds, dir / "a");
  EXPECT_EQ(a.manifest.samples.size(), 90u);
  EXPECT_TRUE(a.violations.empty());
  const auto b = cmd_ingest(ds, dir / "a");
  EXPECT_EQ(slurp(a.manifest_path), slurp(b.manifest_path));
  const auto back = read_manifest(a.manifest_path);
  EXPECT_EQ(back.manifest.samples.size(), 90u);
  EXPECT_TRUE(back.manifest.samples.front().image);
  DatasetConfig missing;
  missing.root = dir / "nope";
  EXPECT_EQ(error_of([&] { cmd_ingest(missing, dir / "b"); }).code(), ErrorCode::MissingRoot);
}

TEST(Commands, EvaluateBeforeTrainIsMissingArtifact) {
  TempDir dir("order");
  const auto c = tiny(dir.path());
  EXPECT_EQ(error_of([&] { cmd_evaluate(c); }).code(), ErrorCode::MissingArtifact);
  EXPECT_EQ(error_of([&] { cmd_report(c); }).code(), ErrorCode::MissingArtifact);
}

TEST(Commands, TrainEvaluateAblateReport) {
  TempDir dir("e2e");
  const auto c = tiny(dir.path());
  const auto trained = cmd_train(c);
  std::size_t checkpoints = 0;
  for (const auto& [name, rel] : trained.record.artifacts) checkpoints += fs::path(rel).extension() == ".ckpt";
  EXPECT_EQ(checkpoints, 7u);  // stage 1 + 3 encoders + 3 classifiers
  EXPECT_TRUE(verify_run_record(trained.record, trained.run_dir).empty());

  const auto evaluated = cmd_evaluate(c);
  const auto report = nlohmann::json::parse(slurp(evaluated.run_dir / "reports/metrics_ind_cv5.json"));
  EXPECT_EQ(report["config_hash"], c.hash());
  double num = 0, den = 0;
  for (const auto& [type, row] : report["per_type"].items()) {
    const auto& m = row;
    const double n = m["tp"].get<double>() + m["fp"].get<double>() + m["tn"].get<double>() + m["fn"].get<double>();
    num += m["accuracy"].get<double>() * n;
    den += n;
  }
  EXPECT_EQ(den, 54.0);
  EXPECT_NEAR(report["weighted_accuracy"].get<double>(), num / den, 1e-9);
  EXPECT_EQ(report["leakage"]["total_shared"], 0);

  const auto loio = cmd_evaluate(c, SplitStrategy::Loio);
  const auto lr = nlohmann::json::parse(slurp(loio.run_dir / "reports/metrics_loio.json"));
  EXPECT_EQ(lr["folds"].size(), 6u);

  const auto ablated = cmd_ablate(c);
  const auto table = nlohmann::json::parse(slurp(ablated.run_dir / "reports/ablation.json"));
  ASSERT_EQ(table["rows"].size(), 4u);
  EXPECT_TRUE(table["rows"][0]["reference"].get<bool>());
  for (const auto& row : table["rows"]) {
    EXPECT_EQ(row["split_hash"], table["rows"][0]["split_hash"]);
    EXPECT_TRUE(row.contains("tie_broken"));
  }

  const auto text = cmd_report(c);
  EXPECT_NE(text.find("BB,Draw/Cls,Acc,Prec,Rec,F1,TP,FP,TN,FN,Aug,Chnk"), std::string::npos);
  EXPECT_EQ(text.find("WARNING"), std::string::npos) << text;
  EXPECT_TRUE(verify_run_record(RunRecord::load(ablated.run_dir), ablated.run_dir).empty());
  EXPECT_FALSE(fs::exists(ablated.run_dir / "run.lock"));
}

// Two runs of one config in separate output directories produce identical reports.
TEST(Commands, Determinism) {
  TempDir dir("det");
  auto a = tiny(dir / "a", 5);
  auto b = tiny(dir / "b", 5);
  b.threads = 1;
  cmd_train(a);
  cmd_train(b);
  const auto ra = cmd_evaluate(a);
  const auto rb = cmd_evaluate(b);
  for (const std::string f : {"reports/metrics_ind_cv5.json", "reports/metrics_ind_cv5.csv", "manifest.tsv",
                              "checkpoints/classifier_spiral.ckpt", "checkpoints/stage1.ckpt"}) {
    EXPECT_EQ(slurp(ra.run_dir / f), slurp(rb.run_dir / f)) << f;
  }
}

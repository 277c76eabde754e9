// chunkpd: experiment lifecycle from the command line.
//
//   chunkpd ingest --toy 10 --seed 7 --out data
//   chunkpd train --config exp.json
//   chunkpd evaluate --config exp.json --strategy loio
//
// Exit codes: 0 success, 1 validation failure, 2 missing artifact, 3 training failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "chunkpd/experiment.hpp"

namespace {

using namespace chunkpd;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingArtifact:
      return 2;
    case ErrorCode::EmptyTrainingSet:
    case ErrorCode::DivergedLoss:
    case ErrorCode::SingleClassTraining:
    case ErrorCode::EmptyFeatures:
      return 3;
    default:
      return 1;
  }
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<unsigned> threads;

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config,-c", config, "experiment config (JSON)")->check(CLI::ExistingFile);
    if (config_required) opt->required();
    cmd->add_option("--seed", seed, "override the experiment seed");
    cmd->add_option("--out", out, "override the output directory");
    cmd->add_option("--threads", threads, "worker threads (0 = all cores); results do not depend on it");
  }

  ExperimentConfig load() const {
    auto c = ExperimentConfig::load(config);
    if (seed) c.seed = *seed;
    if (!out.empty()) c.output_dir = out;
    if (threads) c.threads = *threads;
    return c;
  }
};

void print(const CommandResult& r) {
  for (const auto& m : r.messages) std::cout << m << "\n";
  std::cout << "run: " << r.run_dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chunk-based Parkinson's detection from hand-drawn images"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CHUNKPD_CLI_VERSION));

  auto* ingest = app.add_subcommand("ingest", "build a manifest from a directory, a manifest file or the toy generator");
  Common ingest_opts;
  std::optional<int> toy;
  std::string root, layout;
  int image_side = 512;
  ingest->add_option("--config,-c", ingest_opts.config, "take the dataset section from this config")
      ->check(CLI::ExistingFile);
  ingest->add_option("--toy", toy, "generate a synthetic corpus of N subjects")->check(CLI::PositiveNumber);
  ingest->add_option("--seed", ingest_opts.seed, "toy generator seed");
  ingest->add_option("--image-side", image_side, "toy image side in pixels")->check(CLI::Range(64, 4096));
  ingest->add_option("--root", root, "dataset directory");
  ingest->add_option("--layout", layout, "layout descriptor for --root");
  ingest->add_option("--out", ingest_opts.out, "output directory")->default_val("data");

  Common pre_opts, train_opts, eval_opts, ablate_opts, report_opts;
  auto* preprocess = app.add_subcommand("preprocess", "write the training and inference tile caches");
  pre_opts.attach(preprocess);
  auto* train = app.add_subcommand("train", "train stage 1 and the per-type encoders and classifiers");
  train_opts.attach(train);
  auto* evaluate = app.add_subcommand("evaluate", "cross-validated metrics report");
  eval_opts.attach(evaluate);
  std::string strategy;
  evaluate->add_option("--strategy", strategy, "img_cv5 | ind_cv5 | loio (default: from the config)")
      ->check(CLI::IsMember({"img_cv5", "ind_cv5", "loio"}));
  auto* ablate = app.add_subcommand("ablate", "chunking x augmentation ablation table");
  ablate_opts.attach(ablate);
  auto* report = app.add_subcommand("report", "print the reports of a run");
  report_opts.attach(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*ingest) {
      DatasetConfig ds;
      if (!ingest_opts.config.empty()) ds = ExperimentConfig::load(ingest_opts.config).dataset;
      if (toy) ds = DatasetConfig{{}, {}, {}, ToyOptions{*toy, ingest_opts.seed.value_or(0), image_side}};
      if (!root.empty()) ds = DatasetConfig{{}, root, layout, std::nullopt};
      if (toy && !root.empty()) throw Error(ErrorCode::InvalidConfig, "--toy and --root are exclusive");
      const auto o = cmd_ingest(ds, ingest_opts.out);
      for (const auto& i : o.issues) std::cerr << "skipped " << i.path << ": " << i.reason << "\n";
      for (const auto& v : o.violations) {
        std::cerr << "violation " << to_string(v.kind) << " " << v.record << ": " << v.detail << "\n";
      }
      std::cout << o.manifest.samples.size() << " samples from " << o.manifest.subjects.size() << " subjects -> "
                << o.manifest_path.string() << "\n";
      return o.violations.empty() ? 0 : 1;
    }
    if (*preprocess) print(cmd_preprocess(pre_opts.load()));
    if (*train) print(cmd_train(train_opts.load()));
    if (*evaluate) {
      std::optional<SplitStrategy> st;
      if (!strategy.empty()) st = parse_split_strategy(strategy);
      print(cmd_evaluate(eval_opts.load(), st));
    }
    if (*ablate) print(cmd_ablate(ablate_opts.load()));
    if (*report) std::cout << cmd_report(report_opts.load());
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

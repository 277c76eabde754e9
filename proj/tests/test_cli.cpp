#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "test_util.hpp"

using chunkpd::testing_util::TempDir;

namespace {

struct Outcome {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(CHUNKPD_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf{};
  while (const auto n = std::fread(buf.data(), 1, buf.size(), pipe)) o.output.append(buf.data(), n);
  const int raw = ::pclose(pipe);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return o;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help").status, 0);
  EXPECT_EQ(run("frobnicate").status, 1);
  EXPECT_EQ(run("evaluate --config /definitely/not/here.json").status, 1);
}

TEST(Cli, IngestToy) {
  TempDir dir("cli_ingest");
  const auto o = run("ingest --toy 3 --seed 2 --image-side 64 --out " + dir.path().string());
  EXPECT_EQ(o.status, 0) << o.output;
  EXPECT_NE(o.output.find("27 samples from 3 subjects"), std::string::npos) << o.output;
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.tsv"));
}

TEST(Cli, MissingRootIsReported) {
  TempDir dir("cli_root");
  const auto o = run("ingest --root " + (dir / "missing").string() + " --out " + (dir / "o").string());
  EXPECT_EQ(o.status, 1);
  EXPECT_NE(o.output.find("MissingRoot"), std::string::npos) << o.output;
}

TEST(Cli, InvalidConfigNamesField) {
  TempDir dir("cli_cfg");
  std::ofstream(dir / "bad.json") << R"({"types": {"circle": {"classifier": {"kind": "svm"}}}})";
  const auto o = run("train --config " + (dir / "bad.json").string());
  EXPECT_EQ(o.status, 1);
  EXPECT_NE(o.output.find("types.circle.classifier.kind"), std::string::npos) << o.output;
}

TEST(Cli, EvaluateBeforeTrainIsMissingArtifact) {
  TempDir dir("cli_order");
  std::ofstream(dir / "exp.json") << R"({"dataset": {"toy": {"n_subjects": 2, "image_side": 64}}})";
  const auto o = run("evaluate --config " + (dir / "exp.json").string() + " --out " + (dir / "runs").string());
  EXPECT_EQ(o.status, 2) << o.output;
  EXPECT_NE(o.output.find("train"), std::string::npos);
}

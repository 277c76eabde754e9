#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "chunkpd/dataset.hpp"
#include "test_util.hpp"

using namespace chunkpd;
using chunkpd::testing_util::TempDir;

namespace {

Manifest small_toy(int n = 4, std::uint64_t seed = 1) { return synthesize_toy_manifest(ToyOptions{n, seed, 96}); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Toy, TenSubjectsGiveNinetySamples) {
  const auto m = synthesize_toy_manifest(ToyOptions{10, 7, 64, false});
  EXPECT_EQ(m.samples.size(), 90u);
  EXPECT_EQ(m.subjects.size(), 10u);
  EXPECT_EQ(m.counts.per_type.at(DrawingType::Circle), 10u);
  EXPECT_EQ(m.counts.per_type.at(DrawingType::Meander), 40u);
  EXPECT_EQ(m.counts.per_type.at(DrawingType::Spiral), 40u);
  std::size_t pd = 0;
  for (const auto& s : m.subjects) pd += s.label == Label::PD;
  EXPECT_EQ(pd, static_cast<std::size_t>(toy_pd_count(10)));
}

TEST(Toy, PdShareFollowsReferenceCorpus) {
  EXPECT_EQ(toy_pd_count(66), 31);
  EXPECT_EQ(toy_pd_count(2), 1);
  EXPECT_EQ(toy_pd_count(20), 9);
}

TEST(Toy, DeterministicPerSeed) {
  EXPECT_EQ(small_toy(4, 3).digest(), small_toy(4, 3).digest());
  EXPECT_NE(small_toy(4, 3).digest(), small_toy(4, 4).digest());
}

TEST(Toy, ImagesAreValidAndQuantised) {
  const auto m = small_toy();
  EXPECT_TRUE(validate_manifest(m).empty());
  for (const auto& s : m.samples) {
    ASSERT_TRUE(s.image);
    EXPECT_EQ(s.image->channels, 3);
    for (float v : s.image->pixels) {
      const float q = v * 255.0f;
      ASSERT_NEAR(q, std::round(q), 1e-3f);
    }
  }
}

TEST(Toy, NeedsBothLabels) {
  EXPECT_THROW(
      {
        try {
          synthesize_toy_manifest(ToyOptions{1, 0, 64});
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), ErrorCode::TooFewSubjects);
          throw;
        }
      },
      Error);
}

TEST(ManifestFile, RoundTripWithImages) {
  TempDir dir("manifest");
  auto m = small_toy();
  export_images(m, dir / "images");
  m.root = "images";
  write_manifest(m, dir / "manifest.tsv", "abc123");
  const auto back = read_manifest(dir / "manifest.tsv");
  EXPECT_EQ(back.config_hash, "abc123");
  ASSERT_EQ(back.manifest.samples.size(), m.samples.size());
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    EXPECT_EQ(back.manifest.samples[i].sample_id, m.samples[i].sample_id);
    ASSERT_TRUE(back.manifest.samples[i].image);
    EXPECT_EQ(*back.manifest.samples[i].image, *m.samples[i].image) << m.samples[i].sample_id;
  }
  EXPECT_EQ(back.manifest.digest(), m.digest());
}

TEST(ManifestFile, SerialisationIsByteStable) {
  TempDir dir("stable");
  const auto m = small_toy();
  write_manifest(m, dir / "a.tsv");
  write_manifest(small_toy(), dir / "b.tsv");
  EXPECT_EQ(slurp(dir / "a.tsv"), slurp(dir / "b.tsv"));
}

TEST(ManifestFile, RejectsMissingHeader) {
  TempDir dir("bad");
  std::ofstream(dir / "m.tsv") << "sample_id\tsubject_id\n";
  EXPECT_THROW(read_manifest(dir / "m.tsv", false), Error);
  EXPECT_THROW(read_manifest(dir / "absent.tsv", false), Error);
}

TEST(Validation, DetectsDuplicatesAndLabelMismatch) {
  auto m = synthesize_toy_manifest(ToyOptions{3, 0, 64, false});
  m.samples[1].sample_id = m.samples[0].sample_id;
  m.samples[2].label = m.samples[2].label == Label::PD ? Label::Healthy : Label::PD;
  const auto v = validate_manifest(m);
  bool dup = false, mismatch = false;
  for (const auto& x : v) {
    dup |= x.kind == ViolationKind::DuplicateId;
    mismatch |= x.kind == ViolationKind::LabelMismatch;
  }
  EXPECT_TRUE(dup);
  EXPECT_TRUE(mismatch);
}

TEST(Glob, CapturesSegments) {
  std::vector<std::string> caps;
  ASSERT_TRUE(glob_match("*/*/*_*.*", "PD/S001/circle_0.png", caps));
  EXPECT_EQ(caps, (std::vector<std::string>{"PD", "S001", "circle", "0", "png"}));
  EXPECT_FALSE(glob_match("*.png", "a/b.png", caps));
  EXPECT_TRUE(glob_match("sp?.jpg", "sp1.jpg", caps));
}

TEST(Tokens, DatasetVocabulary) {
  EXPECT_EQ(drawing_type_from_token("Circles"), DrawingType::Circle);
  EXPECT_EQ(drawing_type_from_token("circA"), DrawingType::Circle);
  EXPECT_EQ(drawing_type_from_token("mea3"), DrawingType::Meander);
  EXPECT_EQ(drawing_type_from_token("sp1"), DrawingType::Spiral);
  EXPECT_FALSE(drawing_type_from_token("wave"));
  EXPECT_EQ(label_from_token("Patients"), Label::PD);
  EXPECT_EQ(label_from_token("Controls"), Label::Healthy);
  EXPECT_FALSE(label_from_token("unknown"));
}

TEST(Layout, ParsesRules) {
  const auto l = Layout::parse("# comment\nrule = */*/* ; subject=$2 ; type=$3 ; label=$1\n");
  ASSERT_EQ(l.rules.size(), 1u);
  EXPECT_EQ(l.rules[0].subject, "$2");
  EXPECT_THROW(Layout::parse("rule = * ; subject=$1\n"), Error);
  EXPECT_THROW(Layout::parse("glob = *\n"), Error);
}

TEST(Ingest, MissingRoot) {
  try {
    ingest_directory("/nonexistent/chunkpd/root");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingRoot);
  }
}

TEST(Ingest, ExportedToyCorpusRoundTrips) {
  TempDir dir("ingest");
  const auto m = small_toy(3, 2);
  export_images(m, dir.path());
  std::ofstream(dir / "README.txt") << "not an image";
  const auto r = ingest_directory(dir.path(), Layout::standard(), 2);
  ASSERT_EQ(r.manifest.samples.size(), m.samples.size());
  ASSERT_EQ(r.issues.size(), 1u);
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    EXPECT_EQ(r.manifest.samples[i].sample_id, m.samples[i].sample_id);
    EXPECT_EQ(r.manifest.samples[i].label, m.samples[i].label);
    EXPECT_EQ(*r.manifest.samples[i].image, *m.samples[i].image);
  }
  EXPECT_TRUE(validate_manifest(r.manifest).empty());
}

TEST(Ingest, LabelConflict) {
  TempDir dir("conflict");
  const auto m = small_toy(2, 0);
  export_images(m, dir.path());
  // the same subject filed under the other label
  const auto& s = m.samples.front();
  const auto other = s.label == Label::PD ? "Healthy" : "PD";
  std::filesystem::create_directories(dir / (std::string(other) + "/" + s.subject_id));
  std::filesystem::copy_file(dir / s.source_path, dir / (std::string(other) + "/" + s.subject_id + "/spiral_9.png"));
  try {
    ingest_directory(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LabelConflict);
  }
}

TEST(Ingest, UnknownDrawingType) {
  TempDir dir("unknown");
  const auto m = small_toy(2, 0);
  std::filesystem::create_directories(dir / "PD/S001");
  encode_png(*m.samples.front().image, dir / "PD/S001/wave_0.png");
  try {
    ingest_directory(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownDrawingType);
  }
}

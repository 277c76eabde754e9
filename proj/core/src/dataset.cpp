#include "chunkpd/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "chunkpd/hashing.hpp"

namespace chunkpd {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

auto sample_key(const DrawingSample& s) { return std::tie(s.subject_id, s.drawing_type, s.source_path); }

bool is_image_extension(const fs::path& p) {
  static const std::set<std::string> kExt = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  return kExt.contains(lower(p.extension().string()));
}

// Expands $1..$9 in `tmpl` from `captures`.
std::string expand(const std::string& tmpl, const std::vector<std::string>& captures) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '$' && i + 1 < tmpl.size() && std::isdigit(static_cast<unsigned char>(tmpl[i + 1]))) {
      const auto idx = static_cast<std::size_t>(tmpl[i + 1] - '1');
      if (idx < captures.size()) out += captures[idx];
      ++i;
    } else {
      out.push_back(tmpl[i]);
    }
  }
  return out;
}

bool glob_match_impl(std::string_view p, std::string_view t, std::vector<std::string>& caps) {
  if (p.empty()) return t.empty();
  if (p.front() == '*') {
    // Shortest capture first so "circle_*" style patterns split at the first separator.
    for (std::size_t n = 0; n <= t.size(); ++n) {
      if (n > 0 && t[n - 1] == '/') break;
      caps.emplace_back(t.substr(0, n));
      if (glob_match_impl(p.substr(1), t.substr(n), caps)) return true;
      caps.pop_back();
    }
    return false;
  }
  if (t.empty()) return false;
  if (p.front() == '?') {
    if (t.front() == '/') return false;
    return glob_match_impl(p.substr(1), t.substr(1), caps);
  }
  if (p.front() != t.front()) return false;
  return glob_match_impl(p.substr(1), t.substr(1), caps);
}

}  // namespace

// ---------------------------------------------------------------------------

const SubjectRecord* Manifest::find_subject(const std::string& id) const {
  auto it = std::lower_bound(subjects.begin(), subjects.end(), id,
                             [](const SubjectRecord& s, const std::string& key) { return s.subject_id < key; });
  if (it != subjects.end() && it->subject_id == id) return &*it;
  for (const auto& s : subjects) {
    if (s.subject_id == id) return &s;
  }
  return nullptr;
}

const DrawingSample* Manifest::find_sample(const std::string& id) const {
  for (const auto& s : samples) {
    if (s.sample_id == id) return &s;
  }
  return nullptr;
}

std::string Manifest::digest() const {
  Sha256 h;
  h.update(serialize_manifest(*this));
  for (const auto& s : samples) {
    if (s.image) {
      h.update(std::to_string(s.image->height) + "x" + std::to_string(s.image->width) + "x" +
               std::to_string(s.image->channels));
      h.update(std::span<const float>(s.image->pixels));
    }
  }
  return to_hex(h.finish());
}

ManifestCounts tally(const std::vector<DrawingSample>& samples) {
  ManifestCounts c;
  for (auto t : kDrawingTypes) c.per_type[t] = 0;
  c.per_label[Label::Healthy] = 0;
  c.per_label[Label::PD] = 0;
  for (const auto& s : samples) {
    ++c.per_type[s.drawing_type];
    ++c.per_label[s.label];
  }
  return c;
}

void canonicalize(Manifest& m) {
  std::stable_sort(m.subjects.begin(), m.subjects.end(),
                   [](const SubjectRecord& a, const SubjectRecord& b) { return a.subject_id < b.subject_id; });
  std::stable_sort(m.samples.begin(), m.samples.end(),
                   [](const DrawingSample& a, const DrawingSample& b) { return sample_key(a) < sample_key(b); });
  m.counts = tally(m.samples);
}

// ---------------------------------------------------------------------------

Layout Layout::standard() { return Layout{{LayoutRule{"*/*/*_*.*", "$2", "$3", "$1"}}}; }

Layout Layout::parse(const std::string& text) {
  // Each non-comment line: `rule = <glob> ; subject=<tmpl> ; type=<tmpl> ; label=<tmpl>`.
  Layout layout;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos || trim(body.substr(0, eq)) != "rule") {
      throw Error(ErrorCode::FormatError, "layout line " + std::to_string(lineno) + ": expected `rule = ...`");
    }
    const auto parts = split(body.substr(eq + 1), ';');
    LayoutRule rule;
    rule.glob = trim(parts.front());
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const auto kv = trim(parts[i]);
      const auto e = kv.find('=');
      if (e == std::string::npos) {
        throw Error(ErrorCode::FormatError, "layout line " + std::to_string(lineno) + ": bad field `" + kv + "`");
      }
      const auto key = trim(kv.substr(0, e));
      const auto value = trim(kv.substr(e + 1));
      if (key == "subject") {
        rule.subject = value;
      } else if (key == "type" || key == "drawing_type") {
        rule.drawing_type = value;
      } else if (key == "label") {
        rule.label = value;
      } else {
        throw Error(ErrorCode::FormatError, "layout line " + std::to_string(lineno) + ": unknown key `" + key + "`");
      }
    }
    if (rule.glob.empty() || rule.subject.empty() || rule.drawing_type.empty() || rule.label.empty()) {
      throw Error(ErrorCode::FormatError,
                  "layout line " + std::to_string(lineno) + ": rule needs glob, subject, type and label");
    }
    layout.rules.push_back(std::move(rule));
  }
  return layout;
}

Layout Layout::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open layout " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool glob_match(std::string_view pattern, std::string_view text, std::vector<std::string>& captures) {
  captures.clear();
  return glob_match_impl(pattern, text, captures);
}

std::optional<DrawingType> drawing_type_from_token(std::string_view token) {
  const auto t = lower(token);
  if (t.starts_with("circ")) return DrawingType::Circle;
  if (t.starts_with("mea")) return DrawingType::Meander;
  if (t.starts_with("sp")) return DrawingType::Spiral;
  return std::nullopt;
}

std::optional<Label> label_from_token(std::string_view token) {
  const auto t = lower(token);
  if (t == "pd" || t.starts_with("patient") || t.starts_with("parkinson")) return Label::PD;
  if (t == "healthy" || t.starts_with("control")) return Label::Healthy;
  return std::nullopt;
}

IngestResult ingest_directory(const fs::path& root, const Layout& layout, unsigned threads) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw Error(ErrorCode::MissingRoot, "dataset root not found: " + root.string());

  IngestResult result;
  result.manifest.root = fs::weakly_canonical(root);

  std::vector<std::string> files;
  for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
    if (!it->is_regular_file()) continue;
    const auto rel = fs::relative(it->path(), root).generic_string();
    bool hidden = false;
    for (const auto& part : split(rel, '/')) hidden = hidden || (!part.empty() && part.front() == '.');
    if (!hidden) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());

  struct Pending {
    DrawingSample sample;
    std::string stem;
  };
  std::vector<Pending> pending;
  std::vector<std::string> captures;
  for (const auto& rel : files) {
    const LayoutRule* matched = nullptr;
    for (const auto& rule : layout.rules) {
      if (glob_match(rule.glob, rel, captures)) {
        matched = &rule;
        break;
      }
    }
    if (matched == nullptr) {
      result.issues.push_back({rel, "no layout rule matched"});
      continue;
    }
    if (!is_image_extension(rel)) {
      result.issues.push_back({rel, "not an image file"});
      continue;
    }
    const auto type_token = expand(matched->drawing_type, captures);
    const auto type = drawing_type_from_token(type_token);
    if (!type) throw Error(ErrorCode::UnknownDrawingType, "`" + type_token + "` in " + rel);
    const auto label_token = expand(matched->label, captures);
    const auto label = label_from_token(label_token);
    if (!label) {
      result.issues.push_back({rel, "unrecognised label token `" + label_token + "`"});
      continue;
    }
    const auto subject = expand(matched->subject, captures);
    if (subject.empty()) {
      result.issues.push_back({rel, "empty subject id"});
      continue;
    }
    Pending p;
    p.sample.subject_id = subject;
    p.sample.drawing_type = *type;
    p.sample.label = *label;
    p.sample.source_path = rel;
    p.stem = fs::path(rel).stem().string();
    pending.push_back(std::move(p));
  }

  // Decode in parallel; results land at fixed indices so ordering never depends on scheduling.
  std::vector<std::string> errors(pending.size());
  {
    const unsigned n_threads =
        std::max(1u, std::min<unsigned>(threads == 0 ? std::thread::hardware_concurrency() : threads,
                                        static_cast<unsigned>(std::max<std::size_t>(1, pending.size()))));
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i = next++; i < pending.size(); i = next++) {
        try {
          pending[i].sample.image = std::make_shared<const Image>(decode_image(root / pending[i].sample.source_path));
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      }
    };
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(work);
    work();
  }

  std::map<std::string, Label> subject_labels;
  std::map<std::string, int> id_uses;
  std::vector<Pending> decoded;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    if (!errors[i].empty()) {
      result.issues.push_back({pending[i].sample.source_path, "decode failed: " + errors[i]});
      continue;
    }
    auto& s = pending[i].sample;
    auto [it, inserted] = subject_labels.emplace(s.subject_id, s.label);
    if (!inserted && it->second != s.label) {
      throw Error(ErrorCode::LabelConflict, "subject " + s.subject_id + " is mapped to both PD and Healthy (" +
                                                s.source_path + ")");
    }
    ++id_uses[s.subject_id + "_" + pending[i].stem];
    decoded.push_back(std::move(pending[i]));
  }

  for (auto& p : decoded) {
    const auto short_id = p.sample.subject_id + "_" + p.stem;
    if (id_uses[short_id] == 1) {
      p.sample.sample_id = short_id;
    } else {
      auto path_id = fs::path(p.sample.source_path).replace_extension().generic_string();
      std::replace(path_id.begin(), path_id.end(), '/', '_');
      p.sample.sample_id = p.sample.subject_id + "_" + path_id;
    }
    result.manifest.samples.push_back(std::move(p.sample));
  }
  for (const auto& [id, label] : subject_labels) result.manifest.subjects.push_back({id, label, {}});
  canonicalize(result.manifest);
  return result;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::DanglingSubject: return "DanglingSubject";
    case ViolationKind::DuplicateId: return "DuplicateId";
    case ViolationKind::LabelMismatch: return "LabelMismatch";
    case ViolationKind::CountMismatch: return "CountMismatch";
    case ViolationKind::UnorderedRecords: return "UnorderedRecords";
    case ViolationKind::InvalidImage: return "InvalidImage";
  }
  return "?";
}

std::vector<Violation> validate_manifest(const Manifest& m) {
  std::vector<Violation> out;

  std::map<std::string, const SubjectRecord*> subjects;
  std::set<std::string> reported;
  for (const auto& s : m.subjects) {
    if (!subjects.emplace(s.subject_id, &s).second && reported.insert("subject:" + s.subject_id).second) {
      out.push_back({ViolationKind::DuplicateId, s.subject_id, "subject id appears more than once"});
    }
  }

  std::set<std::string> sample_ids;
  for (const auto& s : m.samples) {
    if (!sample_ids.insert(s.sample_id).second && reported.insert("sample:" + s.sample_id).second) {
      out.push_back({ViolationKind::DuplicateId, s.sample_id, "sample id appears more than once"});
    }
    const auto it = subjects.find(s.subject_id);
    if (it == subjects.end()) {
      out.push_back({ViolationKind::DanglingSubject, s.sample_id, "references absent subject " + s.subject_id});
    } else if (it->second->label != s.label) {
      out.push_back({ViolationKind::LabelMismatch, s.sample_id,
                     "label " + std::string(to_string(s.label)) + " differs from subject label " +
                         std::string(to_string(it->second->label))});
    }
    if (s.image) {
      const auto& img = *s.image;
      const bool bad_values = std::any_of(img.pixels.begin(), img.pixels.end(),
                                          [](float v) { return !(v >= 0.0f && v <= 1.0f); });
      if (img.empty() || img.channels != 3 ||
          img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels || bad_values) {
        out.push_back({ViolationKind::InvalidImage, s.sample_id, "image must be non-empty 3-channel in [0,1]"});
      }
    }
  }

  if (tally(m.samples) != m.counts) {
    out.push_back({ViolationKind::CountMismatch, "counts", "stored tallies differ from the sample list"});
  }

  const bool subjects_sorted = std::is_sorted(
      m.subjects.begin(), m.subjects.end(),
      [](const SubjectRecord& a, const SubjectRecord& b) { return a.subject_id < b.subject_id; });
  const bool samples_sorted = std::is_sorted(
      m.samples.begin(), m.samples.end(),
      [](const DrawingSample& a, const DrawingSample& b) { return sample_key(a) < sample_key(b); });
  if (!subjects_sorted || !samples_sorted) {
    out.push_back({ViolationKind::UnorderedRecords, subjects_sorted ? "samples" : "subjects",
                   "records are not in canonical order"});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string serialize_manifest(const Manifest& m, const std::string& config_hash) {
  std::ostringstream out;
  out << "#chunkpd-manifest\tv" << kManifestVersion << "\troot=" << m.root.generic_string();
  if (!config_hash.empty()) out << "\tconfig_hash=" << config_hash;
  out << "\n";
  out << "sample_id\tsubject_id\tdrawing_type\tlabel\tsource_path\n";
  for (const auto& s : m.samples) {
    out << s.sample_id << '\t' << s.subject_id << '\t' << to_string(s.drawing_type) << '\t' << to_string(s.label)
        << '\t' << s.source_path << '\n';
  }
  return out.str();
}

void write_manifest(const Manifest& m, const fs::path& path, const std::string& config_hash) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << serialize_manifest(m, config_hash);
}

ManifestFile read_manifest(const fs::path& path, bool load_images) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifact, "manifest not found: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::FormatError, "empty manifest " + path.string());
  const auto header = split(line, '\t');
  if (header.size() < 2 || header[0] != "#chunkpd-manifest") {
    throw Error(ErrorCode::FormatError, "missing manifest header in " + path.string());
  }
  if (header[1] != "v" + std::to_string(kManifestVersion)) {
    throw Error(ErrorCode::FormatError, "unsupported manifest version " + header[1]);
  }
  ManifestFile file;
  for (std::size_t i = 2; i < header.size(); ++i) {
    const auto e = header[i].find('=');
    if (e == std::string::npos) continue;
    const auto key = header[i].substr(0, e);
    const auto value = header[i].substr(e + 1);
    if (key == "root") file.manifest.root = value;
    if (key == "config_hash") file.config_hash = value;
  }
  if (!std::getline(in, line) || line != "sample_id\tsubject_id\tdrawing_type\tlabel\tsource_path") {
    throw Error(ErrorCode::FormatError, "missing column line in " + path.string());
  }
  std::map<std::string, Label> subject_labels;
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 5) {
      throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    }
    DrawingSample s;
    s.sample_id = f[0];
    s.subject_id = f[1];
    const auto type = parse_drawing_type(f[2]);
    if (!type) throw Error(ErrorCode::UnknownDrawingType, f[2]);
    const auto label = parse_label(f[3]);
    if (!label) throw Error(ErrorCode::FormatError, "bad label `" + f[3] + "`");
    s.drawing_type = *type;
    s.label = *label;
    s.source_path = f[4];
    auto [it, inserted] = subject_labels.emplace(s.subject_id, s.label);
    if (!inserted && it->second != s.label) {
      throw Error(ErrorCode::LabelConflict, "subject " + s.subject_id + " is mapped to both PD and Healthy");
    }
    file.manifest.samples.push_back(std::move(s));
  }
  for (const auto& [id, label] : subject_labels) file.manifest.subjects.push_back({id, label, {}});
  if (load_images) {
    // a relative root is relative to the manifest file, so run directories can move
    const auto base = file.manifest.root.is_relative() ? path.parent_path() / file.manifest.root : file.manifest.root;
    for (auto& s : file.manifest.samples) {
      s.image = std::make_shared<const Image>(decode_image(base / s.source_path));
    }
  }
  canonicalize(file.manifest);
  return file;
}

}  // namespace chunkpd

#include "chunkpd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "chunkpd/hashing.hpp"
#include "chunkpd/random.hpp"
#include "json.hpp"

namespace chunkpd {

using nlohmann::json;

std::string_view to_string(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::ImgCv5: return "img_cv5";
    case SplitStrategy::IndCv5: return "ind_cv5";
    case SplitStrategy::Loio: return "loio";
  }
  return "?";
}

std::optional<SplitStrategy> parse_split_strategy(std::string_view s) {
  for (auto v : {SplitStrategy::ImgCv5, SplitStrategy::IndCv5, SplitStrategy::Loio}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

std::string_view to_string(Granularity g) { return g == Granularity::Image ? "image" : "subject"; }

std::string SplitPlan::hash() const {
  Sha256 h;
  h.update("split-v1|" + std::string(to_string(strategy)) + "|" + std::to_string(seed));
  for (const auto& f : folds) {
    h.update("|train");
    for (const auto& id : f.train_ids) h.update("," + id);
    h.update("|test");
    for (const auto& id : f.test_ids) h.update("," + id);
  }
  return to_hex(h.finish());
}

namespace {

constexpr std::size_t kFolds = 5;

/// Deals each group's shuffled members round-robin, continuing the fold cursor
/// across groups so fold sizes stay within one of each other.
std::vector<std::set<std::string>> deal(const std::vector<std::pair<std::string, std::vector<std::string>>>& groups,
                                        std::uint64_t seed, std::size_t folds) {
  std::vector<std::set<std::string>> out(folds);
  std::size_t cursor = 0;
  for (const auto& [name, members] : groups) {
    auto shuffled = members;
    Rng rng(derive_seed(seed, name));
    rng.shuffle(shuffled);
    for (const auto& id : shuffled) out[cursor++ % folds].insert(id);
  }
  return out;
}

void check_degenerate(const Manifest& m, const SplitPlan& plan) {
  std::map<DrawingType, std::set<Label>> present;
  for (const auto& s : m.samples) present[s.drawing_type].insert(s.label);
  std::set<Label> all;
  for (const auto& s : m.samples) all.insert(s.label);
  if (all.size() < 2) throw Error(ErrorCode::DegenerateFold, "the manifest contains a single label");
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto fs = fold_samples(plan, f, m);
    std::map<DrawingType, std::set<Label>> train;
    for (auto i : fs.train) train[m.samples[i].drawing_type].insert(m.samples[i].label);
    for (const auto& [type, labels] : present) {
      if (labels.size() == 2 && train[type].size() < 2) {
        throw Error(ErrorCode::DegenerateFold, "fold " + std::to_string(f) + " trains " +
                                                   std::string(to_string(type)) + " on a single class");
      }
    }
  }
}

}  // namespace

SplitPlan make_split(const Manifest& manifest, SplitStrategy strategy, std::uint64_t seed) {
  SplitPlan plan;
  plan.strategy = strategy;
  plan.seed = seed;
  plan.granularity = strategy == SplitStrategy::ImgCv5 ? Granularity::Image : Granularity::Subject;

  std::vector<std::string> units;
  std::vector<std::set<std::string>> tests;
  switch (strategy) {
    case SplitStrategy::ImgCv5: {
      if (manifest.samples.size() < kFolds) {
        throw Error(ErrorCode::TooFewSubjects, "img_cv5 needs at least 5 samples, got " +
                                                   std::to_string(manifest.samples.size()));
      }
      std::vector<std::pair<std::string, std::vector<std::string>>> groups;
      for (auto t : kDrawingTypes) {
        for (auto l : {Label::Healthy, Label::PD}) {
          std::vector<std::string> ids;
          for (const auto& s : manifest.samples) {
            if (s.drawing_type == t && s.label == l) ids.push_back(s.sample_id);
          }
          groups.emplace_back("img_cv5/" + std::string(to_string(t)) + "/" + std::string(to_string(l)), ids);
        }
      }
      for (const auto& s : manifest.samples) units.push_back(s.sample_id);
      tests = deal(groups, seed, kFolds);
      break;
    }
    case SplitStrategy::IndCv5: {
      if (manifest.subjects.size() < kFolds) {
        throw Error(ErrorCode::TooFewSubjects, "ind_cv5 needs at least 5 subjects, got " +
                                                   std::to_string(manifest.subjects.size()));
      }
      std::vector<std::pair<std::string, std::vector<std::string>>> groups;
      for (auto l : {Label::Healthy, Label::PD}) {
        std::vector<std::string> ids;
        for (const auto& s : manifest.subjects) {
          if (s.label == l) ids.push_back(s.subject_id);
        }
        groups.emplace_back("ind_cv5/" + std::string(to_string(l)), ids);
      }
      for (const auto& s : manifest.subjects) units.push_back(s.subject_id);
      tests = deal(groups, seed, kFolds);
      break;
    }
    case SplitStrategy::Loio: {
      if (manifest.subjects.size() < 2) {
        throw Error(ErrorCode::TooFewSubjects, "loio needs at least 2 subjects");
      }
      for (const auto& s : manifest.subjects) {
        units.push_back(s.subject_id);
        tests.push_back({s.subject_id});
      }
      break;
    }
  }
  for (const auto& test : tests) {
    Fold f;
    for (const auto& u : units) (test.count(u) ? f.test_ids : f.train_ids).push_back(u);
    plan.folds.push_back(std::move(f));
  }
  check_degenerate(manifest, plan);
  return plan;
}

FoldSamples fold_samples(const SplitPlan& plan, std::size_t fold, const Manifest& manifest) {
  if (fold >= plan.folds.size()) throw Error(ErrorCode::InvalidArgument, "fold index out of range");
  const auto& f = plan.folds[fold];
  const bool by_subject = plan.granularity == Granularity::Subject;
  std::unordered_map<std::string, int> side;
  for (const auto& id : f.train_ids) side[id] = 1;
  for (const auto& id : f.test_ids) side[id] = 2;
  std::unordered_set<std::string> known;
  if (by_subject) {
    for (const auto& s : manifest.subjects) known.insert(s.subject_id);
  } else {
    for (const auto& s : manifest.samples) known.insert(s.sample_id);
  }
  for (const auto& [id, where] : side) {
    if (!known.count(id)) throw Error(ErrorCode::UnknownId, "split references unknown id `" + id + "`");
  }
  FoldSamples out;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    const auto it = side.find(by_subject ? s.subject_id : s.sample_id);
    if (it == side.end()) continue;
    (it->second == 1 ? out.train : out.test).push_back(i);
  }
  return out;
}

std::size_t LeakageReport::total() const {
  std::size_t n = 0;
  for (const auto& f : folds) n += f.shared_subjects.size();
  return n;
}

LeakageReport audit_leakage(const SplitPlan& plan, const Manifest& manifest) {
  LeakageReport report;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto fs = fold_samples(plan, f, manifest);
    std::set<std::string> train, shared;
    for (auto i : fs.train) train.insert(manifest.samples[i].subject_id);
    for (auto i : fs.test) {
      if (train.count(manifest.samples[i].subject_id)) shared.insert(manifest.samples[i].subject_id);
    }
    report.folds.push_back({f, {shared.begin(), shared.end()}});
  }
  return report;
}

// ---------------------------------------------------------------------------

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) noexcept {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

Metrics compute_metrics(const ConfusionCounts& c) {
  Metrics m;
  m.counts = c;
  const auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  if (m.precision && m.recall && *m.precision + *m.recall > 0.0) {
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  }
  return m;
}

Metrics compute_metrics(const std::vector<ScoredPrediction>& predictions) {
  if (predictions.empty()) throw Error(ErrorCode::EmptyPredictions, "no predictions to score");
  ConfusionCounts c;
  for (const auto& p : predictions) {
    const bool pd_pred = p.prediction.label == Label::PD;
    const bool pd_true = p.truth == Label::PD;
    if (pd_pred && pd_true) ++c.tp;
    else if (pd_pred) ++c.fp;
    else if (pd_true) ++c.fn;
    else ++c.tn;
  }
  return compute_metrics(c);
}

double weighted_accuracy(const std::vector<std::pair<double, std::size_t>>& per_type) {
  if (per_type.empty()) throw Error(ErrorCode::EmptyInput, "weighted accuracy of no groups");
  double num = 0.0, den = 0.0;
  for (const auto& [acc, n] : per_type) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "group with zero images");
    num += acc * static_cast<double>(n);
    den += static_cast<double>(n);
  }
  return num / den;
}

// ---------------------------------------------------------------------------

namespace {

ConfusionCounts count_one(const EvaluatedImage& e) {
  ConfusionCounts c;
  const bool pd_pred = e.prediction.label == Label::PD;
  const bool pd_true = e.truth == Label::PD;
  (pd_pred ? (pd_true ? c.tp : c.fp) : (pd_true ? c.fn : c.tn)) = 1;
  return c;
}

std::optional<double> weighted_over(const std::map<DrawingType, Metrics>& per_type) {
  std::vector<std::pair<double, std::size_t>> groups;
  for (const auto& [t, m] : per_type) {
    if (m.accuracy) groups.emplace_back(*m.accuracy, m.counts.total());
  }
  if (groups.empty()) return std::nullopt;
  return weighted_accuracy(groups);
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const Metrics& m) {
  return {{"tp", m.counts.tp},       {"fp", m.counts.fp},         {"tn", m.counts.tn},   {"fn", m.counts.fn},
          {"accuracy", opt(m.accuracy)}, {"precision", opt(m.precision)}, {"recall", opt(m.recall)},
          {"f1", opt(m.f1)}};
}

std::string fixed3(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}

std::string short_type(DrawingType t) {
  switch (t) {
    case DrawingType::Circle: return "Circ";
    case DrawingType::Meander: return "Meand";
    case DrawingType::Spiral: return "Spir";
  }
  return "?";
}

}  // namespace

MetricsReport evaluate_plan(const Manifest& manifest, const SplitPlan& plan, const FoldRunner& runner,
                            const ReportMeta& meta) {
  MetricsReport r;
  r.strategy = plan.strategy;
  r.config_fingerprint = meta.config_fingerprint;
  r.split_hash = plan.hash();
  r.augmentation = meta.augmentation;
  r.grid_n = meta.grid_n;
  r.leakage = audit_leakage(plan, manifest);

  std::map<DrawingType, ConfusionCounts> totals;
  std::size_t routed_ok = 0;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto samples = fold_samples(plan, f, manifest);
    auto images = runner(samples, f);
    if (images.size() != samples.test.size()) {
      throw Error(ErrorCode::InvalidArgument, "fold runner must return one prediction per test image");
    }
    FoldReport fr;
    fr.fold = f;
    fr.test_images = images.size();
    std::map<DrawingType, ConfusionCounts> fold_counts;
    for (auto& e : images) {
      e.fold = f;
      const auto c = count_one(e);
      fold_counts[e.true_type] += c;
      totals[e.true_type] += c;
      if (e.prediction.routed_type == e.true_type) ++fr.type_correct;
      if (e.prediction.tie_broken) ++r.tie_broken;
    }
    for (const auto& [t, c] : fold_counts) fr.per_type[t] = compute_metrics(c);
    fr.weighted_accuracy = weighted_over(fr.per_type);
    routed_ok += fr.type_correct;
    r.folds.push_back(std::move(fr));
    r.images.insert(r.images.end(), std::make_move_iterator(images.begin()), std::make_move_iterator(images.end()));
  }

  std::map<DrawingType, Metrics> per_type;
  for (const auto& [t, c] : totals) {
    per_type[t] = compute_metrics(c);
    TypeReport tr;
    tr.metrics = per_type[t];
    if (const auto it = meta.labels.find(t); it != meta.labels.end()) {
      tr.backbone = it->second.first;
      tr.classifier = it->second.second;
    }
    r.per_type[t] = std::move(tr);
  }
  r.weighted_accuracy = weighted_over(per_type);
  if (!r.images.empty()) r.type_accuracy = static_cast<double>(routed_ok) / static_cast<double>(r.images.size());
  return r;
}

std::string MetricsReport::to_json() const {
  json j;
  j["format"] = "chunkpd-metrics";
  j["version"] = 1;
  j["strategy"] = to_string(strategy);
  j["config_hash"] = config_fingerprint;
  j["split_hash"] = split_hash;
  j["augmentation"] = augmentation;
  j["grid"] = grid_n;
  j["weighted_accuracy"] = opt(weighted_accuracy);
  j["type_accuracy"] = opt(type_accuracy);
  j["tie_broken"] = tie_broken;
  json types = json::object();
  for (const auto& [t, tr] : per_type) {
    auto m = metrics_json(tr.metrics);
    m["backbone"] = tr.backbone;
    m["classifier"] = tr.classifier;
    types[std::string(to_string(t))] = std::move(m);
  }
  j["per_type"] = std::move(types);
  json folds_j = json::array();
  for (const auto& f : folds) {
    json pt = json::object();
    for (const auto& [t, m] : f.per_type) pt[std::string(to_string(t))] = metrics_json(m);
    folds_j.push_back({{"fold", f.fold},
                       {"test_images", f.test_images},
                       {"type_correct", f.type_correct},
                       {"weighted_accuracy", opt(f.weighted_accuracy)},
                       {"per_type", std::move(pt)}});
  }
  j["folds"] = std::move(folds_j);
  json leak = json::array();
  for (const auto& f : leakage.folds) leak.push_back({{"fold", f.fold}, {"shared_subjects", f.shared_subjects}});
  j["leakage"] = {{"total_shared", leakage.total()}, {"folds", std::move(leak)}};
  json imgs = json::array();
  for (const auto& e : images) {
    imgs.push_back({{"fold", e.fold},
                    {"sample_id", e.sample_id},
                    {"subject_id", e.subject_id},
                    {"drawing_type", to_string(e.true_type)},
                    {"routed_type", e.prediction.routed_type ? json(to_string(*e.prediction.routed_type)) : json(nullptr)},
                    {"truth", to_string(e.truth)},
                    {"label", to_string(e.prediction.label)},
                    {"pd_votes", e.prediction.pd_votes},
                    {"healthy_votes", e.prediction.healthy_votes},
                    {"mean_score", e.prediction.mean_score},
                    {"tie_broken", e.prediction.tie_broken}});
  }
  j["images"] = std::move(imgs);
  return j.dump(2) + "\n";
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "BB,Draw/Cls,Acc,Prec,Rec,F1,TP,FP,TN,FN,Aug,Chnk\n";
  const std::string chunk = grid_n == 1 ? "No" : std::to_string(grid_n) + "x" + std::to_string(grid_n);
  for (const auto& [t, tr] : per_type) {
    const auto& m = tr.metrics;
    out << tr.backbone << ',' << short_type(t) << '-' << tr.classifier << ',' << fixed3(m.accuracy) << ','
        << fixed3(m.precision) << ',' << fixed3(m.recall) << ',' << fixed3(m.f1) << ',' << m.counts.tp << ','
        << m.counts.fp << ',' << m.counts.tn << ',' << m.counts.fn << ',' << (augmentation ? "Yes" : "No") << ','
        << chunk << '\n';
  }
  char buf[32] = "NA";
  if (weighted_accuracy) std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * *weighted_accuracy);
  out << "Weighted Avg,," << buf << ",,,,,,,,,\n";
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<AblationCell> full_ablation_matrix() { return {{true, true}, {true, false}, {false, true}, {false, false}}; }

AblationTable run_ablation(const Manifest& manifest, const std::vector<AblationCell>& matrix, std::uint64_t seed,
                           const CellRunnerFactory& factory) {
  AblationTable table;
  if (matrix.empty()) return table;
  const SplitPlan plan = make_split(manifest, SplitStrategy::IndCv5, seed);
  for (const auto& cell : matrix) {
    auto [runner, meta] = factory(cell);
    AblationRow row;
    row.cell = cell;
    row.reference = cell == AblationCell{true, true};
    row.report = evaluate_plan(manifest, plan, runner, meta);
    table.rows.push_back(std::move(row));
  }
  const auto ref = std::find_if(table.rows.begin(), table.rows.end(), [](const AblationRow& r) { return r.reference; });
  if (ref != table.rows.end() && ref->report.weighted_accuracy) {
    const double base = *ref->report.weighted_accuracy;
    for (auto& r : table.rows) {
      if (r.report.weighted_accuracy) r.delta = *r.report.weighted_accuracy - base;
    }
  }
  return table;
}

std::string AblationTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"chunking", r.cell.chunking},
                      {"augmentation", r.cell.augmentation},
                      {"reference", r.reference},
                      {"grid", r.report.grid_n},
                      {"weighted_accuracy", opt(r.report.weighted_accuracy)},
                      {"delta", opt(r.delta)},
                      {"type_accuracy", opt(r.report.type_accuracy)},
                      {"tie_broken", r.report.tie_broken},
                      {"split_hash", r.report.split_hash},
                      {"report", json::parse(r.report.to_json())}});
  }
  return json{{"format", "chunkpd-ablation"}, {"version", 1}, {"rows", std::move(rows_j)}}.dump(2) + "\n";
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  out << "Chunking,Augmentation,Reference,WeightedAcc,Delta,TieBroken,SplitHash\n";
  for (const auto& r : rows) {
    char acc[32] = "NA", delta[32] = "NA";
    if (r.report.weighted_accuracy) std::snprintf(acc, sizeof(acc), "%.2f", 100.0 * *r.report.weighted_accuracy);
    if (r.delta) std::snprintf(delta, sizeof(delta), "%+.2f", 100.0 * *r.delta);
    out << (r.cell.chunking ? "Yes" : "No") << ',' << (r.cell.augmentation ? "Yes" : "No") << ','
        << (r.reference ? "Yes" : "No") << ',' << acc << ',' << delta << ',' << r.report.tie_broken << ','
        << r.report.split_hash.substr(0, 16) << '\n';
  }
  return out.str();
}

}  // namespace chunkpd

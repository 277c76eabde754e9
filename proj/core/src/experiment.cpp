#include "chunkpd/experiment.hpp"

#include <fcntl.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/opensslv.h>
#include <opencv2/core/version.hpp>

#include "chunkpd/hashing.hpp"
#include "json.hpp"

#ifndef CHUNKPD_VERSION
#define CHUNKPD_VERSION "0.0.0"
#endif

namespace chunkpd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_config(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::InvalidConfig, field + ": " + why);
}

std::string read_text(const fs::path& path, ErrorCode missing = ErrorCode::MissingArtifact) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(missing, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// write-then-rename so a crash never leaves a truncated artifact behind
void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

// --- strict JSON reading ----------------------------------------------------

class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) bad_config(path_.empty() ? "config" : path_, "expected an object");
  }

  /// Every key must be one of `allowed`.
  void only(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [key, value] : obj_.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) bad_config(field(key), "unknown key");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key) && !obj_.at(key).is_null(); }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const json& at(const std::string& key) const { return obj_.at(key); }
  Reader child(const std::string& key) const { return Reader(obj_.at(key), field(key)); }

  template <typename T>
  void integer(const std::string& key, T& out) const {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) bad_config(field(key), "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) {
        out = v.get<T>();
        return;
      }
      if (v.get<std::int64_t>() < 0) bad_config(field(key), "must be >= 0");
    }
    out = v.get<T>();
  }
  void number(const std::string& key, double& out) const {
    if (!has(key)) return;
    if (!obj_.at(key).is_number()) bad_config(field(key), "expected a number");
    out = obj_.at(key).get<double>();
  }
  void boolean(const std::string& key, bool& out) const {
    if (!has(key)) return;
    if (!obj_.at(key).is_boolean()) bad_config(field(key), "expected true or false");
    out = obj_.at(key).get<bool>();
  }
  void string(const std::string& key, std::string& out) const {
    if (!has(key)) return;
    if (!obj_.at(key).is_string()) bad_config(field(key), "expected a string");
    out = obj_.at(key).get<std::string>();
  }
  void path(const std::string& key, fs::path& out) const {
    std::string s = out.string();
    string(key, s);
    out = s;
  }

 private:
  const json& obj_;
  std::string path_;
};

json schedule_json(const FinetuneSchedule& s) {
  return json{{"epochs", s.epochs},
              {"batch_size", s.batch_size},
              {"learning_rate", s.learning_rate},
              {"weight_decay", s.weight_decay},
              {"seed", s.seed}};
}

void read_schedule(const Reader& r, FinetuneSchedule& s) {
  r.integer("epochs", s.epochs);
  r.integer("batch_size", s.batch_size);
  r.number("learning_rate", s.learning_rate);
  r.number("weight_decay", s.weight_decay);
  r.integer("seed", s.seed);
}

json config_json(const ExperimentConfig& c, bool include_output_dir, bool include_threads) {
  json j;
  json ds{{"manifest", c.dataset.manifest.generic_string()},
          {"root", c.dataset.root.generic_string()},
          {"layout", c.dataset.layout.generic_string()},
          {"toy", nullptr}};
  if (c.dataset.toy) {
    ds["toy"] = json{{"n_subjects", c.dataset.toy->n_subjects},
                     {"seed", c.dataset.toy->seed},
                     {"image_side", c.dataset.toy->image_side}};
  }
  j["dataset"] = ds;
  j["grid"] = c.grid;
  json repeats = json::object();
  for (auto t : kDrawingTypes) repeats[std::string(to_string(t))] = c.augmentation.repeats_for(t);
  j["augmentation"] = json{{"enabled", c.augment}, {"repeats", repeats}, {"noise_sigma", c.augmentation.noise_sigma}};
  auto s1 = schedule_json(c.stage1);
  s1["variant"] = c.stage1_variant;
  s1["input_side"] = c.stage1_input_side;
  j["stage1"] = s1;
  j["finetune"] = schedule_json(c.finetune);
  j["backbones"] = json{{"seed", c.backbones.seed},
                        {"residual_weights", c.backbones.residual_weights.generic_string()},
                        {"pyramid_weights", c.backbones.pyramid_weights.generic_string()}};
  json types = json::object();
  for (const auto& [t, tc] : c.types) {
    json hp = json::object();
    for (const auto& [k, v] : tc.classifier.resolved()) hp[k] = v;
    types[std::string(to_string(t))] = json{
        {"encoder", {{"kind", to_string(tc.encoder.kind)}, {"variant", tc.encoder.variant}}},
        {"classifier", {{"kind", to_string(tc.classifier.kind)}, {"hyperparams", hp}, {"seed", tc.classifier.seed}}}};
  }
  j["types"] = types;
  j["strategy"] = to_string(c.strategy);
  j["seed"] = c.seed;
  if (include_threads) j["threads"] = c.threads;
  if (include_output_dir) j["output_dir"] = c.output_dir.generic_string();
  return j;
}

std::vector<std::size_t> all_indices(const Manifest& m) {
  std::vector<std::size_t> v(m.samples.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

/// Projected feature of one tile: component heads applied and concatenated.
std::vector<float> project(const EncoderState& state, const std::vector<std::vector<float>>& raw) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(state.id.output_dim));
  for (std::size_t c = 0; c < state.components.size(); ++c) {
    const auto p = state.components[c].head.apply(raw[c]);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::map<DrawingType, TypeConfig> default_type_configs() {
  return {
      {DrawingType::Circle, {EncoderId::residual("resnet18"), ClassifierSpec(ClassifierKind::Knn)}},
      {DrawingType::Meander, {EncoderId::residual("resnet18"), ClassifierSpec(ClassifierKind::RandomForest)}},
      {DrawingType::Spiral, {EncoderId::hybrid("resnet18", "pvt_tiny"), ClassifierSpec(ClassifierKind::Knn)}},
  };
}

void ExperimentConfig::validate() const {
  const auto& toy = dataset.toy;
  const int sources = !dataset.manifest.empty() + !dataset.root.empty() + toy.has_value();
  if (sources > 1) bad_config("dataset", "set exactly one of manifest, root, toy");
  if (!dataset.layout.empty() && dataset.root.empty()) bad_config("dataset.layout", "only applies with dataset.root");
  if (toy) {
    if (toy->n_subjects < 1) bad_config("dataset.toy.n_subjects", "must be >= 1");
    if (toy->image_side < 64) bad_config("dataset.toy.image_side", "must be >= 64");
  }
  if (grid < 1 || grid > 3) bad_config("grid", "must be 1, 2 or 3");
  try {
    augmentation.validate();
  } catch (const Error& e) {
    bad_config("augmentation", e.what());
  }
  const auto& variants = backbone_variants(BackboneKind::ResidualCnn);
  if (std::find(variants.begin(), variants.end(), stage1_variant) == variants.end()) {
    bad_config("stage1.variant", "unknown residual variant `" + stage1_variant + "`");
  }
  if (stage1_input_side < kMinTypeInputSide || stage1_input_side > ChunkGrid(grid).canvas_side()) {
    bad_config("stage1.input_side", "must lie between " + std::to_string(kMinTypeInputSide) + " and the canvas side");
  }
  const auto check_schedule = [](const FinetuneSchedule& s, const std::string& name) {
    if (s.epochs < 0) bad_config(name + ".epochs", "must be >= 0");
    if (s.batch_size < 1) bad_config(name + ".batch_size", "must be >= 1");
    if (!(s.learning_rate > 0.0) || !std::isfinite(s.learning_rate)) bad_config(name + ".learning_rate", "must be positive");
    if (!(s.weight_decay >= 0.0) || !std::isfinite(s.weight_decay)) bad_config(name + ".weight_decay", "must be >= 0");
  };
  check_schedule(stage1, "stage1");
  if (stage1.epochs == 0) bad_config("stage1.epochs", "stage 1 needs at least one epoch");
  check_schedule(finetune, "finetune");
  for (auto t : kDrawingTypes) {
    const auto it = types.find(t);
    const auto name = "types." + std::string(to_string(t));
    if (it == types.end()) bad_config(name, "missing");
    try {
      (void)EncoderId::make(it->second.encoder.kind, it->second.encoder.variant);
    } catch (const Error& e) {
      bad_config(name + ".encoder", e.what());
    }
    if (EncoderId::make(it->second.encoder.kind, it->second.encoder.variant) != it->second.encoder) {
      bad_config(name + ".encoder", "output_dim does not match the variant");
    }
    try {
      it->second.classifier.validate();
    } catch (const Error& e) {
      bad_config(name + ".classifier", e.what());
    }
  }
  if (output_dir.empty()) bad_config("output_dir", "must not be empty");
}

std::string ExperimentConfig::to_json(bool include_output_dir) const {
  return config_json(*this, include_output_dir, true).dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  const Reader root(doc, "");
  root.only({"dataset", "grid", "augmentation", "stage1", "finetune", "backbones", "types", "strategy", "seed",
             "threads", "output_dir"});

  if (root.has("dataset")) {
    const auto r = root.child("dataset");
    r.only({"manifest", "root", "layout", "toy"});
    r.path("manifest", c.dataset.manifest);
    r.path("root", c.dataset.root);
    r.path("layout", c.dataset.layout);
    if (r.has("toy")) {
      const auto t = r.child("toy");
      t.only({"n_subjects", "seed", "image_side"});
      ToyOptions toy;
      t.integer("n_subjects", toy.n_subjects);
      t.integer("seed", toy.seed);
      t.integer("image_side", toy.image_side);
      c.dataset.toy = toy;
    }
  }
  root.integer("grid", c.grid);
  if (root.has("augmentation")) {
    const auto r = root.child("augmentation");
    r.only({"enabled", "repeats", "noise_sigma"});
    r.boolean("enabled", c.augment);
    r.number("noise_sigma", c.augmentation.noise_sigma);
    if (r.has("repeats")) {
      const auto rep = r.child("repeats");
      rep.only({"circle", "meander", "spiral"});
      for (auto t : kDrawingTypes) rep.integer(std::string(to_string(t)), c.augmentation.repeats[t]);
    }
  }
  if (root.has("stage1")) {
    const auto r = root.child("stage1");
    r.only({"variant", "input_side", "epochs", "batch_size", "learning_rate", "weight_decay", "seed"});
    r.string("variant", c.stage1_variant);
    r.integer("input_side", c.stage1_input_side);
    read_schedule(r, c.stage1);
  }
  if (root.has("finetune")) {
    const auto r = root.child("finetune");
    r.only({"epochs", "batch_size", "learning_rate", "weight_decay", "seed"});
    read_schedule(r, c.finetune);
  }
  if (root.has("backbones")) {
    const auto r = root.child("backbones");
    r.only({"seed", "residual_weights", "pyramid_weights"});
    r.integer("seed", c.backbones.seed);
    r.path("residual_weights", c.backbones.residual_weights);
    r.path("pyramid_weights", c.backbones.pyramid_weights);
  }
  if (root.has("types")) {
    const auto types = root.child("types");
    types.only({"circle", "meander", "spiral"});
    for (auto t : kDrawingTypes) {
      const std::string name(to_string(t));
      if (!types.has(name)) continue;
      const auto r = types.child(name);
      r.only({"encoder", "classifier"});
      auto& tc = c.types[t];
      if (r.has("encoder")) {
        const auto e = r.child("encoder");
        e.only({"kind", "variant"});
        std::string kind(to_string(tc.encoder.kind));
        e.string("kind", kind);
        const auto k = parse_encoder_kind(kind);
        if (!k) bad_config(e.field("kind"), "unknown encoder kind `" + kind + "`");
        std::string variant;
        if (*k == tc.encoder.kind) variant = tc.encoder.variant;
        else variant = EncoderId::make(*k, *k == EncoderKind::PyramidTransformer ? "pvt_tiny"
                                              : *k == EncoderKind::HybridConcat ? "resnet18+pvt_tiny"
                                                                                : "resnet18").variant;
        e.string("variant", variant);
        try {
          tc.encoder = EncoderId::make(*k, variant);
        } catch (const Error& err) {
          bad_config(e.field("variant"), err.what());
        }
      }
      if (r.has("classifier")) {
        const auto cl = r.child("classifier");
        cl.only({"kind", "hyperparams", "seed"});
        std::string kind(to_string(tc.classifier.kind));
        cl.string("kind", kind);
        const auto k = parse_classifier_kind(kind);
        if (!k) bad_config(cl.field("kind"), "unknown classifier kind `" + kind + "`");
        std::map<std::string, double> hp;
        if (cl.has("hyperparams")) {
          const auto h = cl.child("hyperparams");
          for (const auto& [key, value] : cl.at("hyperparams").items()) {
            if (!value.is_number()) bad_config(h.field(key), "expected a number");
            hp[key] = value.get<double>();
          }
        } else if (*k == tc.classifier.kind) {
          hp = tc.classifier.hyperparams;
        }
        std::uint64_t seed = tc.classifier.seed;
        cl.integer("seed", seed);
        try {
          tc.classifier = ClassifierSpec(*k, hp, seed);
        } catch (const Error& err) {
          bad_config(cl.field("hyperparams"), err.what());
        }
      }
    }
  }
  if (root.has("strategy")) {
    std::string s;
    root.string("strategy", s);
    const auto st = parse_split_strategy(s);
    if (!st) bad_config("strategy", "unknown split strategy `" + s + "` (img_cv5, ind_cv5, loio)");
    c.strategy = *st;
  }
  root.integer("seed", c.seed);
  root.integer("threads", c.threads);
  root.path("output_dir", c.output_dir);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_text(path, ErrorCode::InvalidConfig));
}

std::string ExperimentConfig::hash() const { return sha256_hex(config_json(*this, false, false).dump()); }

// ---------------------------------------------------------------------------
// Workbench

Workbench::Workbench(const Manifest& manifest, ExperimentConfig config, std::shared_ptr<EmbeddingCache> cache,
                     std::string manifest_hash)
    : manifest_(manifest),
      config_(std::move(config)),
      cache_(cache ? std::move(cache) : std::make_shared<EmbeddingCache>()),
      manifest_hash_(manifest_hash.empty() ? manifest.digest() : std::move(manifest_hash)) {
  config_.validate();
  stage1_backbone_ = shared_backbone(BackboneKind::ResidualCnn, config_.stage1_variant,
                                     config_.backbones.for_kind(BackboneKind::ResidualCnn));
  for (auto t : kDrawingTypes) {
    auto state = initial_encoder_state(config_.types.at(t).encoder, config_.backbones);
    state.drawing_type = t;
    auto& bbs = backbones_[t];
    for (const auto& c : state.components) bbs.push_back(shared_backbone(c.kind, c.variant, c.source));
    initial_.emplace(t, std::move(state));
  }
}

const std::vector<std::shared_ptr<const Backbone>>& Workbench::backbones_for(DrawingType type) const {
  return backbones_.at(type);
}

std::vector<Workbench::TileEmbeddingsPtr> Workbench::tiles(
    std::size_t sample, const CellSettings& cell, bool augmented,
    const std::vector<std::shared_ptr<const Backbone>>& backbones) const {
  const auto& s = manifest_.samples.at(sample);
  const auto prefix = s.sample_id + "|" + std::to_string(cell.grid_n) + (augmented ? "|a|" : "|p|");
  std::vector<TileEmbeddingsPtr> out(backbones.size());
  std::vector<std::size_t> missing;
  {
    std::lock_guard lock(mutex_);
    for (std::size_t b = 0; b < backbones.size(); ++b) {
      const auto it = tile_memo_.find(prefix + backbones[b]->digest());
      if (it != tile_memo_.end()) out[b] = it->second;
      else missing.push_back(b);
    }
  }
  if (missing.empty()) return out;

  const auto tiles = run_pipeline(s, ChunkGrid(cell.grid_n), config_.augmentation, augmented);
  for (const auto b : missing) {
    auto te = std::make_shared<TileEmbeddings>();
    te->refs.reserve(tiles.size());
    te->raw.reserve(tiles.size());
    for (const auto& t : tiles) {
      te->refs.push_back(tile_ref(t));
      te->raw.push_back(cache_->embed(*backbones[b], t.pixels));
    }
    std::lock_guard lock(mutex_);
    out[b] = tile_memo_.emplace(prefix + backbones[b]->digest(), std::move(te)).first->second;
  }
  return out;
}

std::vector<float> Workbench::canvas_embedding(std::size_t sample, const CellSettings& cell) const {
  const auto& s = manifest_.samples.at(sample);
  const auto key = s.sample_id + "|" + std::to_string(cell.grid_n);
  {
    std::lock_guard lock(mutex_);
    const auto it = canvas_memo_.find(key);
    if (it != canvas_memo_.end()) return it->second;
  }
  auto emb = cache_->embed(*stage1_backbone_,
                           type_classifier_input(prepare_canvas(s, ChunkGrid(cell.grid_n)), config_.stage1_input_side));
  std::lock_guard lock(mutex_);
  return canvas_memo_.emplace(key, std::move(emb)).first->second;
}

void Workbench::prefetch(const std::vector<std::size_t>& samples, const CellSettings& cell) const {
  const auto work = [&](std::size_t i) {
    const auto idx = samples[i];
    const auto& b = backbones_for(manifest_.samples.at(idx).drawing_type);
    (void)canvas_embedding(idx, cell);
    (void)tiles(idx, cell, false, b);
    if (cell.augment) (void)tiles(idx, cell, true, b);
  };

  unsigned n = config_.threads ? config_.threads : std::max(1u, std::thread::hardware_concurrency());
  n = static_cast<unsigned>(std::min<std::size_t>(n, samples.size()));
  if (n <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < n; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < samples.size();) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = samples.size();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

TrainedModels Workbench::train(const std::vector<std::size_t>& samples, const CellSettings& cell,
                               const std::string& tag) const {
  const auto seeded = [&](const FinetuneSchedule& base, const std::string& stream) {
    auto s = base;
    s.seed = derive_seed(base.seed, std::to_string(config_.seed) + "/" + stream + "/" + tag);
    return s;
  };

  TrainedModels m;
  std::vector<std::vector<float>> canvases;
  std::vector<DrawingType> types;
  for (const auto i : samples) {
    canvases.push_back(canvas_embedding(i, cell));
    types.push_back(manifest_.samples.at(i).drawing_type);
  }
  m.stage1 = train_type_classifier(canvases, types, *stage1_backbone_, seeded(config_.stage1, "stage1"),
                                   config_.stage1_input_side);

  for (auto t : kDrawingTypes) {
    const auto& bbs = backbones_for(t);
    std::vector<std::vector<std::vector<float>>> raw;
    std::vector<Label> labels;
    for (const auto i : samples) {
      const auto& s = manifest_.samples.at(i);
      if (s.drawing_type != t) continue;
      const auto sets = tiles(i, cell, cell.augment, bbs);
      for (std::size_t k = 0; k < sets.front()->refs.size(); ++k) {
        std::vector<std::vector<float>> comps;
        for (const auto& set : sets) comps.push_back(set->raw[k]);
        raw.push_back(std::move(comps));
        labels.push_back(s.label);
      }
    }
    if (raw.empty()) continue;
    const std::string name(to_string(t));
    auto enc = finetune_on_embeddings(initial_.at(t), raw, labels, seeded(config_.finetune, "finetune/" + name));

    std::vector<std::vector<float>> x;
    x.reserve(raw.size());
    for (const auto& r : raw) x.push_back(project(enc, r));
    auto spec = config_.types.at(t).classifier;
    spec.seed = derive_seed(spec.seed, std::to_string(config_.seed) + "/classifier/" + name + "/" + tag);
    m.classifiers.emplace(t, train_classifier(spec, x, labels, manifest_hash_));
    m.encoders.emplace(t, std::move(enc));
  }
  return m;
}

std::vector<EvaluatedImage> Workbench::predict(const TrainedModels& models, const std::vector<std::size_t>& samples,
                                               const CellSettings& cell) const {
  const TypeClassifier stage1(models.stage1, cache_);
  std::vector<EvaluatedImage> out;
  out.reserve(samples.size());
  for (const auto i : samples) {
    const auto& s = manifest_.samples.at(i);
    const auto routed = stage1.classify_embedding(canvas_embedding(i, cell)).drawing_type;
    const auto enc = models.encoders.find(routed);
    const auto cls = models.classifiers.find(routed);
    if (enc == models.encoders.end() || cls == models.classifiers.end()) {
      throw Error(ErrorCode::ModelNotLoaded, "no trained model for routed type " + std::string(to_string(routed)));
    }
    const auto sets = tiles(i, cell, false, backbones_for(routed));
    std::vector<TilePrediction> votes;
    for (std::size_t k = 0; k < sets.front()->refs.size(); ++k) {
      std::vector<std::vector<float>> comps;
      for (const auto& set : sets) comps.push_back(set->raw[k]);
      FeatureVector fv{project(enc->second, comps), enc->second.id, sets.front()->refs[k]};
      votes.push_back(predict_tile(cls->second, fv));
    }
    auto pred = vote(votes);
    pred.routed_type = routed;
    out.push_back({0, s.sample_id, s.subject_id, s.drawing_type, s.label, std::move(pred)});
  }
  return out;
}

FoldRunner Workbench::fold_runner(const CellSettings& cell) const {
  return [this, cell](const FoldSamples& fs, std::size_t fold) {
    auto all = fs.train;
    all.insert(all.end(), fs.test.begin(), fs.test.end());
    prefetch(all, cell);
    const auto models = train(fs.train, cell, "fold/" + std::to_string(fold));
    auto images = predict(models, fs.test, cell);
    for (auto& im : images) im.fold = fold;
    return images;
  };
}

ReportMeta Workbench::report_meta(const CellSettings& cell) const {
  ReportMeta meta;
  meta.config_fingerprint = config_.hash();
  meta.augmentation = cell.augment;
  meta.grid_n = cell.grid_n;
  for (const auto& [t, tc] : config_.types) {
    meta.labels[t] = {tc.encoder.display_name(), std::string(short_name(tc.classifier.kind))};
  }
  return meta;
}

std::vector<fs::path> Workbench::export_tiles(const fs::path& root, const CellSettings& cell,
                                              const std::string& config_hash) const {
  const ChunkGrid grid(cell.grid_n);
  std::vector<fs::path> dirs;
  std::vector<bool> variants{false};
  if (cell.augment) variants.insert(variants.begin(), true);
  for (const bool aug : variants) {
    TileCache tc(root, pipeline_fingerprint(grid, config_.augmentation, aug));
    for (const auto& s : manifest_.samples) {
      for (const auto& t : run_pipeline(s, grid, config_.augmentation, aug)) tc.put(t);
    }
    tc.write_index(config_hash);
    dirs.push_back(tc.directory());
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// Run directories

fs::path run_directory(const ExperimentConfig& config) { return config.output_dir / config.hash().substr(0, 16); }

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / "run.lock") {
  fs::create_directories(run_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw Error(ErrorCode::RunLocked,
                  "run directory " + run_dir.string() + " is in use (remove " + path_.string() + " if stale)");
    }
    throw Error(ErrorCode::IoError, "cannot create " + path_.string());
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string RunRecord::to_json() const {
  json j{{"format", "chunkpd-run"},
         {"version", 1},
         {"config_hash", config_hash},
         {"created", created},
         {"updated", updated},
         {"artifacts", artifacts},
         {"environment", environment}};
  return j.dump(2) + "\n";
}

RunRecord RunRecord::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    if (j.value("format", "") != "chunkpd-run") throw Error(ErrorCode::FormatError, "not a run record");
    if (j.value("version", 0) != 1) throw Error(ErrorCode::FormatError, "unsupported run record version");
    RunRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.created = j.at("created").get<std::string>();
    r.updated = j.at("updated").get<std::string>();
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    r.environment = j.at("environment").get<std::map<std::string, std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("malformed run record: ") + e.what());
  }
}

RunRecord RunRecord::load(const fs::path& run_dir) { return from_json(read_text(run_dir / "run.json")); }

void RunRecord::save(const fs::path& run_dir) const { write_text(run_dir / "run.json", to_json()); }

std::map<std::string, std::string> environment_descriptor() {
  std::map<std::string, std::string> env;
  env["chunkpd"] = CHUNKPD_VERSION;
#if defined(__clang__)
  env["compiler"] = "clang " __clang_version__;
#elif defined(__GNUC__)
  env["compiler"] = "gcc " __VERSION__;
#endif
  env["cxx"] = std::to_string(__cplusplus);
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
  env["opencv"] = CV_VERSION;
  env["openssl"] = OPENSSL_VERSION_TEXT;
  utsname u{};
  if (::uname(&u) == 0) {
    env["os"] = std::string(u.sysname) + " " + u.release;
    env["machine"] = u.machine;
  }
  return env;
}

std::vector<std::string> verify_run_record(const RunRecord& record, const fs::path& run_dir) {
  std::vector<std::string> problems;
  for (const auto& [name, rel] : record.artifacts) {
    const auto path = run_dir / rel;
    if (!fs::exists(path)) {
      problems.push_back(name + ": missing " + rel);
      continue;
    }
    std::string found;
    if (path.extension() == ".json") {
      try {
        const auto j = json::parse(read_text(path));
        if (j.contains("config_hash") && j["config_hash"].is_string()) found = j["config_hash"].get<std::string>();
      } catch (const json::exception&) {
        problems.push_back(name + ": unreadable " + rel);
        continue;
      }
    } else {
      // binary artifacts carry the hash in their first (header) line
      std::ifstream in(path, std::ios::binary);
      std::string line;
      std::getline(in, line);
      for (const std::string marker : {"config_hash=", "\"config_hash\":\""}) {
        const auto p = line.find(marker);
        if (p == std::string::npos) continue;
        const auto b = p + marker.size();
        const auto e = line.find_first_of("\t\"", b);
        found = line.substr(b, e == std::string::npos ? std::string::npos : e - b);
        break;
      }
    }
    if (found.empty()) problems.push_back(name + ": no config hash in " + rel);
    else if (found != record.config_hash) problems.push_back(name + ": config hash " + found + " in " + rel);
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Commands

Manifest load_dataset(const DatasetConfig& dataset) {
  if (dataset.toy) return synthesize_toy_manifest(*dataset.toy);
  if (!dataset.root.empty()) {
    const auto layout = dataset.layout.empty() ? Layout::standard() : Layout::load(dataset.layout);
    return ingest_directory(dataset.root, layout).manifest;
  }
  if (!dataset.manifest.empty()) return read_manifest(dataset.manifest, true).manifest;
  throw Error(ErrorCode::InvalidConfig, "dataset: one of manifest, root or toy is required");
}

IngestOutcome cmd_ingest(const DatasetConfig& dataset, const fs::path& out) {
  IngestOutcome o;
  fs::create_directories(out);
  if (dataset.toy) {
    o.manifest = synthesize_toy_manifest(*dataset.toy);
    export_images(o.manifest, out / "images");
    o.manifest.root = "images";
  } else if (!dataset.root.empty()) {
    const auto layout = dataset.layout.empty() ? Layout::standard() : Layout::load(dataset.layout);
    auto r = ingest_directory(dataset.root, layout);
    o.manifest = std::move(r.manifest);
    o.issues = std::move(r.issues);
  } else if (!dataset.manifest.empty()) {
    o.manifest = read_manifest(dataset.manifest, true).manifest;
    if (o.manifest.root.is_relative()) o.manifest.root = fs::absolute(dataset.manifest.parent_path() / o.manifest.root);
  } else {
    throw Error(ErrorCode::InvalidConfig, "dataset: one of manifest, root or toy is required");
  }
  o.violations = validate_manifest(o.manifest);
  o.manifest_path = out / "manifest.tsv";
  write_manifest(o.manifest, o.manifest_path);
  return o;
}

namespace {

/// An opened run directory: lock held, manifest materialised, record loaded.
struct Run {
  ExperimentConfig config;
  std::string hash;
  fs::path dir;
  std::unique_ptr<RunLock> lock;
  RunRecord record;
  Manifest manifest;
  std::string manifest_hash;
  std::shared_ptr<EmbeddingCache> cache;

  explicit Run(const ExperimentConfig& c) : config(c), hash(c.hash()), dir(run_directory(c)) {
    config.validate();
    lock = std::make_unique<RunLock>(dir);
    if (fs::exists(dir / "run.json")) {
      record = RunRecord::load(dir);
      if (record.config_hash != hash) {
        throw Error(ErrorCode::InvalidConfig, "run directory " + dir.string() + " belongs to config " +
                                                  record.config_hash);
      }
    } else {
      record.config_hash = hash;
      record.created = utc_now();
    }
    record.environment = environment_descriptor();

    const auto manifest_path = dir / "manifest.tsv";
    if (!fs::exists(manifest_path)) {
      auto m = load_dataset(config.dataset);
      if (config.dataset.toy) {
        export_images(m, dir / "images");
        m.root = "images";
      }
      write_manifest(m, manifest_path, hash);
    }
    auto file = read_manifest(manifest_path, true);
    if (file.config_hash != hash) {
      throw Error(ErrorCode::FormatError, manifest_path.string() + " carries config hash " + file.config_hash);
    }
    manifest = std::move(file.manifest);
    manifest_hash = manifest.digest();
    record.artifacts["manifest"] = "manifest.tsv";

    write_text(dir / "config.json", json{{"config_hash", hash}, {"config", json::parse(config.to_json())}}.dump(2) + "\n");
    record.artifacts["config"] = "config.json";
    cache = std::make_shared<EmbeddingCache>(dir / "features");
  }

  void finish() {
    cache->flush();
    json stores = json::array();
    if (fs::exists(dir / "features")) {
      std::vector<std::string> names;
      for (const auto& e : fs::directory_iterator(dir / "features")) {
        if (e.path().extension() == ".emb") names.push_back(e.path().filename().string());
      }
      std::sort(names.begin(), names.end());
      stores = names;
    }
    write_text(dir / "features" / "index.json",
               json{{"config_hash", hash}, {"entries", cache->size()}, {"stores", stores}}.dump(2) + "\n");
    record.artifacts["feature_store"] = "features/index.json";
    record.updated = utc_now();
    record.save(dir);
  }
};

const char* kStage1Checkpoint = "checkpoints/stage1.ckpt";

std::string encoder_checkpoint(DrawingType t) { return "checkpoints/encoder_" + std::string(to_string(t)) + ".ckpt"; }
std::string classifier_checkpoint(DrawingType t) {
  return "checkpoints/classifier_" + std::string(to_string(t)) + ".ckpt";
}

std::string percent(std::optional<double> v) {
  if (!v) return "NA";
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << 100.0 * *v << "%";
  return out.str();
}

}  // namespace

CommandResult cmd_preprocess(const ExperimentConfig& config) {
  Run run(config);
  const Workbench wb(run.manifest, run.config, run.cache, run.manifest_hash);
  const auto dirs = wb.export_tiles(run.dir / "tiles", wb.default_cell(), run.hash);
  CommandResult r;
  for (const auto& d : dirs) {
    const auto rel = fs::relative(d / "index.tsv", run.dir).generic_string();
    const bool training = dirs.size() > 1 && d == dirs.front();
    run.record.artifacts[training ? "tiles_train" : "tiles_inference"] = rel;
    r.messages.push_back("tiles: " + rel);
  }
  run.finish();
  r.run_dir = run.dir;
  r.record = run.record;
  return r;
}

CommandResult cmd_train(const ExperimentConfig& config) {
  Run run(config);
  const Workbench wb(run.manifest, run.config, run.cache, run.manifest_hash);
  const auto cell = wb.default_cell();
  const auto samples = all_indices(run.manifest);
  wb.prefetch(samples, cell);
  const auto models = wb.train(samples, cell, "full");
  CommandResult r;

  save_type_classifier(models.stage1, run.dir / kStage1Checkpoint, run.hash);
  run.record.artifacts["stage1"] = kStage1Checkpoint;
  for (auto t : kDrawingTypes) {
    const std::string name(to_string(t));
    const auto enc = models.encoders.find(t);
    const auto cls = models.classifiers.find(t);
    if (enc == models.encoders.end()) {
      r.messages.push_back("no " + name + " drawings: stage 2/3 skipped");
      continue;
    }
    save_encoder(enc->second, run.dir / encoder_checkpoint(t), run.hash);
    save_classifier(cls->second, run.dir / classifier_checkpoint(t), run.hash);
    run.record.artifacts["encoder_" + name] = encoder_checkpoint(t);
    run.record.artifacts["classifier_" + name] = classifier_checkpoint(t);
  }

  // resubstitution check; cross-validated numbers come from evaluate
  const auto images = wb.predict(models, samples, cell);
  std::size_t routed = 0, correct = 0;
  for (const auto& im : images) {
    routed += im.prediction.routed_type == im.true_type;
    correct += im.prediction.label == im.truth;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(images.size(), 1));
  r.messages.push_back("trained on " + std::to_string(samples.size()) + " drawings; training-set type accuracy " +
                       percent(routed / n) + ", PD accuracy " + percent(correct / n));
  run.finish();
  r.run_dir = run.dir;
  r.record = run.record;
  return r;
}

CommandResult cmd_evaluate(const ExperimentConfig& config, std::optional<SplitStrategy> strategy) {
  Run run(config);
  const auto missing = [&](const std::string& rel) {
    if (!fs::exists(run.dir / rel)) {
      throw Error(ErrorCode::MissingArtifact, "missing " + (run.dir / rel).string() + "; run `train` first");
    }
  };
  missing(kStage1Checkpoint);
  (void)load_type_classifier(run.dir / kStage1Checkpoint);
  for (auto t : kDrawingTypes) {
    if (run.manifest.counts.per_type[t] == 0) continue;
    missing(encoder_checkpoint(t));
    missing(classifier_checkpoint(t));
    const auto enc = load_encoder(run.dir / encoder_checkpoint(t));
    (void)load_classifier(run.dir / classifier_checkpoint(t), enc.state.id.output_dim);
  }

  const Workbench wb(run.manifest, run.config, run.cache, run.manifest_hash);
  const auto st = strategy.value_or(run.config.strategy);
  const auto cell = wb.default_cell();
  wb.prefetch(all_indices(run.manifest), cell);
  const auto plan = make_split(run.manifest, st, run.config.seed);
  auto report = evaluate_plan(run.manifest, plan, wb.fold_runner(cell), wb.report_meta(cell));

  const std::string stem = "reports/metrics_" + std::string(to_string(st));
  write_text(run.dir / (stem + ".json"), report.to_json());
  write_text(run.dir / (stem + ".csv"), "# config_hash=" + run.hash + "\n" + report.to_csv());
  run.record.artifacts["metrics_" + std::string(to_string(st))] = stem + ".json";
  run.record.artifacts["table_" + std::string(to_string(st))] = stem + ".csv";

  CommandResult r;
  r.messages.push_back(std::string(to_string(st)) + ": " + std::to_string(plan.folds.size()) +
                       " folds, weighted accuracy " + percent(report.weighted_accuracy) + ", type accuracy " +
                       percent(report.type_accuracy) + ", leaked subjects " + std::to_string(report.leakage.total()));
  r.messages.push_back("report: " + (run.dir / (stem + ".json")).string());
  run.finish();
  r.run_dir = run.dir;
  r.record = run.record;
  return r;
}

CommandResult cmd_ablate(const ExperimentConfig& config) {
  Run run(config);
  const Workbench wb(run.manifest, run.config, run.cache, run.manifest_hash);
  const auto factory = [&](const AblationCell& cell) {
    const CellSettings cs{cell.chunking ? run.config.grid : 1, cell.augmentation};
    wb.prefetch(all_indices(run.manifest), cs);
    return std::make_pair(wb.fold_runner(cs), wb.report_meta(cs));
  };
  const auto table = run_ablation(run.manifest, full_ablation_matrix(), run.config.seed, factory);

  auto doc = json::parse(table.to_json());
  doc["config_hash"] = run.hash;
  write_text(run.dir / "reports/ablation.json", doc.dump(2) + "\n");
  write_text(run.dir / "reports/ablation.csv", "# config_hash=" + run.hash + "\n" + table.to_csv());
  run.record.artifacts["ablation"] = "reports/ablation.json";
  run.record.artifacts["ablation_table"] = "reports/ablation.csv";

  CommandResult r;
  for (const auto& row : table.rows) {
    r.messages.push_back(std::string("chunking ") + (row.cell.chunking ? "on " : "off") + ", augmentation " +
                         (row.cell.augmentation ? "on " : "off") + ": weighted accuracy " +
                         percent(row.report.weighted_accuracy) + (row.reference ? " (reference)" : ""));
  }
  run.finish();
  r.run_dir = run.dir;
  r.record = run.record;
  return r;
}

std::string cmd_report(const ExperimentConfig& config) {
  config.validate();
  const auto dir = run_directory(config);
  const auto record = RunRecord::load(dir);
  std::ostringstream out;
  out << "run " << dir.string() << "\nconfig " << record.config_hash << "\ncreated " << record.created << ", updated "
      << record.updated << "\n";
  for (const auto& p : verify_run_record(record, dir)) out << "WARNING " << p << "\n";
  bool any = false;
  for (const auto& [name, rel] : record.artifacts) {
    if (fs::path(rel).extension() != ".csv") continue;
    any = true;
    out << "\n[" << name << "]\n";
    std::istringstream in(read_text(dir / rel));
    for (std::string line; std::getline(in, line);) {
      if (line.rfind("#", 0) != 0) out << line << "\n";
    }
  }
  if (!any) throw Error(ErrorCode::MissingArtifact, "no reports in " + dir.string() + "; run `evaluate` or `ablate`");
  return out.str();
}

}  // namespace chunkpd

#include "chunkpd/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "chunkpd/random.hpp"
#include "json.hpp"
#include "optim.hpp"

namespace chunkpd {

namespace fs = std::filesystem;
using nlohmann::json;
using optim::Matrix;

std::string_view to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::ResidualCnn: return "residual_cnn";
    case EncoderKind::PyramidTransformer: return "pyramid_transformer";
    case EncoderKind::HybridConcat: return "hybrid_concat";
  }
  return "?";
}

std::optional<EncoderKind> parse_encoder_kind(std::string_view s) {
  for (auto k : {EncoderKind::ResidualCnn, EncoderKind::PyramidTransformer, EncoderKind::HybridConcat}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

namespace {

void require_variant(BackboneKind kind, const std::string& variant) {
  const auto& known = backbone_variants(kind);
  if (std::find(known.begin(), known.end(), variant) == known.end()) {
    throw Error(ErrorCode::InvalidConfig,
                "unknown " + std::string(to_string(kind)) + " variant `" + variant + "`");
  }
}

std::pair<std::string, std::string> split_hybrid(const std::string& variant) {
  const auto plus = variant.find('+');
  if (plus == std::string::npos) {
    throw Error(ErrorCode::InvalidConfig, "hybrid_concat variant must be `<residual>+<pyramid>`, got `" + variant + "`");
  }
  return {variant.substr(0, plus), variant.substr(plus + 1)};
}

}  // namespace

EncoderId EncoderId::make(EncoderKind kind, const std::string& variant) {
  switch (kind) {
    case EncoderKind::ResidualCnn:
      require_variant(BackboneKind::ResidualCnn, variant);
      return {kind, variant, 512};
    case EncoderKind::PyramidTransformer:
      require_variant(BackboneKind::PyramidTransformer, variant);
      return {kind, variant, 512};
    case EncoderKind::HybridConcat: {
      const auto [r, p] = split_hybrid(variant);
      require_variant(BackboneKind::ResidualCnn, r);
      require_variant(BackboneKind::PyramidTransformer, p);
      return {kind, variant, 1024};
    }
  }
  throw Error(ErrorCode::InvalidConfig, "unknown encoder kind");
}

EncoderId EncoderId::residual(std::string variant) { return make(EncoderKind::ResidualCnn, variant); }
EncoderId EncoderId::pyramid(std::string variant) { return make(EncoderKind::PyramidTransformer, variant); }
EncoderId EncoderId::hybrid(const std::string& residual_variant, const std::string& pyramid_variant) {
  return make(EncoderKind::HybridConcat, residual_variant + "+" + pyramid_variant);
}

std::string EncoderId::display_name() const {
  switch (kind) {
    case EncoderKind::ResidualCnn: return "ResNet";
    case EncoderKind::PyramidTransformer: return "PVT";
    case EncoderKind::HybridConcat: return "PVT+ResNet";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// EmbeddingCache

namespace {

constexpr const char* kStoreMagic = "#chunkpd-embeddings";

}  // namespace

std::size_t EmbeddingCache::DigestHash::operator()(const Digest& d) const noexcept {
  std::size_t h;
  std::memcpy(&h, d.data(), sizeof(h));
  return h;
}

EmbeddingCache::EmbeddingCache(fs::path directory) : dir_(std::move(directory)) {
  if (!dir_.empty()) fs::create_directories(dir_);
}

Digest EmbeddingCache::key(const Backbone& backbone, const Image& image) {
  Sha256 h;
  h.update(backbone.digest());
  h.update(std::to_string(image.height) + "x" + std::to_string(image.width) + "x" + std::to_string(image.channels));
  h.update(std::span<const float>(image.pixels));
  return h.finish();
}

EmbeddingCache::Store& EmbeddingCache::store_for(const Backbone& backbone) {
  auto& store = stores_[backbone.digest()];
  if (store.loaded) return store;
  store.loaded = true;
  store.dim = backbone.native_dim();
  if (dir_.empty()) return store;
  std::ifstream in(dir_ / (backbone.digest().substr(0, 16) + ".emb"), std::ios::binary);
  if (!in) return store;
  std::string header;
  std::getline(in, header);
  if (!header.starts_with(kStoreMagic) || header.find("backbone=" + backbone.digest()) == std::string::npos) {
    throw Error(ErrorCode::FormatError, "feature store in " + dir_.string() + " belongs to another backbone");
  }
  const std::size_t record = sizeof(Digest) + static_cast<std::size_t>(store.dim) * sizeof(float);
  std::vector<char> buf(record);
  while (in.read(buf.data(), static_cast<std::streamsize>(record))) {
    Digest k;
    std::memcpy(k.data(), buf.data(), k.size());
    std::vector<float> v(static_cast<std::size_t>(store.dim));
    std::memcpy(v.data(), buf.data() + k.size(), v.size() * sizeof(float));
    store.entries.emplace(k, std::move(v));
  }
  return store;
}

std::optional<std::vector<float>> EmbeddingCache::find(const Backbone& backbone, const Digest& key) {
  std::lock_guard lock(mutex_);
  auto& store = store_for(backbone);
  const auto it = store.entries.find(key);
  if (it == store.entries.end()) return std::nullopt;
  return it->second;
}

std::vector<float> EmbeddingCache::embed(const Backbone& backbone, const Image& image) {
  const auto k = key(backbone, image);
  {
    std::lock_guard lock(mutex_);
    auto& store = store_for(backbone);
    const auto it = store.entries.find(k);
    if (it != store.entries.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto v = backbone.embed(image);
  std::lock_guard lock(mutex_);
  ++misses_;
  auto& store = stores_[backbone.digest()];
  if (store.entries.emplace(k, v).second) store.pending.push_back(k);
  return v;
}

void EmbeddingCache::flush() {
  std::lock_guard lock(mutex_);
  if (dir_.empty()) {
    for (auto& [digest, store] : stores_) store.pending.clear();
    return;
  }
  for (auto& [digest, store] : stores_) {
    if (store.pending.empty()) continue;
    const auto path = dir_ / (digest.substr(0, 16) + ".emb");
    const bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    if (fresh) out << kStoreMagic << "\tv1\tbackbone=" << digest << "\tdim=" << store.dim << '\n';
    for (const auto& k : store.pending) {
      const auto& v = store.entries.at(k);
      out.write(reinterpret_cast<const char*>(k.data()), static_cast<std::streamsize>(k.size()));
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    store.pending.clear();
  }
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const auto& [digest, store] : stores_) n += store.entries.size();
  return n;
}

std::size_t EmbeddingCache::hits() const {
  std::lock_guard lock(mutex_);
  return hits_;
}

std::size_t EmbeddingCache::misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

// ---------------------------------------------------------------------------
// Heads and their training

ProjectionHead ProjectionHead::identity(int dim) {
  ProjectionHead h;
  h.dim = dim;
  h.mean.assign(static_cast<std::size_t>(dim), 0.0f);
  h.inv_std.assign(static_cast<std::size_t>(dim), 1.0f);
  h.weight.assign(static_cast<std::size_t>(dim) * dim, 0.0f);
  for (int i = 0; i < dim; ++i) h.weight[static_cast<std::size_t>(i) * dim + i] = 1.0f;
  h.bias.assign(static_cast<std::size_t>(dim), 0.0f);
  return h;
}

std::vector<float> ProjectionHead::apply(const std::vector<float>& x) const {
  if (static_cast<int>(x.size()) != dim) {
    throw Error(ErrorCode::DimensionMismatch,
                "projection expects " + std::to_string(dim) + " inputs, got " + std::to_string(x.size()));
  }
  Eigen::VectorXf z(dim);
  for (int i = 0; i < dim; ++i) z(i) = (x[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) * inv_std[static_cast<std::size_t>(i)];
  Eigen::Map<const Matrix> w(weight.data(), dim, dim);
  Eigen::VectorXf y = w * z;
  std::vector<float> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) out[static_cast<std::size_t>(i)] = y(i) + bias[static_cast<std::size_t>(i)];
  return out;
}

std::vector<double> SoftmaxHead::probabilities(const std::vector<float>& x) const {
  if (static_cast<int>(x.size()) != in_dim) {
    throw Error(ErrorCode::DimensionMismatch,
                "softmax head expects " + std::to_string(in_dim) + " inputs, got " + std::to_string(x.size()));
  }
  std::vector<double> logits(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    double s = bias[static_cast<std::size_t>(c)];
    for (int i = 0; i < in_dim; ++i) {
      const auto u = static_cast<std::size_t>(i);
      s += static_cast<double>(weight[static_cast<std::size_t>(c) * in_dim + u]) * (x[u] - mean[u]) * inv_std[u];
    }
    logits[static_cast<std::size_t>(c)] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& v : logits) sum += (v = std::exp(v - mx));
  for (auto& v : logits) v /= sum;
  return logits;
}

void FinetuneSchedule::validate() const {
  if (epochs < 0) throw Error(ErrorCode::InvalidConfig, "finetune.epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "finetune.batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::InvalidConfig, "finetune.learning_rate must be positive");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw Error(ErrorCode::InvalidConfig, "finetune.weight_decay must be >= 0");
  }
}

namespace {

void check_training_set(const std::vector<std::vector<float>>& x, const std::vector<int>& y, int dim, int classes) {
  if (x.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training examples");
  if (x.size() != y.size()) throw Error(ErrorCode::InvalidArgument, "feature and label counts differ");
  for (const auto& row : x) {
    if (static_cast<int>(row.size()) != dim) {
      throw Error(ErrorCode::DimensionMismatch,
                  "training feature has " + std::to_string(row.size()) + " values, expected " + std::to_string(dim));
    }
  }
  for (int label : y) {
    if (label < 0 || label >= classes) throw Error(ErrorCode::InvalidArgument, "class index out of range");
  }
}

/// Per-feature mean and inverse standard deviation; constant features keep scale 1.
void standardisation(const std::vector<std::vector<float>>& x, std::vector<float>& mean, std::vector<float>& inv_std) {
  const std::size_t d = x.front().size();
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  for (const auto& row : x) {
    for (std::size_t j = 0; j < d; ++j) mu[j] += row[j];
  }
  for (auto& m : mu) m /= static_cast<double>(x.size());
  for (const auto& row : x) {
    for (std::size_t j = 0; j < d; ++j) var[j] += (row[j] - mu[j]) * (row[j] - mu[j]);
  }
  mean.resize(d);
  inv_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double v = var[j] / static_cast<double>(x.size());
    mean[j] = static_cast<float>(mu[j]);
    inv_std[j] = v > 1e-12 ? static_cast<float>(1.0 / std::sqrt(v)) : 1.0f;
  }
}

Matrix standardised(const std::vector<std::vector<float>>& x, const std::vector<float>& mean,
                    const std::vector<float>& inv_std) {
  const auto d = static_cast<Eigen::Index>(mean.size());
  Matrix z(static_cast<Eigen::Index>(x.size()), d);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto u = static_cast<std::size_t>(j);
      z(static_cast<Eigen::Index>(i), j) = (x[i][u] - mean[u]) * inv_std[u];
    }
  }
  return z;
}

/// Mini-batch loop shared by both heads. `forward_backward` consumes a batch
/// (rows of z, labels) and returns the summed loss after filling gradients.
template <typename Step>
void run_epochs(Eigen::Index n, const FinetuneSchedule& schedule, optim::Adam& adam,
                const std::vector<const Matrix*>& grads, TrainingLog* log, Step&& forward_backward) {
  const int batch = schedule.batch_size;
  const long steps_per_epoch = static_cast<long>((n + batch - 1) / batch);
  const long total = steps_per_epoch * schedule.epochs;
  long step = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(derive_seed(schedule.seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);
    double loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index end = std::min<Eigen::Index>(n, start + batch);
      std::vector<Eigen::Index> rows(order.begin() + start, order.begin() + end);
      loss += forward_backward(rows);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::DivergedLoss, "non-finite loss in epoch " + std::to_string(epoch));
      }
      adam.step(grads, optim::cosine_lr(schedule.learning_rate, step, total));
      ++step;
    }
    if (log != nullptr) log->epoch_loss.push_back(loss / static_cast<double>(n));
  }
}

}  // namespace

ProjectionHead finetune_projection(const ProjectionHead& head, const std::vector<std::vector<float>>& x,
                                   const std::vector<int>& y, int classes, const FinetuneSchedule& schedule,
                                   TrainingLog* log) {
  schedule.validate();
  check_training_set(x, y, head.dim, classes);
  if (schedule.epochs == 0) return head;

  ProjectionHead out = head;
  standardisation(x, out.mean, out.inv_std);
  const Matrix z = standardised(x, out.mean, out.inv_std);
  const Eigen::Index d = head.dim;

  const Matrix w0 = Eigen::Map<const Matrix>(head.weight.data(), d, d);
  Matrix w = w0;
  Matrix b = Eigen::Map<const Matrix>(head.bias.data(), 1, d);
  const auto decay = static_cast<float>(schedule.weight_decay);
  // Temporary class head, discarded after training.
  Matrix v(classes, d);
  Rng rng(derive_seed(schedule.seed, "class_head"));
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(0.01 * rng.normal());
  Matrix c = Matrix::Zero(1, classes);

  Matrix gw(d, d), gb(1, d), gv(classes, d), gc(1, classes);
  optim::Adam adam({&w, &b, &v, &c});
  run_epochs(z.rows(), schedule, adam, {&gw, &gb, &gv, &gc}, log, [&](const std::vector<Eigen::Index>& rows) {
    const auto m = static_cast<Eigen::Index>(rows.size());
    Matrix zb(m, d);
    std::vector<int> labels(rows.size());
    for (Eigen::Index r = 0; r < m; ++r) {
      zb.row(r) = z.row(rows[static_cast<std::size_t>(r)]);
      labels[static_cast<std::size_t>(r)] = y[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
    }
    Matrix h = zb * w.transpose();
    h.rowwise() += b.row(0);
    Matrix p = h * v.transpose();
    p.rowwise() += c.row(0);
    const double loss = optim::softmax_nll(p, labels);
    for (Eigen::Index r = 0; r < m; ++r) p(r, labels[static_cast<std::size_t>(r)]) -= 1.0f;
    p /= static_cast<float>(m);
    gv.noalias() = p.transpose() * h;
    gc = p.colwise().sum();
    const Matrix dh = p * v;
    gw.noalias() = dh.transpose() * zb;
    gb = dh.colwise().sum();
    if (decay > 0.0f) {
      gv += decay * v;
      gw += decay * (w - w0);
    }
    return loss;
  });

  std::copy(w.data(), w.data() + w.size(), out.weight.begin());
  std::copy(b.data(), b.data() + b.size(), out.bias.begin());
  return out;
}

SoftmaxHead train_softmax(const std::vector<std::vector<float>>& x, const std::vector<int>& y, int classes,
                          const FinetuneSchedule& schedule, TrainingLog* log) {
  schedule.validate();
  if (x.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training examples");
  const auto d = static_cast<int>(x.front().size());
  check_training_set(x, y, d, classes);

  SoftmaxHead out;
  out.in_dim = d;
  out.classes = classes;
  standardisation(x, out.mean, out.inv_std);
  const Matrix z = standardised(x, out.mean, out.inv_std);

  Matrix w = Matrix::Zero(classes, d);
  Matrix b = Matrix::Zero(1, classes);
  const auto decay = static_cast<float>(schedule.weight_decay);
  Matrix gw(classes, d), gb(1, classes);
  optim::Adam adam({&w, &b});
  run_epochs(z.rows(), schedule, adam, {&gw, &gb}, log, [&](const std::vector<Eigen::Index>& rows) {
    const auto m = static_cast<Eigen::Index>(rows.size());
    Matrix zb(m, d);
    std::vector<int> labels(rows.size());
    for (Eigen::Index r = 0; r < m; ++r) {
      zb.row(r) = z.row(rows[static_cast<std::size_t>(r)]);
      labels[static_cast<std::size_t>(r)] = y[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
    }
    Matrix p = zb * w.transpose();
    p.rowwise() += b.row(0);
    const double loss = optim::softmax_nll(p, labels);
    for (Eigen::Index r = 0; r < m; ++r) p(r, labels[static_cast<std::size_t>(r)]) -= 1.0f;
    p /= static_cast<float>(m);
    gw.noalias() = p.transpose() * zb;
    gb = p.colwise().sum();
    if (decay > 0.0f) gw += decay * w;
    return loss;
  });

  out.weight.assign(w.data(), w.data() + w.size());
  out.bias.assign(b.data(), b.data() + b.size());
  return out;
}

// ---------------------------------------------------------------------------
// Encoders

BackboneSource BackboneSources::for_kind(BackboneKind kind) const {
  return {seed, kind == BackboneKind::ResidualCnn ? residual_weights : pyramid_weights};
}

EncoderState initial_encoder_state(const EncoderId& id, const BackboneSources& sources) {
  const EncoderId checked = EncoderId::make(id.kind, id.variant);
  std::vector<std::pair<BackboneKind, std::string>> parts;
  switch (checked.kind) {
    case EncoderKind::ResidualCnn: parts = {{BackboneKind::ResidualCnn, checked.variant}}; break;
    case EncoderKind::PyramidTransformer: parts = {{BackboneKind::PyramidTransformer, checked.variant}}; break;
    case EncoderKind::HybridConcat: {
      const auto [r, p] = split_hybrid(checked.variant);
      parts = {{BackboneKind::ResidualCnn, r}, {BackboneKind::PyramidTransformer, p}};
      break;
    }
  }
  EncoderState state;
  state.id = checked;
  for (const auto& [kind, variant] : parts) {
    const auto source = sources.for_kind(kind);
    const auto backbone = shared_backbone(kind, variant, source);
    state.components.push_back(
        {kind, variant, source, backbone->digest(), ProjectionHead::identity(backbone->native_dim())});
  }
  return state;
}

Encoder::Encoder(EncoderState state, std::shared_ptr<EmbeddingCache> cache) : cache_(std::move(cache)) {
  if (state.components.empty()) throw Error(ErrorCode::ModelNotLoaded, "encoder state has no components");
  int total = 0;
  for (const auto& c : state.components) {
    auto backbone = shared_backbone(c.kind, c.variant, c.source);
    if (!c.backbone_digest.empty() && backbone->digest() != c.backbone_digest) {
      throw Error(ErrorCode::ModelNotLoaded, "backbone weights for " + c.variant + " differ from the checkpoint");
    }
    if (c.head.dim != backbone->native_dim()) {
      throw Error(ErrorCode::DimensionMismatch, "projection width does not match the " + c.variant + " trunk");
    }
    total += c.head.dim;
    backbones_.push_back(std::move(backbone));
  }
  if (total != state.id.output_dim) {
    throw Error(ErrorCode::DimensionMismatch, "encoder components do not add up to output_dim");
  }
  state_ = std::make_shared<const EncoderState>(std::move(state));
}

const EncoderId& Encoder::id() const { return state().id; }

const EncoderState& Encoder::state() const {
  if (!state_) throw Error(ErrorCode::ModelNotLoaded, "encoder not loaded");
  return *state_;
}

std::vector<std::vector<float>> Encoder::embed_components(const Image& tile) const {
  if (!loaded()) throw Error(ErrorCode::ModelNotLoaded, "encoder not loaded");
  std::vector<std::vector<float>> raw;
  raw.reserve(backbones_.size());
  for (const auto& b : backbones_) raw.push_back(cache_ ? cache_->embed(*b, tile) : b->embed(tile));
  return raw;
}

std::vector<float> Encoder::project(const std::vector<std::vector<float>>& raw) const {
  const auto& s = state();
  if (raw.size() != s.components.size()) throw Error(ErrorCode::DimensionMismatch, "wrong number of components");
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(s.id.output_dim));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto part = s.components[i].head.apply(raw[i]);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

FeatureVector extract_features(const Tile& tile, const Encoder& encoder) {
  if (!encoder.loaded()) throw Error(ErrorCode::ModelNotLoaded, "encoder not loaded");
  const auto& img = tile.pixels;
  if (img.height != kTileSide || img.width != kTileSide || img.channels != 3) {
    throw Error(ErrorCode::DimensionMismatch, "features are extracted from 224x224x3 tiles, got " +
                                                  std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                                                  std::to_string(img.channels));
  }
  FeatureVector f;
  f.values = encoder.project(encoder.embed_components(img));
  f.encoder = encoder.id();
  f.tile_ref = tile_ref(tile);
  return f;
}

EncoderState finetune_on_embeddings(const EncoderState& state, const std::vector<std::vector<std::vector<float>>>& raw,
                                    const std::vector<Label>& labels, const FinetuneSchedule& schedule) {
  if (raw.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training tiles");
  if (raw.size() != labels.size()) throw Error(ErrorCode::InvalidArgument, "embedding and label counts differ");
  std::vector<int> y(labels.size());
  std::transform(labels.begin(), labels.end(), y.begin(), [](Label l) { return l == Label::PD ? 1 : 0; });
  EncoderState out = state;
  for (std::size_t c = 0; c < out.components.size(); ++c) {
    std::vector<std::vector<float>> x;
    x.reserve(raw.size());
    for (const auto& r : raw) {
      if (r.size() != out.components.size()) throw Error(ErrorCode::DimensionMismatch, "wrong number of components");
      x.push_back(r[c]);
    }
    FinetuneSchedule s = schedule;
    s.seed = derive_seed(schedule.seed, "component/" + std::to_string(c));
    out.components[c].head = finetune_projection(out.components[c].head, x, y, 2, s);
  }
  return out;
}

EncoderState finetune(const Encoder& encoder, const std::vector<LabeledTile>& tiles, const FinetuneSchedule& schedule) {
  if (tiles.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training tiles");
  std::vector<std::vector<std::vector<float>>> raw;
  std::vector<Label> labels;
  raw.reserve(tiles.size());
  for (const auto& t : tiles) {
    raw.push_back(encoder.embed_components(t.tile->pixels));
    labels.push_back(t.label);
  }
  return finetune_on_embeddings(encoder.state(), raw, labels, schedule);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json source_json(const BackboneSource& s) {
  return {{"seed", s.seed}, {"weights_path", s.weights_path.string()}};
}

BackboneSource source_from(const json& j) {
  return {j.at("seed").get<std::uint64_t>(), fs::path(j.at("weights_path").get<std::string>())};
}

nn::Param vec_param(const std::vector<float>& v, std::vector<int> shape) { return {std::move(shape), v}; }

std::vector<float> take(nn::ParamMap& params, const std::string& name, std::size_t expected, const fs::path& path) {
  const auto it = params.find(name);
  if (it == params.end() || it->second.values.size() != expected) {
    throw Error(ErrorCode::FormatError, "checkpoint " + path.string() + " has a missing or malformed " + name);
  }
  return std::move(it->second.values);
}

json read_header(const std::string& text, const std::string& format, const fs::path& path) {
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception&) {
    throw Error(ErrorCode::FormatError, "checkpoint " + path.string() + " has an unreadable header");
  }
  if (header.value("format", "") != format) {
    throw Error(ErrorCode::FormatError, path.string() + " is not a " + format + " file");
  }
  if (header.value("version", 0) != 1) throw Error(ErrorCode::FormatError, "unsupported checkpoint version");
  return header;
}

}  // namespace

void save_encoder(const EncoderState& state, const fs::path& path, const std::string& config_hash) {
  json header = {{"format", "chunkpd-encoder"},
                 {"version", 1},
                 {"kind", to_string(state.id.kind)},
                 {"variant", state.id.variant},
                 {"output_dim", state.id.output_dim},
                 {"drawing_type", state.drawing_type ? json(to_string(*state.drawing_type)) : json(nullptr)},
                 {"config_hash", config_hash},
                 {"components", json::array()}};
  nn::ParamMap params;
  for (std::size_t i = 0; i < state.components.size(); ++i) {
    const auto& c = state.components[i];
    header["components"].push_back({{"kind", to_string(c.kind)},
                                    {"variant", c.variant},
                                    {"source", source_json(c.source)},
                                    {"backbone_digest", c.backbone_digest},
                                    {"dim", c.head.dim}});
    const auto pre = "c" + std::to_string(i) + ".";
    params[pre + "mean"] = vec_param(c.head.mean, {c.head.dim});
    params[pre + "inv_std"] = vec_param(c.head.inv_std, {c.head.dim});
    params[pre + "weight"] = vec_param(c.head.weight, {c.head.dim, c.head.dim});
    params[pre + "bias"] = vec_param(c.head.bias, {c.head.dim});
  }
  nn::save_params(params, header.dump(), path);
}

EncoderCheckpoint load_encoder(const fs::path& path) {
  std::string text;
  auto params = nn::load_params(path, &text);
  const json header = read_header(text, "chunkpd-encoder", path);
  const auto kind = parse_encoder_kind(header.at("kind").get<std::string>());
  if (!kind) throw Error(ErrorCode::FormatError, "unknown encoder kind in " + path.string());
  EncoderCheckpoint cp;
  cp.config_hash = header.value("config_hash", "");
  cp.state.id = EncoderId::make(*kind, header.at("variant").get<std::string>());
  if (!header.at("drawing_type").is_null()) {
    cp.state.drawing_type = parse_drawing_type(header.at("drawing_type").get<std::string>());
  }
  const auto& comps = header.at("components");
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const auto& j = comps[i];
    ComponentState c;
    c.kind = j.at("kind").get<std::string>() == "residual_cnn" ? BackboneKind::ResidualCnn
                                                               : BackboneKind::PyramidTransformer;
    c.variant = j.at("variant").get<std::string>();
    c.source = source_from(j.at("source"));
    c.backbone_digest = j.at("backbone_digest").get<std::string>();
    const int dim = j.at("dim").get<int>();
    const auto d = static_cast<std::size_t>(dim);
    const auto pre = "c" + std::to_string(i) + ".";
    c.head.dim = dim;
    c.head.mean = take(params, pre + "mean", d, path);
    c.head.inv_std = take(params, pre + "inv_std", d, path);
    c.head.weight = take(params, pre + "weight", d * d, path);
    c.head.bias = take(params, pre + "bias", d, path);
    cp.state.components.push_back(std::move(c));
  }
  return cp;
}

// ---------------------------------------------------------------------------
// Stage 1

TypeClassifier::TypeClassifier(TypeClassifierState state, std::shared_ptr<EmbeddingCache> cache)
    : cache_(std::move(cache)) {
  require_variant(BackboneKind::ResidualCnn, state.variant);
  backbone_ = shared_backbone(BackboneKind::ResidualCnn, state.variant, state.source);
  if (!state.backbone_digest.empty() && backbone_->digest() != state.backbone_digest) {
    throw Error(ErrorCode::ModelNotLoaded, "type classifier trunk weights differ from the checkpoint");
  }
  if (state.head.classes != 3 || state.head.in_dim != backbone_->native_dim()) {
    throw Error(ErrorCode::ModelNotLoaded, "type classifier head is not trained");
  }
  state_ = std::make_shared<const TypeClassifierState>(std::move(state));
}

const TypeClassifierState& TypeClassifier::state() const {
  if (!state_) throw Error(ErrorCode::ModelNotLoaded, "type classifier not loaded");
  return *state_;
}

const Backbone& TypeClassifier::backbone() const {
  if (!backbone_) throw Error(ErrorCode::ModelNotLoaded, "type classifier not loaded");
  return *backbone_;
}

std::vector<float> TypeClassifier::embed(const Image& canvas) const {
  const auto& b = backbone();
  const auto input = type_classifier_input(canvas, state().input_side);
  return cache_ ? cache_->embed(b, input) : b.embed(input);
}

Image type_classifier_input(const Image& canvas, int side) {
  if (canvas.height == side && canvas.width == side) return canvas;
  Image out = resize(canvas, side);
  normalize_channels(out);
  return out;
}

TypePrediction TypeClassifier::classify_embedding(const std::vector<float>& embedding) const {
  const auto p = state().head.probabilities(embedding);
  TypePrediction out;
  for (std::size_t i = 0; i < 3; ++i) out.scores[i] = p[i];
  const auto best = std::max_element(out.scores.begin(), out.scores.end()) - out.scores.begin();
  out.drawing_type = kDrawingTypes[static_cast<std::size_t>(best)];
  return out;
}

TypePrediction classify_drawing_type(const Image& canvas, const TypeClassifier& classifier) {
  if (!classifier.loaded()) throw Error(ErrorCode::ModelNotLoaded, "type classifier not loaded");
  return classifier.classify_embedding(classifier.embed(canvas));
}

TypeClassifierState train_type_classifier(const std::vector<std::vector<float>>& canvas_embeddings,
                                          const std::vector<DrawingType>& types, const Backbone& backbone,
                                          const FinetuneSchedule& schedule, int input_side) {
  if (input_side < kMinTypeInputSide) {
    throw Error(ErrorCode::InvalidConfig, "type classifier input side must be >= " + std::to_string(kMinTypeInputSide));
  }
  if (backbone.kind() != BackboneKind::ResidualCnn) {
    throw Error(ErrorCode::InvalidConfig, "the type classifier uses a residual trunk");
  }
  if (canvas_embeddings.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no drawings for the type classifier");
  if (types.size() != canvas_embeddings.size()) throw Error(ErrorCode::InvalidArgument, "type label count differs");
  std::vector<int> y(types.size());
  std::transform(types.begin(), types.end(), y.begin(), [](DrawingType t) { return static_cast<int>(t); });
  TypeClassifierState s;
  s.variant = backbone.variant();
  s.input_side = input_side;
  s.source = backbone.source();
  s.backbone_digest = backbone.digest();
  if (schedule.epochs == 0) throw Error(ErrorCode::InvalidConfig, "the type classifier needs at least one epoch");
  s.head = train_softmax(canvas_embeddings, y, 3, schedule);
  return s;
}

void save_type_classifier(const TypeClassifierState& state, const fs::path& path, const std::string& config_hash) {
  const json header = {{"format", "chunkpd-type-classifier"},
                       {"version", 1},
                       {"kind", "residual_cnn"},
                       {"variant", state.variant},
                       {"input_side", state.input_side},
                       {"source", source_json(state.source)},
                       {"backbone_digest", state.backbone_digest},
                       {"in_dim", state.head.in_dim},
                       {"classes", state.head.classes},
                       {"config_hash", config_hash}};
  const auto& h = state.head;
  nn::ParamMap params;
  params["head.mean"] = vec_param(h.mean, {h.in_dim});
  params["head.inv_std"] = vec_param(h.inv_std, {h.in_dim});
  params["head.weight"] = vec_param(h.weight, {h.classes, h.in_dim});
  params["head.bias"] = vec_param(h.bias, {h.classes});
  nn::save_params(params, header.dump(), path);
}

TypeClassifierCheckpoint load_type_classifier(const fs::path& path) {
  std::string text;
  auto params = nn::load_params(path, &text);
  const json header = read_header(text, "chunkpd-type-classifier", path);
  TypeClassifierCheckpoint cp;
  cp.config_hash = header.value("config_hash", "");
  auto& s = cp.state;
  s.variant = header.at("variant").get<std::string>();
  s.input_side = header.at("input_side").get<int>();
  if (s.input_side < kMinTypeInputSide) throw Error(ErrorCode::FormatError, "bad input_side in " + path.string());
  s.source = source_from(header.at("source"));
  s.backbone_digest = header.at("backbone_digest").get<std::string>();
  s.head.in_dim = header.at("in_dim").get<int>();
  s.head.classes = header.at("classes").get<int>();
  const auto d = static_cast<std::size_t>(s.head.in_dim);
  const auto k = static_cast<std::size_t>(s.head.classes);
  s.head.mean = take(params, "head.mean", d, path);
  s.head.inv_std = take(params, "head.inv_std", d, path);
  s.head.weight = take(params, "head.weight", d * k, path);
  s.head.bias = take(params, "head.bias", k, path);
  return cp;
}

}  // namespace chunkpd

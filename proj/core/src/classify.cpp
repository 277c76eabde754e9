#include "chunkpd/classify.hpp"

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

std::string_view to_string(ClassifierKind k) {
  switch (k) {
    case ClassifierKind::Knn: return "knn";
    case ClassifierKind::DecisionTree: return "decision_tree";
    case ClassifierKind::RandomForest: return "random_forest";
    case ClassifierKind::NeuralNet: return "neural_net";
  }
  return "?";
}

std::optional<ClassifierKind> parse_classifier_kind(std::string_view s) {
  for (auto k : {ClassifierKind::Knn, ClassifierKind::DecisionTree, ClassifierKind::RandomForest,
                 ClassifierKind::NeuralNet}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

std::string_view short_name(ClassifierKind k) {
  switch (k) {
    case ClassifierKind::Knn: return "KNN";
    case ClassifierKind::DecisionTree: return "DT";
    case ClassifierKind::RandomForest: return "RF";
    case ClassifierKind::NeuralNet: return "NN";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Spec

namespace {

struct HyperDefault {
  const char* key;
  double value;
  double min;
  bool integer;
};

const std::vector<HyperDefault>& defaults_for(ClassifierKind k) {
  static const std::vector<HyperDefault> kKnn = {{"k", 5, 1, true}, {"standardize", 1, 0, true}};
  static const std::vector<HyperDefault> kTree = {{"max_depth", 0, 0, true}, {"min_samples_split", 2, 2, true}};
  static const std::vector<HyperDefault> kForest = {{"n_trees", 100, 1, true},
                                                    {"max_depth", 0, 0, true},
                                                    {"min_samples_split", 2, 2, true},
                                                    {"max_features", 0, 0, true}};
  static const std::vector<HyperDefault> kNet = {{"hidden", 128, 1, true},
                                                 {"epochs", 200, 1, true},
                                                 {"learning_rate", 1e-3, 0, false},
                                                 {"batch_size", 32, 1, true}};
  switch (k) {
    case ClassifierKind::Knn: return kKnn;
    case ClassifierKind::DecisionTree: return kTree;
    case ClassifierKind::RandomForest: return kForest;
    case ClassifierKind::NeuralNet: return kNet;
  }
  return kKnn;
}

}  // namespace

ClassifierSpec::ClassifierSpec(ClassifierKind k, std::map<std::string, double> h, std::uint64_t s)
    : kind(k), hyperparams(std::move(h)), seed(s) {
  validate();
}

void ClassifierSpec::validate() const {
  const auto& defs = defaults_for(kind);
  const auto prefix = std::string(to_string(kind)) + ".";
  for (const auto& [key, value] : hyperparams) {
    const auto it = std::find_if(defs.begin(), defs.end(), [&](const HyperDefault& d) { return key == d.key; });
    if (it == defs.end()) throw Error(ErrorCode::InvalidConfig, "unknown hyperparameter `" + prefix + key + "`");
    if (!std::isfinite(value) || value < it->min || (it->integer && value != std::floor(value)) ||
        (!it->integer && value <= it->min)) {
      throw Error(ErrorCode::InvalidConfig, "invalid value for `" + prefix + key + "`");
    }
  }
  if (kind == ClassifierKind::Knn && get("standardize") > 1) {
    throw Error(ErrorCode::InvalidConfig, "`knn.standardize` must be 0 or 1");
  }
}

double ClassifierSpec::get(const std::string& key) const {
  if (const auto it = hyperparams.find(key); it != hyperparams.end()) return it->second;
  for (const auto& d : defaults_for(kind)) {
    if (key == d.key) return d.value;
  }
  throw Error(ErrorCode::InvalidConfig, "unknown hyperparameter `" + std::string(to_string(kind)) + "." + key + "`");
}

std::map<std::string, double> ClassifierSpec::resolved() const {
  std::map<std::string, double> out;
  for (const auto& d : defaults_for(kind)) out[d.key] = get(d.key);
  return out;
}

// ---------------------------------------------------------------------------
// Models

namespace {

json binary(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes(v.size() * sizeof(float));
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return json::binary(std::move(bytes));
}

std::vector<float> floats(const json& j) {
  const auto& b = j.get_binary();
  if (b.size() % sizeof(float) != 0) throw Error(ErrorCode::FormatError, "malformed float array in checkpoint");
  std::vector<float> v(b.size() / sizeof(float));
  std::memcpy(v.data(), b.data(), b.size());
  return v;
}

struct Scaler {
  std::vector<float> mean;
  std::vector<float> inv_std;

  static Scaler fit(const std::vector<std::vector<float>>& x) {
    const std::size_t d = x.front().size();
    std::vector<double> mu(d, 0.0), var(d, 0.0);
    for (const auto& r : x) {
      for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
    }
    for (auto& m : mu) m /= static_cast<double>(x.size());
    for (const auto& r : x) {
      for (std::size_t j = 0; j < d; ++j) var[j] += (r[j] - mu[j]) * (r[j] - mu[j]);
    }
    Scaler s;
    s.mean.resize(d);
    s.inv_std.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double v = var[j] / static_cast<double>(x.size());
      s.mean[j] = static_cast<float>(mu[j]);
      s.inv_std[j] = v > 1e-12 ? static_cast<float>(1.0 / std::sqrt(v)) : 1.0f;
    }
    return s;
  }

  static Scaler identity(std::size_t d) { return {std::vector<float>(d, 0.0f), std::vector<float>(d, 1.0f)}; }

  std::vector<float> apply(const std::vector<float>& x) const {
    std::vector<float> z(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) z[j] = (x[j] - mean[j]) * inv_std[j];
    return z;
  }

  json to_json() const { return {{"mean", binary(mean)}, {"inv_std", binary(inv_std)}}; }
  static Scaler from_json(const json& j) { return {floats(j.at("mean")), floats(j.at("inv_std"))}; }
};

// k nearest neighbours; the score is the PD fraction among them.
class KnnModel final : public ClassifierModel {
 public:
  KnnModel(int k, Scaler scaler, Matrix points, std::vector<std::uint8_t> labels)
      : k_(k), scaler_(std::move(scaler)), points_(std::move(points)), labels_(std::move(labels)) {}

  static std::shared_ptr<KnnModel> fit(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                       const std::vector<Label>& y) {
    Scaler scaler = spec.get("standardize") != 0 ? Scaler::fit(x) : Scaler::identity(x.front().size());
    Matrix pts(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(x.front().size()));
    std::vector<std::uint8_t> labels(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto z = scaler.apply(x[i]);
      pts.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const optim::RowVector>(z.data(), static_cast<Eigen::Index>(z.size()));
      labels[i] = y[i] == Label::PD ? 1 : 0;
    }
    return std::make_shared<KnnModel>(static_cast<int>(spec.get("k")), std::move(scaler), std::move(pts),
                                      std::move(labels));
  }

  double score(const std::vector<float>& x) const override {
    const auto z = scaler_.apply(x);
    const Eigen::Map<const optim::RowVector> q(z.data(), static_cast<Eigen::Index>(z.size()));
    const Eigen::VectorXf d2 = (points_.rowwise() - q).rowwise().squaredNorm();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(d2.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(k_), idx.size());
    // Equal distances resolve to the earlier training row.
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](Eigen::Index a, Eigen::Index b) { return d2(a) < d2(b) || (d2(a) == d2(b) && a < b); });
    int pd = 0;
    for (std::size_t i = 0; i < k; ++i) pd += labels_[static_cast<std::size_t>(idx[i])];
    return static_cast<double>(pd) / static_cast<double>(k);
  }

  std::vector<std::uint8_t> serialize() const override {
    std::vector<float> pts(points_.data(), points_.data() + points_.size());
    return json::to_cbor(json{{"k", k_},
                              {"scaler", scaler_.to_json()},
                              {"rows", points_.rows()},
                              {"cols", points_.cols()},
                              {"points", binary(pts)},
                              {"labels", json::binary(labels_)}});
  }

  static std::shared_ptr<KnnModel> deserialize(const json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto pts = floats(j.at("points"));
    if (pts.size() != static_cast<std::size_t>(rows * cols)) throw Error(ErrorCode::FormatError, "knn point size");
    return std::make_shared<KnnModel>(j.at("k").get<int>(), Scaler::from_json(j.at("scaler")),
                                      Matrix(Eigen::Map<const Matrix>(pts.data(), rows, cols)),
                                      j.at("labels").get_binary());
  }

 private:
  int k_;
  Scaler scaler_;
  Matrix points_;
  std::vector<std::uint8_t> labels_;
};

// CART with Gini impurity. Leaves store the PD fraction of their samples.
struct TreeNode {
  int feature = -1;
  float threshold = 0.0f;
  int left = -1;
  int right = -1;
  float value = 0.0f;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double score(const std::vector<float>& x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
  }

  json to_json() const {
    std::vector<std::int32_t> ints;
    std::vector<float> vals;
    for (const auto& n : nodes) {
      ints.insert(ints.end(), {n.feature, n.left, n.right});
      vals.insert(vals.end(), {n.threshold, n.value});
    }
    std::vector<std::uint8_t> bytes(ints.size() * sizeof(std::int32_t));
    std::memcpy(bytes.data(), ints.data(), bytes.size());
    return {{"links", json::binary(std::move(bytes))}, {"values", binary(vals)}};
  }

  static Tree from_json(const json& j) {
    const auto& b = j.at("links").get_binary();
    const auto vals = floats(j.at("values"));
    std::vector<std::int32_t> ints(b.size() / sizeof(std::int32_t));
    std::memcpy(ints.data(), b.data(), ints.size() * sizeof(std::int32_t));
    if (ints.size() % 3 != 0 || vals.size() * 3 != ints.size() * 2) {
      throw Error(ErrorCode::FormatError, "malformed tree in checkpoint");
    }
    Tree t;
    for (std::size_t i = 0; i < ints.size() / 3; ++i) {
      t.nodes.push_back({ints[3 * i], vals[2 * i], ints[3 * i + 1], ints[3 * i + 2], vals[2 * i + 1]});
    }
    return t;
  }
};

struct TreeParams {
  int max_depth = 0;  // 0 = unlimited
  int min_samples_split = 2;
  int max_features = 0;  // 0 = all features
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<float>>& x, const std::vector<std::uint8_t>& y, TreeParams params,
              std::uint64_t seed)
      : x_(x), y_(y), params_(params), rng_(seed), dim_(static_cast<int>(x.front().size())) {
    features_.resize(static_cast<std::size_t>(dim_));
    std::iota(features_.begin(), features_.end(), 0);
  }

  Tree build(std::vector<int> rows) {
    Tree tree;
    grow(tree, rows, 0);
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    float threshold = 0.0f;
    double gain = -1.0;
  };

  int grow(Tree& tree, std::vector<int>& rows, int depth) {
    const int index = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    int pd = 0;
    for (int r : rows) pd += y_[static_cast<std::size_t>(r)];
    const int n = static_cast<int>(rows.size());
    tree.nodes[static_cast<std::size_t>(index)].value = static_cast<float>(pd) / static_cast<float>(n);
    const bool pure = pd == 0 || pd == n;
    const bool depth_limited = params_.max_depth > 0 && depth >= params_.max_depth;
    if (pure || depth_limited || n < params_.min_samples_split) return index;

    const Split split = best_split(rows, pd);
    if (split.feature < 0) return index;

    std::vector<int> left, right;
    for (int r : rows) {
      (x_[static_cast<std::size_t>(r)][static_cast<std::size_t>(split.feature)] <= split.threshold ? left : right)
          .push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = grow(tree, left, depth + 1);
    const int rr = grow(tree, right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(index)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = rr;
    return index;
  }

  // Features are visited in a seeded random order; at least max_features are
  // examined, continuing past constant ones until a valid split exists.
  Split best_split(const std::vector<int>& rows, int pd_total) {
    const int want = params_.max_features > 0 ? std::min(params_.max_features, dim_) : dim_;
    if (want < dim_) rng_.shuffle(features_);
    const double n = static_cast<double>(rows.size());
    const double parent = gini(pd_total, n);
    Split best;
    std::vector<std::pair<float, std::uint8_t>> column(rows.size());
    int examined = 0;
    for (int f : (want < dim_ ? features_ : identity_order())) {
      if (examined >= want && best.feature >= 0) break;
      ++examined;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto r = static_cast<std::size_t>(rows[i]);
        column[i] = {x_[r][static_cast<std::size_t>(f)], y_[r]};
      }
      std::sort(column.begin(), column.end());
      int left_pd = 0;
      for (std::size_t i = 0; i + 1 < column.size(); ++i) {
        left_pd += column[i].second;
        if (column[i].first == column[i + 1].first) continue;
        const double nl = static_cast<double>(i + 1);
        const double nr = n - nl;
        const double child = (nl * gini(left_pd, nl) + nr * gini(pd_total - left_pd, nr)) / n;
        const double gain = parent - child;
        if (gain > best.gain) {
          float t = column[i].first + (column[i + 1].first - column[i].first) * 0.5f;
          if (!(t < column[i + 1].first)) t = column[i].first;
          best = {f, t, gain};
        }
      }
    }
    return best;
  }

  const std::vector<int>& identity_order() {
    if (identity_.empty()) {
      identity_.resize(static_cast<std::size_t>(dim_));
      std::iota(identity_.begin(), identity_.end(), 0);
    }
    return identity_;
  }

  static double gini(double pd, double n) {
    const double p = pd / n;
    return 2.0 * p * (1.0 - p);
  }

  const std::vector<std::vector<float>>& x_;
  const std::vector<std::uint8_t>& y_;
  TreeParams params_;
  Rng rng_;
  int dim_;
  std::vector<int> features_;
  std::vector<int> identity_;
};

std::vector<std::uint8_t> binary_labels(const std::vector<Label>& y) {
  std::vector<std::uint8_t> out(y.size());
  std::transform(y.begin(), y.end(), out.begin(), [](Label l) { return l == Label::PD ? 1 : 0; });
  return out;
}

class ForestModel final : public ClassifierModel {
 public:
  explicit ForestModel(std::vector<Tree> trees) : trees_(std::move(trees)) {}

  static std::shared_ptr<ForestModel> fit_tree(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                               const std::vector<Label>& y) {
    const auto labels = binary_labels(y);
    TreeParams p{static_cast<int>(spec.get("max_depth")), static_cast<int>(spec.get("min_samples_split")), 0};
    std::vector<int> rows(x.size());
    std::iota(rows.begin(), rows.end(), 0);
    TreeBuilder builder(x, labels, p, derive_seed(spec.seed, "decision_tree"));
    return std::make_shared<ForestModel>(std::vector<Tree>{builder.build(std::move(rows))});
  }

  static std::shared_ptr<ForestModel> fit_forest(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                                 const std::vector<Label>& y) {
    const auto labels = binary_labels(y);
    const int dim = static_cast<int>(x.front().size());
    int max_features = static_cast<int>(spec.get("max_features"));
    if (max_features == 0) max_features = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(dim))));
    TreeParams p{static_cast<int>(spec.get("max_depth")), static_cast<int>(spec.get("min_samples_split")),
                 max_features};
    const int n_trees = static_cast<int>(spec.get("n_trees"));
    std::vector<Tree> trees;
    trees.reserve(static_cast<std::size_t>(n_trees));
    for (int t = 0; t < n_trees; ++t) {
      const auto seed = derive_seed(spec.seed, "tree/" + std::to_string(t));
      Rng rng(derive_seed(seed, "bootstrap"));
      std::vector<int> rows(x.size());
      for (auto& r : rows) r = static_cast<int>(rng.below(x.size()));
      TreeBuilder builder(x, labels, p, seed);
      trees.push_back(builder.build(std::move(rows)));
    }
    return std::make_shared<ForestModel>(std::move(trees));
  }

  double score(const std::vector<float>& x) const override {
    double s = 0.0;
    for (const auto& t : trees_) s += t.score(x);
    return s / static_cast<double>(trees_.size());
  }

  std::vector<std::uint8_t> serialize() const override {
    json arr = json::array();
    for (const auto& t : trees_) arr.push_back(t.to_json());
    return json::to_cbor(json{{"trees", std::move(arr)}});
  }

  static std::shared_ptr<ForestModel> deserialize(const json& j) {
    std::vector<Tree> trees;
    for (const auto& t : j.at("trees")) trees.push_back(Tree::from_json(t));
    if (trees.empty()) throw Error(ErrorCode::FormatError, "forest without trees");
    return std::make_shared<ForestModel>(std::move(trees));
  }

 private:
  std::vector<Tree> trees_;
};

// One hidden ReLU layer and a 2-way softmax, trained with Adam on standardised inputs.
class MlpModel final : public ClassifierModel {
 public:
  MlpModel(Scaler scaler, Matrix w1, Matrix b1, Matrix w2, Matrix b2)
      : scaler_(std::move(scaler)), w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {}

  static std::shared_ptr<MlpModel> fit(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                       const std::vector<Label>& y) {
    Scaler scaler = Scaler::fit(x);
    const auto n = static_cast<Eigen::Index>(x.size());
    const auto d = static_cast<Eigen::Index>(x.front().size());
    const auto h = static_cast<Eigen::Index>(spec.get("hidden"));
    Matrix z(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = scaler.apply(x[static_cast<std::size_t>(i)]);
      z.row(i) = Eigen::Map<const optim::RowVector>(row.data(), d);
    }
    const auto labels = binary_labels(y);
    std::vector<int> yi(labels.begin(), labels.end());

    Rng rng(derive_seed(spec.seed, "mlp/init"));
    Matrix w1(h, d), b1 = Matrix::Zero(1, h), w2(2, h), b2 = Matrix::Zero(1, 2);
    const double s1 = std::sqrt(2.0 / static_cast<double>(d));
    const double s2 = std::sqrt(1.0 / static_cast<double>(h));
    for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = static_cast<float>(s1 * rng.normal());
    for (Eigen::Index i = 0; i < w2.size(); ++i) w2.data()[i] = static_cast<float>(s2 * rng.normal());

    Matrix g1(h, d), gb1(1, h), g2(2, h), gb2(1, 2);
    optim::Adam adam({&w1, &b1, &w2, &b2});
    const int epochs = static_cast<int>(spec.get("epochs"));
    const auto batch = static_cast<Eigen::Index>(spec.get("batch_size"));
    const double lr = spec.get("learning_rate");
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (int e = 0; e < epochs; ++e) {
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      Rng shuffle(derive_seed(spec.seed, "mlp/epoch/" + std::to_string(e)));
      shuffle.shuffle(order);
      for (Eigen::Index start = 0; start < n; start += batch) {
        const Eigen::Index m = std::min(batch, n - start);
        Matrix zb(m, d);
        std::vector<int> lb(static_cast<std::size_t>(m));
        for (Eigen::Index r = 0; r < m; ++r) {
          const auto src = order[static_cast<std::size_t>(start + r)];
          zb.row(r) = z.row(src);
          lb[static_cast<std::size_t>(r)] = yi[static_cast<std::size_t>(src)];
        }
        Matrix pre = zb * w1.transpose();
        pre.rowwise() += b1.row(0);
        const Matrix act = pre.cwiseMax(0.0f);
        Matrix p = act * w2.transpose();
        p.rowwise() += b2.row(0);
        const double loss = optim::softmax_nll(p, lb);
        if (!std::isfinite(loss)) throw Error(ErrorCode::DivergedLoss, "neural_net loss became non-finite");
        for (Eigen::Index r = 0; r < m; ++r) p(r, lb[static_cast<std::size_t>(r)]) -= 1.0f;
        p /= static_cast<float>(m);
        g2.noalias() = p.transpose() * act;
        gb2 = p.colwise().sum();
        Matrix da = p * w2;
        da.array() *= (pre.array() > 0.0f).cast<float>();
        g1.noalias() = da.transpose() * zb;
        gb1 = da.colwise().sum();
        adam.step({&g1, &gb1, &g2, &gb2}, lr);
      }
    }
    return std::make_shared<MlpModel>(std::move(scaler), std::move(w1), std::move(b1), std::move(w2), std::move(b2));
  }

  double score(const std::vector<float>& x) const override {
    const auto z = scaler_.apply(x);
    const Eigen::Map<const optim::RowVector> q(z.data(), static_cast<Eigen::Index>(z.size()));
    const optim::RowVector act = ((q * w1_.transpose()) + b1_).cwiseMax(0.0f);
    const optim::RowVector logits = act * w2_.transpose() + b2_;
    const double a = logits(0), b = logits(1);
    return 1.0 / (1.0 + std::exp(a - b));
  }

  std::vector<std::uint8_t> serialize() const override {
    auto mat = [](const Matrix& m) {
      return json{{"rows", m.rows()},
                  {"cols", m.cols()},
                  {"data", binary(std::vector<float>(m.data(), m.data() + m.size()))}};
    };
    return json::to_cbor(
        json{{"scaler", scaler_.to_json()}, {"w1", mat(w1_)}, {"b1", mat(b1_)}, {"w2", mat(w2_)}, {"b2", mat(b2_)}});
  }

  static std::shared_ptr<MlpModel> deserialize(const json& j) {
    auto mat = [](const json& m) {
      const auto rows = m.at("rows").get<Eigen::Index>();
      const auto cols = m.at("cols").get<Eigen::Index>();
      const auto data = floats(m.at("data"));
      if (data.size() != static_cast<std::size_t>(rows * cols)) throw Error(ErrorCode::FormatError, "mlp matrix size");
      return Matrix(Eigen::Map<const Matrix>(data.data(), rows, cols));
    };
    return std::make_shared<MlpModel>(Scaler::from_json(j.at("scaler")), mat(j.at("w1")), mat(j.at("b1")),
                                      mat(j.at("w2")), mat(j.at("b2")));
  }

 private:
  Scaler scaler_;
  Matrix w1_, b1_, w2_, b2_;
};

}  // namespace

// ---------------------------------------------------------------------------

TrainedClassifier::TrainedClassifier(ClassifierSpec spec, int feature_dim, std::string manifest_hash,
                                     std::shared_ptr<const ClassifierModel> model)
    : spec_(std::move(spec)), feature_dim_(feature_dim), manifest_hash_(std::move(manifest_hash)),
      model_(std::move(model)) {}

const ClassifierModel& TrainedClassifier::model() const {
  if (!model_) throw Error(ErrorCode::ModelNotLoaded, "classifier not trained");
  return *model_;
}

double TrainedClassifier::score(const std::vector<float>& x) const {
  const auto& m = model();
  if (static_cast<int>(x.size()) != feature_dim_) {
    throw Error(ErrorCode::DimensionMismatch, "classifier expects " + std::to_string(feature_dim_) +
                                                  " features, got " + std::to_string(x.size()));
  }
  return std::clamp(m.score(x), 0.0, 1.0);
}

TrainedClassifier train_classifier(const ClassifierSpec& spec, const std::vector<std::vector<float>>& x,
                                   const std::vector<Label>& y, const std::string& manifest_hash) {
  spec.validate();
  if (x.empty()) throw Error(ErrorCode::EmptyFeatures, "no training features");
  if (x.size() != y.size()) throw Error(ErrorCode::InvalidArgument, "feature and label counts differ");
  const std::size_t dim = x.front().size();
  if (dim == 0) throw Error(ErrorCode::EmptyFeatures, "zero-length feature vectors");
  for (const auto& row : x) {
    if (row.size() != dim) throw Error(ErrorCode::DimensionMismatch, "training features differ in length");
    for (float v : row) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite training feature");
    }
  }
  const auto pd = std::count(y.begin(), y.end(), Label::PD);
  if (pd == 0 || pd == static_cast<std::ptrdiff_t>(y.size())) {
    throw Error(ErrorCode::SingleClassTraining, "training labels contain a single class");
  }
  std::shared_ptr<const ClassifierModel> model;
  switch (spec.kind) {
    case ClassifierKind::Knn: model = KnnModel::fit(spec, x, y); break;
    case ClassifierKind::DecisionTree: model = ForestModel::fit_tree(spec, x, y); break;
    case ClassifierKind::RandomForest: model = ForestModel::fit_forest(spec, x, y); break;
    case ClassifierKind::NeuralNet: model = MlpModel::fit(spec, x, y); break;
  }
  return TrainedClassifier(spec, static_cast<int>(dim), manifest_hash, std::move(model));
}

TrainedClassifier train_classifier(const ClassifierSpec& spec, const std::vector<LabeledFeature>& features,
                                   const std::string& manifest_hash) {
  std::vector<std::vector<float>> x;
  std::vector<Label> y;
  x.reserve(features.size());
  for (const auto& f : features) {
    x.push_back(f.feature.values);
    y.push_back(f.label);
  }
  return train_classifier(spec, x, y, manifest_hash);
}

TilePrediction predict_tile(const TrainedClassifier& classifier, const FeatureVector& feature) {
  TilePrediction p;
  p.tile_ref = feature.tile_ref;
  p.score = classifier.score(feature.values);
  p.label = p.score >= 0.5 ? Label::PD : Label::Healthy;
  return p;
}

ImagePrediction vote(const std::vector<TilePrediction>& tiles) {
  if (tiles.empty()) throw Error(ErrorCode::EmptyVote, "no tile predictions to vote on");
  ImagePrediction out;
  out.sample_id = tiles.front().tile_ref.sample_id;
  double sum = 0.0;
  for (const auto& t : tiles) {
    if (t.tile_ref.sample_id != out.sample_id) {
      throw Error(ErrorCode::MixedParents,
                  "tiles of `" + out.sample_id + "` and `" + t.tile_ref.sample_id + "` in one vote");
    }
    (t.label == Label::PD ? out.pd_votes : out.healthy_votes) += 1;
    sum += t.score;
  }
  out.mean_score = sum / static_cast<double>(tiles.size());
  if (out.pd_votes != out.healthy_votes) {
    out.label = out.pd_votes > out.healthy_votes ? Label::PD : Label::Healthy;
  } else {
    // Healthy only when its mean confidence (1 - mean PD score) is strictly greater.
    out.tie_broken = true;
    out.label = out.mean_score >= 0.5 - 1e-9 ? Label::PD : Label::Healthy;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_classifier(const TrainedClassifier& classifier, const fs::path& path, const std::string& config_hash) {
  const auto& spec = classifier.spec();
  const json header = {{"format", "chunkpd-classifier"},
                       {"version", 1},
                       {"kind", to_string(spec.kind)},
                       {"hyperparams", spec.resolved()},
                       {"seed", spec.seed},
                       {"feature_dim", classifier.feature_dim()},
                       {"manifest_hash", classifier.manifest_hash()},
                       {"config_hash", config_hash}};
  const auto body = classifier.model().serialize();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
}

ClassifierCheckpoint load_classifier(const fs::path& path, std::optional<int> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingArtifact, "classifier checkpoint not found: " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception&) {
    throw Error(ErrorCode::FormatError, path.string() + " has an unreadable header");
  }
  if (header.value("format", "") != "chunkpd-classifier" || header.value("version", 0) != 1) {
    throw Error(ErrorCode::FormatError, path.string() + " is not a classifier checkpoint");
  }
  const int dim = header.at("feature_dim").get<int>();
  if (expected_dim && *expected_dim != dim) {
    throw Error(ErrorCode::DimensionMismatch, "classifier in " + path.string() + " expects " + std::to_string(dim) +
                                                  " features, the encoder produces " + std::to_string(*expected_dim));
  }
  const auto kind = parse_classifier_kind(header.at("kind").get<std::string>());
  if (!kind) throw Error(ErrorCode::FormatError, "unknown classifier kind in " + path.string());
  ClassifierSpec spec(*kind, header.at("hyperparams").get<std::map<std::string, double>>(),
                      header.at("seed").get<std::uint64_t>());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json body;
  try {
    body = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, "corrupt classifier body in " + path.string() + ": " + e.what());
  }
  std::shared_ptr<const ClassifierModel> model;
  switch (*kind) {
    case ClassifierKind::Knn: model = KnnModel::deserialize(body); break;
    case ClassifierKind::DecisionTree:
    case ClassifierKind::RandomForest: model = ForestModel::deserialize(body); break;
    case ClassifierKind::NeuralNet: model = MlpModel::deserialize(body); break;
  }
  return {TrainedClassifier(std::move(spec), dim, header.value("manifest_hash", ""), std::move(model)),
          header.value("config_hash", "")};
}

// ---------------------------------------------------------------------------

ImagePrediction predict_image(const DrawingSample& sample, const TrainedPipeline& pipeline) {
  const Image canvas = prepare_canvas(sample, pipeline.grid);
  const auto type = classify_drawing_type(canvas, pipeline.type_classifier).drawing_type;
  const auto enc = pipeline.encoders.find(type);
  const auto clf = pipeline.classifiers.find(type);
  if (enc == pipeline.encoders.end() || clf == pipeline.classifiers.end()) {
    throw Error(ErrorCode::ModelNotLoaded, "no " + std::string(to_string(type)) + " encoder/classifier loaded");
  }
  std::vector<TilePrediction> preds;
  for (const auto& tile : run_pipeline(sample, pipeline.grid, pipeline.augmentation, false)) {
    preds.push_back(predict_tile(clf->second, extract_features(tile, enc->second)));
  }
  auto out = vote(preds);
  out.routed_type = type;
  return out;
}

}  // namespace chunkpd

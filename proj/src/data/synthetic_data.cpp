#include "kpop/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kpop/adam.hpp"
#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::data {

using nn::Tensor;

std::vector<ConceptClass> standard_classes() {
  return {
      {"circle", "circle", ShapeKind::circle, 4.0, 6.0, 1.5, 0.7, 1.0},
      {"square", "square", ShapeKind::square, 3.5, 5.5, 1.5, 0.7, 1.0},
      {"cross", "cross", ShapeKind::cross, 5.0, 6.5, 1.5, 0.7, 1.0},
      {"ring", "ring", ShapeKind::ring, 5.0, 6.5, 1.5, 0.7, 1.0},
      {"stripes-h", "hstripes", ShapeKind::hstripes, 3.5, 4.5, 0.0, 0.7, 1.0},
      {"stripes-v", "vstripes", ShapeKind::vstripes, 3.5, 4.5, 0.0, 0.7, 1.0},
      {"dot-grid", "dots", ShapeKind::dots, 1.2, 1.5, 0.0, 0.7, 1.0},
      {"triangle", "triangle", ShapeKind::triangle, 4.5, 6.0, 1.5, 0.7, 1.0},
  };
}

ConceptClass blank_class() { return {kBlankId, "", ShapeKind::blank, 0, 0, 0, 0, 0}; }

std::vector<ConceptClass> oracle_classes() {
  auto v = standard_classes();
  v.push_back(blank_class());
  return v;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// Point membership at (x, y) relative to the centre.
bool inside(ShapeKind kind, double x, double y, double r, double phase_x, double phase_y) {
  switch (kind) {
    case ShapeKind::circle: return x * x + y * y <= r * r;
    case ShapeKind::square: return std::max(std::abs(x), std::abs(y)) <= r;
    case ShapeKind::cross: {
      const double w = 1.3;
      return (std::abs(x) <= w && std::abs(y) <= r) || (std::abs(y) <= w && std::abs(x) <= r);
    }
    case ShapeKind::ring: {
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= (r - 1.6) * (r - 1.6);
    }
    case ShapeKind::hstripes: return std::sin(2 * kPi * y / r + phase_y) > 0;
    case ShapeKind::vstripes: return std::sin(2 * kPi * x / r + phase_x) > 0;
    case ShapeKind::dots: {
      const double sp = 4.0;
      const double gx = std::remainder(x + phase_x, sp), gy = std::remainder(y + phase_y, sp);
      return gx * gx + gy * gy <= r * r;
    }
    case ShapeKind::triangle: {
      if (y < -r || y > r) return false;
      return std::abs(x) <= (y + r) * 0.6;
    }
    case ShapeKind::blank: return false;
  }
  return false;
}

}  // namespace

Tensor render(const ConceptClass& cls, Rng& rng) {
  constexpr int n = kImageSize, ss = 4;
  const double cx = n / 2.0 + rng.uniform(-cls.jitter, cls.jitter);
  const double cy = n / 2.0 + rng.uniform(-cls.jitter, cls.jitter);
  const double r = rng.uniform(cls.size_min, cls.size_max);
  const double intensity = rng.uniform(cls.intensity_min, cls.intensity_max);
  const double px = rng.uniform(0.0, 2 * kPi), py = rng.uniform(0.0, 2 * kPi);
  const double dot_phase_x = rng.uniform(0.0, 4.0), dot_phase_y = rng.uniform(0.0, 4.0);
  const bool dots = cls.kind == ShapeKind::dots;
  std::vector<double> img(n * n, -1.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double fx = x + (sx + 0.5) / ss - cx, fy = y + (sy + 0.5) / ss - cy;
          hits += inside(cls.kind, fx, fy, r, dots ? dot_phase_x : px, dots ? dot_phase_y : py);
        }
      }
      img[static_cast<std::size_t>(y * n + x)] = -1.0 + (1.0 + intensity) * hits / double(ss * ss);
    }
  }
  return Tensor::from_data({1, 1, n, n}, std::move(img));
}

LabeledImages render_dataset(std::span<const ConceptClass> classes, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
  if (classes.empty()) throw ConfigError("no classes to render");
  LabeledImages out;
  constexpr std::size_t per = kImageSize * kImageSize;
  std::vector<double> all;
  all.reserve(classes.size() * static_cast<std::size_t>(n_per_class) * per);
  Rng rng(seed);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    out.class_ids.push_back(classes[c].concept_id);
    for (int i = 0; i < n_per_class; ++i) {
      auto img = render(classes[c], rng);
      all.insert(all.end(), img.data().begin(), img.data().end());
      out.labels.push_back(static_cast<int>(c));
    }
  }
  out.images = Tensor::from_data({static_cast<std::int64_t>(out.labels.size()), 1, kImageSize, kImageSize}, std::move(all));
  return out;
}

Tensor render_batch(std::span<const ConceptClass> classes, const std::string& concept_id, int n, Rng& rng) {
  const auto it = std::find_if(classes.begin(), classes.end(), [&](const ConceptClass& c) { return c.concept_id == concept_id; });
  if (it == classes.end()) throw RegistryError("no renderer for concept '" + concept_id + "'");
  if (n < 1) throw ConfigError("render_batch needs n >= 1");
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(n) * kImageSize * kImageSize);
  for (int i = 0; i < n; ++i) {
    auto img = render(*it, rng);
    all.insert(all.end(), img.data().begin(), img.data().end());
  }
  return Tensor::from_data({n, 1, kImageSize, kImageSize}, std::move(all));
}

void save_dataset(const std::filesystem::path& path, const LabeledImages& set, std::uint64_t seed) {
  io::Archive ar;
  ar.manifest.set("format", "kpop-dataset");
  ar.manifest.set_num("seed", seed);
  ar.manifest.set_num("count", static_cast<std::int64_t>(set.size()));
  std::string ids;
  for (const auto& c : set.class_ids) ids += (ids.empty() ? "" : ",") + c;
  ar.manifest.set("classes", ids);
  std::vector<double> labels(set.labels.begin(), set.labels.end());
  ar.tensors.emplace_back("images", set.images);
  const auto n = static_cast<std::int64_t>(labels.size());
  ar.tensors.emplace_back("labels", Tensor::from_data({n}, std::move(labels)));
  io::save_archive(path, ar);
}

LabeledImages load_dataset(const std::filesystem::path& path) {
  const auto ar = io::load_archive(path);
  if (ar.manifest.get_or("format", "") != "kpop-dataset") throw IoError(path.string() + " is not a dataset file");
  LabeledImages out;
  out.images = ar.tensor("images");
  for (double v : ar.tensor("labels").data()) out.labels.push_back(static_cast<int>(v));
  const auto& ids = ar.manifest.get("classes");
  std::size_t pos = 0;
  while (pos <= ids.size()) {
    auto end = ids.find(',', pos);
    if (end == std::string::npos) end = ids.size();
    out.class_ids.push_back(ids.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

text::ConceptRegistry standard_registry(std::span<const std::string> erase, std::uint64_t vocab_seed) {
  std::vector<text::ConceptSpec> specs;
  const auto classes = standard_classes();
  for (const auto& e : erase) {
    if (std::none_of(classes.begin(), classes.end(), [&](const ConceptClass& c) { return c.concept_id == e; })) {
      throw RegistryError("unknown class '" + e + "' in erase set");
    }
  }
  for (const auto& c : classes) {
    const bool er = std::find(erase.begin(), erase.end(), c.concept_id) != erase.end();
    specs.push_back({c.concept_id, {c.token}, er ? text::ConceptRole::erase : text::ConceptRole::preserve});
  }
  specs.push_back({kBlankId, {}, text::ConceptRole::neutral_target});
  text::ConceptRegistry reg(std::move(specs), vocab_seed);
  reg.validate();
  return reg;
}

Tensor slice_rows(const Tensor& x, std::int64_t first, std::int64_t count) {
  nn::Shape shape = x.shape();
  if (first < 0 || count < 0 || first + count > shape[0]) throw DimensionError("row slice out of range");
  const auto per = static_cast<std::int64_t>(x.numel()) / shape[0];
  shape[0] = count;
  const auto d = x.data();
  return Tensor::from_data(std::move(shape), std::vector<double>(d.begin() + first * per, d.begin() + (first + count) * per));
}

bool TopK::contains(std::string_view id) const {
  return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.first == id; });
}

void check_confusion(const std::vector<std::vector<double>>& confusion, std::span<const std::string> classes,
                     double limit) {
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    for (std::size_t j = 0; j < confusion[i].size(); ++j) {
      if (i != j && confusion[i][j] > limit) {
        throw StateError("class '" + classes[i] + "' is confused with '" + classes[j] + "' on " +
                         std::to_string(confusion[i][j] * 100) + "% of validation images");
      }
    }
  }
}

const Tensor& OracleClassifier::param(std::string_view name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw StateError("oracle has no parameter '" + std::string(name) + "'");
}

void OracleClassifier::require_trained() const {
  if (!trained()) throw StateError("oracle classifier is not trained");
}

int OracleClassifier::class_index(std::string_view id) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i] == id) return static_cast<int>(i);
  }
  throw RegistryError("oracle has no class '" + std::string(id) + "'");
}

Tensor OracleClassifier::forward(const Tensor& images, Tensor* feats) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kImageSize || images.dim(3) != kImageSize) {
    throw DimensionError("oracle expects [n, 1, 16, 16] images, got " + nn::shape_str(images.shape()));
  }
  const auto n = images.dim(0);
  auto h = nn::avg_pool2(nn::silu(nn::conv2d(images, param("c1.w"), param("c1.b"), 1)));
  h = nn::avg_pool2(nn::silu(nn::conv2d(h, param("c2.w"), param("c2.b"), 1)));
  auto f = nn::silu(nn::linear(nn::reshape(h, {n, -1}), param("f1.w"), param("f1.b")));
  if (feats) *feats = f;
  return nn::linear(f, param("f2.w"), param("f2.b"));
}

Tensor OracleClassifier::logits(const Tensor& images) const {
  require_trained();
  nn::NoGradGuard g;
  return forward(images, nullptr);
}

Tensor OracleClassifier::probabilities(const Tensor& images) const { return nn::softmax_lastdim(logits(images)); }

Tensor OracleClassifier::features(const Tensor& images) const {
  require_trained();
  nn::NoGradGuard g;
  Tensor f;
  forward(images, &f);
  return f;
}

std::vector<TopK> OracleClassifier::classify_topk(const Tensor& images, int k) const {
  if (k < 1) throw UsageError("top-k needs k >= 1");
  auto p = probabilities(images);
  const auto K = static_cast<std::size_t>(p.dim(1));
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), K);
  std::vector<TopK> out;
  for (std::int64_t i = 0; i < p.dim(0); ++i) {
    const auto row = p.data().subspan(static_cast<std::size_t>(i) * K, K);
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    TopK t;
    for (std::size_t j = 0; j < kk; ++j) t.entries.emplace_back(classes_[order[j]], row[order[j]]);
    out.push_back(std::move(t));
  }
  return out;
}

OracleClassifier OracleClassifier::train(const OracleConfig& cfg) {
  const auto classes = oracle_classes();
  const auto train_set = render_dataset(classes, cfg.n_train_per_class, cfg.seed);
  const auto val_set = render_dataset(classes, cfg.n_val_per_class, cfg.seed + 1);
  OracleClassifier o;
  o.classes_ = train_set.class_ids;
  o.seed_ = cfg.seed;
  Rng rng(cfg.seed ^ 0x5151);
  const auto K = static_cast<std::int64_t>(classes.size());
  auto add = [&](std::string name, nn::Shape shape, double sd) {
    auto t = sd > 0 ? Tensor::randn(std::move(shape), rng, sd, true) : Tensor::zeros(std::move(shape), true);
    o.params_.emplace_back(std::move(name), std::move(t));
  };
  add("c1.w", {8, 1, 3, 3}, std::sqrt(2.0 / 9));
  add("c1.b", {8}, 0);
  add("c2.w", {16, 8, 3, 3}, std::sqrt(2.0 / 72));
  add("c2.b", {16}, 0);
  add("f1.w", {256, 32}, std::sqrt(2.0 / 256));
  add("f1.b", {32}, 0);
  add("f2.w", {32, K}, std::sqrt(1.0 / 32));
  add("f2.b", {K}, 0);
  std::vector<Tensor> params;
  for (auto& p : o.params_) params.push_back(p.second);
  auto opt = nn::AdamState::init(params, cfg.lr);
  const int n = static_cast<int>(train_set.size());
  constexpr std::size_t per = kImageSize * kImageSize;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<double> batch(per * static_cast<std::size_t>(cfg.batch));
    std::vector<int> labels;
    for (int b = 0; b < cfg.batch; ++b) {
      const int r = rng.uniform_int(0, n - 1);
      labels.push_back(train_set.labels[static_cast<std::size_t>(r)]);
      const auto src = train_set.images.data().subspan(static_cast<std::size_t>(r) * per, per);
      for (std::size_t j = 0; j < per; ++j) batch[b * per + j] = src[j] + cfg.pixel_noise * rng.normal();
    }
    auto x = Tensor::from_data({cfg.batch, 1, kImageSize, kImageSize}, std::move(batch));
    nn::zero_grads(params);
    {
      nn::Tape tape;
      tape.backward(nn::cross_entropy(o.forward(x, nullptr), labels));
    }
    nn::adam_step(params, opt);
  }
  for (auto& p : o.params_) p.second.set_requires_grad(false);

  o.confusion_.assign(classes.size(), std::vector<double>(classes.size(), 0.0));
  auto top = o.classify_topk(val_set.images, 1);
  int correct = 0;
  for (std::size_t i = 0; i < top.size(); ++i) {
    const int pred = o.class_index(top[i].entries[0].first);
    const int truth = val_set.labels[i];
    o.confusion_[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)] += 1.0 / cfg.n_val_per_class;
    correct += pred == truth;
  }
  o.val_accuracy_ = double(correct) / double(top.size());
  if (o.val_accuracy_ < kAccuracyGate) {
    throw StateError("oracle validation accuracy " + std::to_string(o.val_accuracy_) + " is below the gate " +
                     std::to_string(kAccuracyGate));
  }
  check_confusion(o.confusion_, o.classes_, kConfusionLimit);
  return o;
}

std::string OracleClassifier::content_hash() const { return io::tensor_digest(params_); }

void OracleClassifier::save(const std::filesystem::path& path) const {
  require_trained();
  io::Archive ar;
  ar.manifest.set("format", "kpop-oracle");
  std::string ids;
  for (const auto& c : classes_) ids += (ids.empty() ? "" : ",") + c;
  ar.manifest.set("classes", ids);
  ar.manifest.set_num("seed", seed_);
  ar.manifest.set_num("validation_accuracy", val_accuracy_);
  for (std::size_t i = 0; i < confusion_.size(); ++i) {
    std::string row;
    for (double v : confusion_[i]) row += (row.empty() ? "" : ",") + io::Manifest::format_number(v);
    ar.manifest.set("confusion." + classes_[i], row);
  }
  ar.manifest.set("content_hash", content_hash());
  ar.tensors = params_;
  io::save_archive(path, ar);
}

OracleClassifier OracleClassifier::load(const std::filesystem::path& path) {
  const auto ar = io::load_archive(path);
  const auto& m = ar.manifest;
  if (m.get_or("format", "") != "kpop-oracle") throw FingerprintError(path.string() + " is not an oracle checkpoint");
  OracleClassifier o;
  const auto& ids = m.get("classes");
  std::size_t pos = 0;
  while (pos <= ids.size()) {
    auto end = ids.find(',', pos);
    if (end == std::string::npos) end = ids.size();
    o.classes_.push_back(ids.substr(pos, end - pos));
    pos = end + 1;
  }
  o.seed_ = std::stoull(m.get("seed"));
  o.val_accuracy_ = m.get_double("validation_accuracy");
  for (const auto& c : o.classes_) {
    std::vector<double> row;
    const auto& text = m.get("confusion." + c);
    std::size_t p = 0;
    while (p <= text.size()) {
      auto end = text.find(',', p);
      if (end == std::string::npos) end = text.size();
      row.push_back(std::stod(text.substr(p, end - p)));
      p = end + 1;
    }
    o.confusion_.push_back(std::move(row));
  }
  o.params_ = ar.tensors;
  if (o.content_hash() != m.get("content_hash")) throw FingerprintError("oracle content hash mismatch in " + path.string());
  return o;
}

}  // namespace kpop::data

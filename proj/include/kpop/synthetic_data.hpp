#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpop/rng.hpp"
#include "kpop/tensor.hpp"
#include "kpop/text_encoding.hpp"

namespace kpop::data {

enum class ShapeKind { circle, square, cross, ring, hstripes, vstripes, dots, triangle, blank };

/// Renderer parameters of one procedural class.
struct ConceptClass {
  std::string concept_id;
  std::string token;  // phrase used to prompt for it
  ShapeKind kind = ShapeKind::blank;
  double size_min = 4.0, size_max = 6.0;
  double jitter = 1.5;  // centre offset, pixels
  double intensity_min = 0.7, intensity_max = 1.0;
};

inline constexpr int kImageSize = 16;
inline constexpr const char* kBlankId = "blank";
inline constexpr const char* kForbiddenId = "cross";

/// circle, square, cross, ring, stripes-h, stripes-v, dot-grid, triangle.
std::vector<ConceptClass> standard_classes();
/// Background-only images, the output expected for the empty phrase.
ConceptClass blank_class();
/// standard_classes() followed by blank_class(): the oracle's label set.
std::vector<ConceptClass> oracle_classes();

/// One [1, 1, 16, 16] image in [-1, 1]; background -1.
nn::Tensor render(const ConceptClass& cls, Rng& rng);

struct LabeledImages {
  nn::Tensor images;        // [N, 1, 16, 16]
  std::vector<int> labels;  // index into class_ids
  std::vector<std::string> class_ids;

  std::size_t size() const { return labels.size(); }
};

/// n_per_class images of every class, class-major order; deterministic in seed.
LabeledImages render_dataset(std::span<const ConceptClass> classes, int n_per_class, std::uint64_t seed);

/// Fresh renders of the class with the given id, [n, 1, 16, 16]. RegistryError
/// for an unknown id.
nn::Tensor render_batch(std::span<const ConceptClass> classes, const std::string& concept_id, int n, Rng& rng);

void save_dataset(const std::filesystem::path& path, const LabeledImages& set, std::uint64_t seed);
LabeledImages load_dataset(const std::filesystem::path& path);

/// Registry over standard_classes(): ids in `erase` get the erase role, the
/// rest preserve; the neutral target is the empty phrase.
text::ConceptRegistry standard_registry(std::span<const std::string> erase, std::uint64_t vocab_seed);

struct OracleConfig {
  int n_train_per_class = 300;
  int n_val_per_class = 100;
  int steps = 600;
  int batch = 64;
  double lr = 3e-3;
  double pixel_noise = 0.08;  // augmentation stddev
  std::uint64_t seed = 1;
};

struct TopK {
  std::vector<std::pair<std::string, double>> entries;  // descending confidence
  bool contains(std::string_view id) const;
};

/// Small conv classifier used as the detector for every metric.
///   conv3x3(1->8) SiLU pool, conv3x3(8->16) SiLU pool, dense 256->32 SiLU
///   (features), dense 32->classes.
class OracleClassifier {
 public:
  static constexpr double kAccuracyGate = 0.95;
  static constexpr double kConfusionLimit = 0.05;

  OracleClassifier() = default;
  // Trains, validates on a held-out split, and enforces the accuracy and
  // pairwise-confusion gates (StateError on failure).
  static OracleClassifier train(const OracleConfig& cfg);

  bool trained() const { return !params_.empty(); }
  const std::vector<std::string>& classes() const { return classes_; }
  int class_index(std::string_view id) const;
  double validation_accuracy() const { return val_accuracy_; }
  // confusion[i][j] = fraction of class-i validation images labelled j.
  const std::vector<std::vector<double>>& confusion() const { return confusion_; }

  nn::Tensor logits(const nn::Tensor& images) const;       // [n, K]
  nn::Tensor probabilities(const nn::Tensor& images) const;  // [n, K]
  nn::Tensor features(const nn::Tensor& images) const;     // [n, 32]
  std::vector<TopK> classify_topk(const nn::Tensor& images, int k) const;

  std::string content_hash() const;
  void save(const std::filesystem::path& path) const;
  static OracleClassifier load(const std::filesystem::path& path);

 private:
  nn::Tensor forward(const nn::Tensor& images, nn::Tensor* features) const;
  const nn::Tensor& param(std::string_view name) const;
  void require_trained() const;

  std::vector<std::pair<std::string, nn::Tensor>> params_;
  std::vector<std::string> classes_;
  std::vector<std::vector<double>> confusion_;
  double val_accuracy_ = 0.0;
  std::uint64_t seed_ = 0;
};

/// Throws StateError naming the pair when any off-diagonal entry exceeds `limit`.
void check_confusion(const std::vector<std::vector<double>>& confusion, std::span<const std::string> classes,
                     double limit);

/// Rows [first, first+count) of an image batch.
nn::Tensor slice_rows(const nn::Tensor& x, std::int64_t first, std::int64_t count);

}  // namespace kpop::data

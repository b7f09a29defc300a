#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kpop/diffusion_model.hpp"
#include "kpop/image_io.hpp"
#include "kpop/kpop_trainer.hpp"
#include "kpop/synthetic_data.hpp"
#include "kpop/text_encoding.hpp"

namespace kpop::eval {

/// Same images as diffusion::sample, split across `jobs` threads by
/// chunk-aligned index ranges.
nn::Tensor generate(const diffusion::Denoiser& model, const nn::Tensor& c, int n, std::uint64_t seed,
                    const diffusion::SampleOptions& options, int jobs = 1);

/// Stable per-concept seed so a class's images do not depend on which
/// other classes are evaluated.
std::uint64_t concept_seed(std::uint64_t seed, std::string_view concept_id);

struct EvalOptions {
  int n = 64;
  std::vector<int> k_list{1, 5};
  std::vector<double> thresholds{0.3, 0.5, 0.7, 0.8};
  std::string ner_concept = data::kForbiddenId;  // empty disables the NER sweep
  int sampler_steps = 50;
  std::uint64_t seed = 11;
  int jobs = 1;

  void validate() const;
  std::string fingerprint() const;
};

/// Top-k detection counts for one class, without and (erase classes with a
/// key) with the secret key.
struct ClassMetrics {
  std::string concept_id;
  text::ConceptRole role = text::ConceptRole::preserve;
  int n = 0;
  std::vector<int> detected;                         // per k in k_list
  std::optional<std::vector<int>> detected_with_key;  // per k

  double detection_rate(std::size_t ki) const;  // percent
  std::optional<double> key_detection_rate(std::size_t ki) const;
};

/// Aggregate rates are means over the classes of the relevant role, in percent.
struct MetricsReport {
  std::string model_fingerprint;
  std::string model_role;
  std::string config_fingerprint;
  std::vector<int> k_list;
  std::vector<ClassMetrics> classes;
  std::vector<double> esr, psr;  // per k
  std::optional<std::vector<double>> rsr;
  std::vector<double> esr_std, psr_std, rsr_std;  // filled by merge_runs
  int runs = 1;
  std::string ner_concept;
  std::vector<std::pair<double, double>> ner;  // threshold -> percent

  double esr_at(int k) const;
  double psr_at(int k) const;
  std::optional<double> rsr_at(int k) const;
  std::optional<double> ner_at(double threshold) const;

  std::string to_text() const;
  std::string to_csv() const;
  void save(const std::filesystem::path& dir) const;  // report.txt + report.csv
};

/// ESR-k / PSR-k / RSR-k over the registry's erase and preserve classes.
/// Keys must belong to `model` (FingerprintError otherwise).
MetricsReport esr_psr_rsr(const diffusion::Denoiser& model, std::span<const trainer::PromptKey> keys,
                          const text::ConceptRegistry& registry, const text::Vocabulary& vocab,
                          const data::OracleClassifier& oracle, const EvalOptions& options);

/// Top-k lists for images [n, 1, H, W]; the oracle's classify_topk by default.
using Detector = std::function<std::vector<data::TopK>(const nn::Tensor& images, int k)>;
MetricsReport esr_psr_rsr(const diffusion::Denoiser& model, std::span<const trainer::PromptKey> keys,
                          const text::ConceptRegistry& registry, const text::Vocabulary& vocab,
                          const data::OracleClassifier& oracle, const EvalOptions& options, const Detector& detector);

/// Percent of images whose oracle confidence for `forbidden_id` is >= each
/// threshold. Computed from one image set, so the rates are monotone.
std::vector<std::pair<double, double>> ner_from_images(const nn::Tensor& images, const data::OracleClassifier& oracle,
                                                       const std::string& forbidden_id,
                                                       std::span<const double> thresholds);
std::vector<std::pair<double, double>> ner_sweep(const diffusion::Denoiser& model, const nn::Tensor& c,
                                                 const data::OracleClassifier& oracle, const std::string& forbidden_id,
                                                 std::span<const double> thresholds, int n, std::uint64_t seed,
                                                 int sampler_steps, int jobs = 1);

/// Mean +- std of the aggregate rates over several runs (e.g. class splits).
MetricsReport merge_runs(std::span<const MetricsReport> runs);

/// `count` seeded erase sets of `erase_size` classes drawn from `ids`.
std::vector<std::vector<std::string>> class_splits(std::span<const std::string> ids, int count, int erase_size,
                                                   std::uint64_t seed);

/// Percent of images of `concept_id` detected in the top-k when generated
/// with `key`, which may belong to another concept.
double detection_with_key(const diffusion::Denoiser& model, const trainer::PromptKey* key,
                          const text::Vocabulary& vocab, const text::ConceptRegistry& registry,
                          const std::string& concept_id, const data::OracleClassifier& oracle, int k,
                          const EvalOptions& options);

/// Cosine of the mean-pooled prompt rows against each probe phrase, per
/// logged step. Steps expected on the `every` grid but absent from the log
/// appear as gap rows (NaN).
struct AlignmentTrace {
  std::string concept_id;
  std::vector<std::string> probes;
  std::vector<int> steps;
  std::vector<std::vector<double>> cosine;  // [step][probe]
  std::vector<bool> gap;

  std::string to_csv() const;
  io::Image plot(const std::string& title) const;
};

AlignmentTrace alignment_trace(std::span<const trainer::PromptSnapshot> snapshots, const std::string& concept_id,
                               const text::Vocabulary& vocab, std::span<const text::Phrase> probes, int every = 0,
                               int last_step = -1);

double cosine(std::span<const double> a, std::span<const double> b);

/// Mean oracle features of fresh renders of each class.
std::vector<std::vector<double>> class_prototypes(const data::OracleClassifier& oracle,
                                                  std::span<const data::ConceptClass> classes, int n,
                                                  std::uint64_t seed);

/// Mean cosine between each image's oracle features and `prototype`.
double feature_alignment(const data::OracleClassifier& oracle, const nn::Tensor& images,
                         std::span<const double> prototype);

/// Frechet distance between Gaussian fits of oracle features of two image
/// sets. An analog of FID on the oracle's feature space.
double feature_frechet(const data::OracleClassifier& oracle, const nn::Tensor& a, const nn::Tensor& b);
double frechet_distance(std::span<const double> mean_a, std::span<const double> cov_a,
                        std::span<const double> mean_b, std::span<const double> cov_b, int dim);

/// Image-feature series: for every snapshot, images generated by `model`
/// with that prompt, aligned against each class prototype.
struct FeatureTrace {
  std::string concept_id;
  std::vector<std::string> classes;
  std::vector<int> steps;
  std::vector<std::vector<double>> alignment;  // [step][class]

  std::string to_csv() const;
};

FeatureTrace feature_trace(const diffusion::Denoiser& model, std::span<const trainer::PromptSnapshot> snapshots,
                           const std::string& concept_id, const text::Vocabulary& vocab,
                           const text::ConceptRegistry& registry, const data::OracleClassifier& oracle,
                           std::span<const data::ConceptClass> classes, attn::SiteSet sites, int k_factor,
                           attn::Mechanism mechanism, int n, int sampler_steps, std::uint64_t seed);

/// One ablation cell and the resulting report.
struct TrendRow {
  std::string value;  // as given on the grid
  double x = 0.0;     // numeric position for plotting
  MetricsReport report;
};

struct TrendTable {
  std::string parameter;
  std::vector<TrendRow> rows;

  std::string to_csv() const;
  std::string to_text() const;
  io::Image plot() const;
};

/// True when `values` is monotone in the given direction except for at most
/// `allowed` adjacent violations no larger than `slack`.
bool monotone_with_slack(std::span<const double> values, bool non_increasing, double slack, int allowed);

}  // namespace kpop::eval

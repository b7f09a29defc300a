#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kpop/adam.hpp"
#include "kpop/archive.hpp"
#include "kpop/cross_attention.hpp"
#include "kpop/diffusion_model.hpp"
#include "kpop/rng.hpp"
#include "kpop/text_encoding.hpp"

namespace kpop::trainer {

enum class PromptOptimizer { sgd, adam };
std::string_view optimizer_name(PromptOptimizer o);
PromptOptimizer parse_optimizer(std::string_view name);

struct KpopConfig {
  double lambda = 0.1;
  double rho = 0.0;  // <= 0 selects 3 * sqrt(m_p * d_p) * embedding scale
  int k_factor = 10;
  attn::Mechanism mechanism = attn::Mechanism::concat;
  attn::SiteSet sites = attn::SiteSet::mid_only();
  int steps = 1000;
  int inner_prompt_steps = 15;
  int inner_model_steps = 1;
  double lr_model = 1.25e-5;
  double lr_prompt = 1e-2;
  PromptOptimizer prompt_optimizer = PromptOptimizer::adam;
  int batch = 1;
  diffusion::TrainableSubset trainable_subset = diffusion::TrainableSubset::cross_attention;
  bool preserve_term = false;  // adds |eps'(c_p) - eps(c_p)|^2 over preserved concepts
  double init_noise = 0.01;
  std::uint64_t seed = 7;
  int log_every = 10;
  int snapshot_every = 50;

  // ConfigError on any out-of-range field.
  void validate() const;
  double resolved_rho(int m_c, int d_c, double embedding_scale) const;
  io::Manifest to_manifest() const;
  // Unknown keys are rejected.
  static KpopConfig from_manifest(const io::Manifest& m);
};

/// Adam or plain gradient descent on prompt values, followed by Euclidean
/// projection onto the ball |p - anchor| <= rho.
struct PromptOptimizerState {
  PromptOptimizer kind = PromptOptimizer::adam;
  double lr = 1e-2;
  double rho = 0.0;
  nn::Tensor anchor;
  nn::AdamState adam;

  static PromptOptimizerState create(PromptOptimizer kind, const nn::Tensor& values, const nn::Tensor& anchor,
                                     double lr, double rho);
};

/// In-place projection; returns the distance to the anchor afterwards.
double project_to_ball(nn::Tensor& values, const nn::Tensor& anchor, double rho);
double distance(const nn::Tensor& a, const nn::Tensor& b);

/// Builds a scalar loss that depends on the live prompt values.
using RecoveryObjective = std::function<nn::Tensor(Rng&)>;

struct StageLoss {
  double first = 0.0;  // mean over inner steps
  double last = 0.0;
};

/// `steps` projected descent steps on `prompt.values`. Every parameter other
/// than the prompt must be frozen by the caller; any gradient reaching a
/// tensor in `frozen` is a StateError.
StageLoss recovery_stage(const RecoveryObjective& objective, attn::Prompt& prompt, PromptOptimizerState& opt,
                         int steps, Rng& rng, const std::vector<nn::Tensor>& frozen = {});

/// x0 images [n, C, H, W] depicting a concept; drives the z_t draws.
using ConceptImageSource = std::function<nn::Tensor(const std::string& concept_id, int n, Rng& rng)>;

struct ConceptTexts {
  std::string concept_id;
  nn::Tensor encoding;  // [1, m_c, d_c]
};

/// |eps_theta'(z_t, c_e, p) - eps_theta(z_t, c_e)|^2 on fresh draws.
RecoveryObjective diffusion_recovery_objective(const diffusion::Denoiser& theta_prime,
                                               const diffusion::Denoiser& theta, const ConceptTexts& concept_text,
                                               const attn::Prompt& prompt, const KpopConfig& cfg,
                                               const ConceptImageSource& source);

struct HidingLoss {
  double total = 0.0;
  double erase = 0.0;     // L1
  double recover = 0.0;   // L2
  double preserve = 0.0;  // optional term
};

/// inner_model_steps Adam steps on the trainable subset of theta'. Prompts
/// are frozen for the duration.
HidingLoss hiding_stage(diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                        const std::vector<ConceptTexts>& erased, const std::vector<attn::Prompt*>& prompts,
                        const nn::Tensor& neutral, const std::vector<ConceptTexts>& preserved,
                        const KpopConfig& cfg, nn::AdamState& opt, const ConceptImageSource& source, Rng& rng);

/// The learned prompt bound to the sanitized checkpoint it unlocks.
struct PromptKey {
  attn::Prompt prompt;
  std::string concept_id;
  std::string model_fingerprint;  // content hash of the sanitized checkpoint
  attn::SiteSet sites = attn::SiteSet::mid_only();
  double rho = 0.0;
  double anchor_distance = 0.0;
  std::uint64_t seed = 0;
  io::Manifest config;

  // StateError when the prompt violates its rho constraint.
  void save(const std::filesystem::path& path) const;
  static PromptKey load(const std::filesystem::path& path);
  // As load(), and refuses (FingerprintError naming both fingerprints)
  // when the key was not produced for `model`.
  static PromptKey load_for(const std::filesystem::path& path, const diffusion::Denoiser& model);
  void check_matches(const diffusion::Denoiser& model) const;
};

struct LossRecord {
  int step = 0;
  double recovery = 0.0;
  double hiding = 0.0;
  double erase = 0.0;
  double recover = 0.0;
  double preserve = 0.0;
};

struct PromptSnapshot {
  int step = 0;
  std::string concept_id;
  nn::Tensor values;
};

struct KpopLog {
  std::vector<LossRecord> losses;
  std::vector<PromptSnapshot> snapshots;
  std::vector<double> rho_distance_max;  // largest |p - anchor| seen after each outer step

  std::string losses_csv() const;
  void save(const std::filesystem::path& dir) const;  // losses.csv + snapshots archive
  static std::vector<PromptSnapshot> load_snapshots(const std::filesystem::path& path);
};

struct KpopResult {
  diffusion::Denoiser sanitized;
  std::vector<PromptKey> keys;
  KpopLog log;
};

using ProgressFn = std::function<void(int step, const LossRecord&)>;

/// Alternates recovery and hiding for cfg.steps outer iterations starting
/// from theta' = theta. theta is never modified.
KpopResult run_kpop(const diffusion::Denoiser& theta, const text::ConceptRegistry& registry,
                    const text::Vocabulary& vocab, const KpopConfig& cfg, const ConceptImageSource& source,
                    const ProgressFn& progress = {});

/// Mean squared gaps on held-out draws: without key vs with key, both
/// measured against theta(c_e).
struct GapReport {
  double no_key = 0.0;
  double with_key = 0.0;
  double ratio() const { return with_key > 0 ? no_key / with_key : 0.0; }
};
GapReport key_gap(const diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                  const ConceptTexts& concept_text, const PromptKey& key, int draws, std::uint64_t seed,
                  const ConceptImageSource& source);

}  // namespace kpop::trainer

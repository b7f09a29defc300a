#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpop/cross_attention.hpp"
#include "kpop/rng.hpp"
#include "kpop/tensor.hpp"

namespace kpop::diffusion {

/// Linear-beta DDPM schedule. Index t runs 1..T; alpha_bar(0) = 1.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;       // betas[t-1]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product

  // Defaults are the 1000-step DDPM range 1e-4..0.02 rescaled by 1000/T.
  static NoiseSchedule linear(int T = 100, double beta_start = 1e-3, double beta_end = 0.2);
  double alpha_bar(int t) const;
  double beta(int t) const;
  void validate() const;
};

/// z_t and its timestep.
struct LatentState {
  nn::Tensor z;
  int t = 0;
};

// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, one t for the whole batch.
LatentState forward_noise(const nn::Tensor& x0, int t, const NoiseSchedule& schedule, const nn::Tensor& noise);
// Per-sample timesteps, ts.size() == batch.
nn::Tensor forward_noise(const nn::Tensor& x0, std::span<const int> ts, const NoiseSchedule& schedule,
                         const nn::Tensor& noise);

struct Architecture {
  int image_size = 16;
  int channels = 1;
  int width1 = 16;  // 16x16 blocks
  int width2 = 32;  // 8x8 and 4x4 blocks
  int heads = 4;
  int seq_len = 8;  // m_c
  int text_width = 64;  // d_c
  int time_dim = 32;

  std::string fingerprint() const;
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

enum class ModelRole { foundation, sanitized };
std::string_view role_name(ModelRole role);
ModelRole parse_model_role(std::string_view name);

enum class TrainableSubset { all, cross_attention, non_cross_attention };
std::string_view subset_name(TrainableSubset s);
TrainableSubset parse_subset(std::string_view name);

/// Where attention traces are collected during a forward pass.
struct TraceSink {
  attn::SiteSet sites;
  std::vector<attn::AttentionTrace> traces;
};

/// Text-conditioned U-Net epsilon-predictor.
///
///   d1 (16x16, w1) -> pool -> d2 (8x8, w2) -> pool -> mid (4x4, w2)
///   -> up -> u2 (8x8, cat d2) -> up -> u1 (16x16, cat d1) -> out conv
///
/// Every block is conv + timestep shift + SiLU followed by residual
/// cross-attention over the flattened feature map. d1/d2 are the "down"
/// site, u2/u1 the "up" site.
class Denoiser {
 public:
  Denoiser() = default;
  static Denoiser create(const Architecture& arch, const NoiseSchedule& schedule, std::uint64_t seed);

  const Architecture& arch() const { return arch_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::uint64_t seed() const { return seed_; }
  ModelRole role() const { return role_; }
  void set_role(ModelRole role) { role_ = role; }

  const std::vector<std::pair<std::string, nn::Tensor>>& named_parameters() const { return params_; }
  std::vector<nn::Tensor> parameters(TrainableSubset subset = TrainableSubset::all) const;
  const nn::Tensor& param(std::string_view name) const;
  std::size_t parameter_count() const;

  // Independent deep copy (fresh storage, same requires_grad flags).
  Denoiser clone() const;
  void set_requires_grad(bool on);

  /// Noise prediction for z [b, C, H, W] at per-sample timesteps, text
  /// c [b|1, m_c, d_c]. The prompt reaches only the layers at `sites`; all
  /// other layers attend to c alone.
  nn::Tensor predict_noise(const nn::Tensor& z, const nn::Tensor& c, std::span<const int> ts,
                           const attn::Prompt* prompt = nullptr, attn::SiteSet sites = attn::SiteSet::mid_only(),
                           TraceSink* sink = nullptr) const;
  nn::Tensor predict_noise(const nn::Tensor& z, const nn::Tensor& c, int t, const attn::Prompt* prompt = nullptr,
                           attn::SiteSet sites = attn::SiteSet::mid_only(), TraceSink* sink = nullptr) const;

  /// Token grid side of each attention layer, in layer order d1 d2 mid u2 u1.
  static constexpr int kLayerCount = 5;
  int layer_grid(int layer_index) const;
  attn::Site layer_site(int layer_index) const;

  // SHA-256 over all parameter tensors.
  std::string content_hash() const;

  void save(const std::filesystem::path& path) const;
  // FingerprintError when the stored content hash disagrees with the
  // tensors, or when `expected` is given and does not match.
  static Denoiser load(const std::filesystem::path& path, const Architecture* expected = nullptr);

 private:
  void build_layers();

  Architecture arch_;
  NoiseSchedule schedule_;
  std::uint64_t seed_ = 0;
  ModelRole role_ = ModelRole::foundation;
  std::vector<std::pair<std::string, nn::Tensor>> params_;
  std::vector<attn::CrossAttentionLayer> layers_;
};

struct SampleOptions {
  int steps = 0;  // 0 means the full T-step chain; otherwise an evenly respaced subset
  const attn::Prompt* prompt = nullptr;
  attn::SiteSet sites = attn::SiteSet::mid_only();
  int chunk = 16;  // images per forward pass; fixed so results do not depend on threading
  TraceSink* sink = nullptr;
};

/// Ancestral sampling of n images conditioned on c [1, m_c, d_c]. Image i
/// draws all of its noise from a stream derived from (seed, i), so any
/// subset can be regenerated on its own. Pixels are clamped to [-1, 1].
nn::Tensor sample(const Denoiser& model, const nn::Tensor& c, int n, std::uint64_t seed,
                  const SampleOptions& options = {});
// Images [first, first + count) of the same seeded set.
nn::Tensor sample_range(const Denoiser& model, const nn::Tensor& c, int first, int count, std::uint64_t seed,
                        const SampleOptions& options = {});

/// Timesteps visited by the sampler, descending, last one is 1.
std::vector<int> sampler_timesteps(int T, int steps);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

struct TrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 1;
  int log_every = 100;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
};

/// Standard noise-prediction training. images [N, C, H, W]; texts [N, m_c, d_c]
/// aligned with images.
std::vector<TrainLogEntry> train_denoiser(Denoiser& model, const nn::Tensor& images, const nn::Tensor& texts,
                                          const TrainConfig& cfg);

}  // namespace kpop::diffusion

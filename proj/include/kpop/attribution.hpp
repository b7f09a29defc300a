#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kpop/diffusion_model.hpp"
#include "kpop/image_io.hpp"
#include "kpop/text_encoding.hpp"

namespace kpop::attrib {

/// Layer names in U-Net order: d1 d2 mid u2 u1.
int parse_layer(std::string_view name);
std::string_view layer_name(int layer_index);

struct AttributeOptions {
  int layer = 2;  // mid
  int sampler_steps = 50;
  std::uint64_t seed = 0;
};

/// Per-token attention attribution over one layer's spatial grid, averaged
/// uniformly over every sampler step of one seeded trajectory.
struct AttributionMap {
  std::string token;
  int token_index = 0;
  int layer_index = 2;
  attn::Site site = attn::Site::mid;
  int heads = 0;
  int grid = 0;                                 // map is grid x grid
  std::vector<std::vector<double>> raw_heads;   // [head][grid*grid], mean attention
  std::vector<std::vector<double>> head_maps;   // min-max normalized per head
  std::vector<double> aggregated;               // mean of head_maps
  int t_first = 0, t_last = 0, steps = 0;       // timesteps averaged over
  std::string normalization = "min-max per head, then mean over heads";
  bool degenerate = false;                      // some head map was constant
  double entropy = 0.0;                         // of the head-averaged raw map
  std::vector<double> head_entropy;
  double max_row_sum_error = 0.0;               // over all captured rows
};

/// Shannon entropy (nats) of non-negative values rescaled to sum 1.
double spatial_entropy(std::span<const double> values);

/// Token labels along the attended axis: phrase tokens, PAD fill, then
/// one "key<j>" per concatenated prompt row.
std::vector<std::string> token_labels(const text::Phrase& phrase, const text::Vocabulary& vocab,
                                      const attn::Prompt* prompt, bool prompt_at_layer);

/// Runs one sampling trajectory with trace capture and builds maps for the
/// requested token indices. UsageError for an out-of-range token index.
std::vector<AttributionMap> attribute(const diffusion::Denoiser& model, const text::Phrase& phrase,
                                      const text::Vocabulary& vocab, const attn::Prompt* prompt,
                                      attn::SiteSet prompt_sites, std::span<const int> token_indices,
                                      const AttributeOptions& options);
AttributionMap attribute(const diffusion::Denoiser& model, const text::Phrase& phrase, const text::Vocabulary& vocab,
                         const attn::Prompt* prompt, attn::SiteSet prompt_sites, int token_index,
                         const AttributeOptions& options);

/// <stem>_head<h>.pgm per head, <stem>.ppm heat map of the aggregate, and a
/// manifest.txt (rewritten) with a line per image: token, site, layer,
/// head, entropy.
void save_maps(const std::filesystem::path& dir, std::span<const AttributionMap> maps, const std::string& stem,
               int scale = 8);

}  // namespace kpop::attrib

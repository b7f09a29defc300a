#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kpop/rng.hpp"
#include "kpop/tensor.hpp"

namespace kpop::attn {

enum class Site { down, mid, up };
std::string_view site_name(Site site);
Site parse_site(std::string_view name);

/// Subset of U-Net blocks that receive the prompt.
struct SiteSet {
  bool down = false;
  bool mid = false;
  bool up = false;

  bool contains(Site s) const;
  bool empty() const { return !down && !mid && !up; }
  // "mid", "mid-up", "down-mid-up" and comma forms like "down,up".
  static SiteSet parse(std::string_view text);
  static SiteSet mid_only() { return {false, true, false}; }
  static SiteSet all() { return {true, true, true}; }
  std::string to_string() const;
  bool operator==(const SiteSet&) const = default;
};

enum class Mechanism { concat, additive };
std::string_view mechanism_name(Mechanism m);
Mechanism parse_mechanism(std::string_view name);

/// Learnable prompt p of shape [1, m_p, d_p] with m_p = k * m_c and d_p = d_c.
struct Prompt {
  nn::Tensor values;
  int k_factor = 1;
  Mechanism mechanism = Mechanism::concat;

  std::int64_t rows() const { return values.dim(1); }
  // ConfigError / DimensionError on any broken invariant.
  void validate(std::int64_t m_c, std::int64_t d_c) const;

  /// `concept_encoding` [1, m_c, d_c] repeated k times along the token axis.
  static nn::Tensor tile(const nn::Tensor& concept_encoding, int k);
};

/// Softmax scores of one attention call, [b, h, m_z, keys].
struct AttentionTrace {
  nn::Tensor scores;
  Site site = Site::mid;
  int layer_index = 0;
  int timestep = 0;
};

/// Cross-attention with right-multiplied projections:
///   Q = Z Wq, K = C Wk, V = C Wv, O = concat_h(softmax(Q_h K_h^T / sqrt(d/h)) V_h) Wo.
class CrossAttentionLayer {
 public:
  CrossAttentionLayer() = default;
  CrossAttentionLayer(nn::Tensor w_q, nn::Tensor w_k, nn::Tensor w_v, nn::Tensor w_o, int heads, Site site);
  static CrossAttentionLayer create(int d_z, int d_c, int d, int heads, Site site, Rng& rng);

  const nn::Tensor& w_q() const { return w_q_; }
  const nn::Tensor& w_k() const { return w_k_; }
  const nn::Tensor& w_v() const { return w_v_; }
  const nn::Tensor& w_o() const { return w_o_; }
  int heads() const { return heads_; }
  Site site() const { return site_; }
  std::int64_t d_z() const { return w_q_.dim(0); }
  std::int64_t d_c() const { return w_k_.dim(0); }
  std::int64_t d() const { return w_q_.dim(1); }

  // Handles sharing storage with the layer (W_q, W_k, W_v, W_o).
  std::vector<nn::Tensor> parameters() const { return {w_q_, w_k_, w_v_, w_o_}; }

 private:
  nn::Tensor w_q_, w_k_, w_v_, w_o_;
  int heads_ = 1;
  Site site_ = Site::mid;
};

struct AttentionOutput {
  nn::Tensor out;                       // [b, m_z, d_z]
  std::optional<AttentionTrace> trace;  // filled when capture was requested
};

// Z [b, m_z, d_z]; C [b or 1, m_c, d_c].
AttentionOutput attend_original(const nn::Tensor& z, const nn::Tensor& c, const CrossAttentionLayer& layer,
                                bool capture = false);
// Keys/values from cat(C, repeat(p, b)) along the token axis.
AttentionOutput attend_concat(const nn::Tensor& z, const nn::Tensor& c, const Prompt& p,
                              const CrossAttentionLayer& layer, bool capture = false);
// Keys/values from C + repeat(p, b); requires m_p == m_c.
AttentionOutput attend_additive(const nn::Tensor& z, const nn::Tensor& c, const Prompt& p,
                                const CrossAttentionLayer& layer, bool capture = false);
// Dispatches on p->mechanism, or attend_original when p is null.
AttentionOutput attend(const nn::Tensor& z, const nn::Tensor& c, const Prompt* p, const CrossAttentionLayer& layer,
                       bool capture = false);

}  // namespace kpop::attn

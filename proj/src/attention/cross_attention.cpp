#include "kpop/cross_attention.hpp"

#include <cmath>

#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::attn {

std::string_view site_name(Site site) {
  switch (site) {
    case Site::down: return "down";
    case Site::mid: return "mid";
    case Site::up: return "up";
  }
  return "?";
}

Site parse_site(std::string_view name) {
  if (name == "down") return Site::down;
  if (name == "mid") return Site::mid;
  if (name == "up") return Site::up;
  throw ConfigError("unknown injection site '" + std::string(name) + "' (expected down, mid or up)");
}

bool SiteSet::contains(Site s) const {
  switch (s) {
    case Site::down: return down;
    case Site::mid: return mid;
    case Site::up: return up;
  }
  return false;
}

SiteSet SiteSet::parse(std::string_view text) {
  SiteSet set;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find_first_of("-,+", pos);
    if (end == std::string_view::npos) end = text.size();
    const auto part = text.substr(pos, end - pos);
    if (part.empty()) throw ConfigError("malformed site list '" + std::string(text) + "'");
    switch (parse_site(part)) {
      case Site::down: set.down = true; break;
      case Site::mid: set.mid = true; break;
      case Site::up: set.up = true; break;
    }
    pos = end + 1;
  }
  return set;
}

std::string SiteSet::to_string() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '-';
    s += name;
  };
  add(down, "down");
  add(mid, "mid");
  add(up, "up");
  return s.empty() ? "none" : s;
}

std::string_view mechanism_name(Mechanism m) { return m == Mechanism::concat ? "concat" : "additive"; }

Mechanism parse_mechanism(std::string_view name) {
  if (name == "concat") return Mechanism::concat;
  if (name == "additive") return Mechanism::additive;
  throw ConfigError("unknown prompt mechanism '" + std::string(name) + "' (expected concat or additive)");
}

void Prompt::validate(std::int64_t m_c, std::int64_t d_c) const {
  if (!values.defined() || values.rank() != 3 || values.dim(0) != 1) {
    throw DimensionError("prompt must be [1, m_p, d_p]");
  }
  if (values.dim(2) != d_c) {
    throw DimensionError("prompt width " + std::to_string(values.dim(2)) + " != text width " + std::to_string(d_c));
  }
  if (k_factor < 1) throw ConfigError("prompt k must be >= 1");
  if (values.dim(1) != k_factor * m_c) {
    throw DimensionError("prompt has " + std::to_string(values.dim(1)) + " rows, expected k*m_c = " +
                         std::to_string(k_factor * m_c));
  }
  if (mechanism == Mechanism::additive && k_factor != 1) throw ConfigError("additive prompts require k = 1");
  nn::check_finite(values, "prompt");
}

nn::Tensor Prompt::tile(const nn::Tensor& concept_encoding, int k) {
  if (concept_encoding.rank() != 3 || concept_encoding.dim(0) != 1) {
    throw DimensionError("tile expects a [1, m_c, d_c] encoding, got " + nn::shape_str(concept_encoding.shape()));
  }
  std::vector<nn::Tensor> parts(static_cast<std::size_t>(k), concept_encoding);
  nn::NoGradGuard guard;
  return nn::concat(parts, 1);
}

CrossAttentionLayer::CrossAttentionLayer(nn::Tensor w_q, nn::Tensor w_k, nn::Tensor w_v, nn::Tensor w_o, int heads,
                                         Site site)
    : w_q_(std::move(w_q)), w_k_(std::move(w_k)), w_v_(std::move(w_v)), w_o_(std::move(w_o)), heads_(heads),
      site_(site) {
  if (w_q_.rank() != 2 || w_k_.rank() != 2 || w_v_.rank() != 2 || w_o_.rank() != 2) {
    throw DimensionError("attention weights must be 2-D");
  }
  const auto d = w_q_.dim(1);
  if (w_k_.dim(1) != d || w_v_.dim(1) != d || w_o_.dim(0) != d || w_o_.dim(1) != w_q_.dim(0) ||
      w_v_.dim(0) != w_k_.dim(0)) {
    throw DimensionError("inconsistent attention weight shapes");
  }
  if (heads_ < 1 || d % heads_ != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads_) + " heads");
  }
  for (const auto* w : {&w_q_, &w_k_, &w_v_, &w_o_}) nn::check_finite(*w, "attention weight");
}

CrossAttentionLayer CrossAttentionLayer::create(int d_z, int d_c, int d, int heads, Site site, Rng& rng) {
  auto init = [&](int in, int out) {
    return nn::Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true);
  };
  auto wq = init(d_z, d);
  auto wk = init(d_c, d);
  auto wv = init(d_c, d);
  auto wo = init(d, d_z);
  return CrossAttentionLayer(wq, wk, wv, wo, heads, site);
}

namespace {

// [b, m, d] -> [b*h, m, d/h]
nn::Tensor split_heads(const nn::Tensor& x, int h) {
  const auto b = x.dim(0), m = x.dim(1), d = x.dim(2);
  return nn::reshape(nn::permute(nn::reshape(x, {b, m, h, d / h}), {0, 2, 1, 3}), {b * h, m, d / h});
}

// [b*h, m, dh] -> [b, m, h*dh]
nn::Tensor merge_heads(const nn::Tensor& x, std::int64_t b, int h) {
  const auto m = x.dim(1), dh = x.dim(2);
  return nn::reshape(nn::permute(nn::reshape(x, {b, h, m, dh}), {0, 2, 1, 3}), {b, m, h * dh});
}

void check_inputs(const nn::Tensor& z, const nn::Tensor& c, const CrossAttentionLayer& layer) {
  if (z.rank() != 3 || z.dim(2) != layer.d_z()) {
    throw DimensionError("attention query input " + nn::shape_str(z.shape()) + " does not match d_z = " +
                         std::to_string(layer.d_z()));
  }
  if (c.rank() != 3 || c.dim(2) != layer.d_c() || (c.dim(0) != z.dim(0) && c.dim(0) != 1)) {
    throw DimensionError("attention context " + nn::shape_str(c.shape()) + " incompatible with query " +
                         nn::shape_str(z.shape()) + " and d_c = " + std::to_string(layer.d_c()));
  }
}

nn::Tensor to_batch(const nn::Tensor& x, std::int64_t b) { return x.dim(0) == b ? x : nn::expand_batch(x, b); }

// Shared core once keys and values are projected: k, v are [b, keys, d].
AttentionOutput attend_projected(const nn::Tensor& z, const nn::Tensor& k, const nn::Tensor& v,
                                 const CrossAttentionLayer& layer, bool capture) {
  const auto b = z.dim(0);
  const int h = layer.heads();
  const auto dh = layer.d() / h;
  auto q = split_heads(nn::linear(z, layer.w_q()), h);
  auto kh = split_heads(k, h);
  auto vh = split_heads(v, h);
  auto scores = nn::scale(nn::matmul(q, nn::permute(kh, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto a = nn::softmax_lastdim(scores);
  auto o = merge_heads(nn::matmul(a, vh), b, h);
  AttentionOutput result{nn::linear(o, layer.w_o()), std::nullopt};
  if (capture) {
    AttentionTrace trace;
    trace.scores = nn::reshape(a.detach(), {b, h, z.dim(1), k.dim(1)}).detach();
    trace.site = layer.site();
    result.trace = std::move(trace);
  }
  return result;
}

}  // namespace

AttentionOutput attend_original(const nn::Tensor& z, const nn::Tensor& c, const CrossAttentionLayer& layer,
                                bool capture) {
  check_inputs(z, c, layer);
  const auto b = z.dim(0);
  auto k = to_batch(nn::linear(c, layer.w_k()), b);
  auto v = to_batch(nn::linear(c, layer.w_v()), b);
  return attend_projected(z, k, v, layer, capture);
}

AttentionOutput attend_concat(const nn::Tensor& z, const nn::Tensor& c, const Prompt& p,
                              const CrossAttentionLayer& layer, bool capture) {
  if (p.mechanism != Mechanism::concat) throw ConfigError("attend_concat called with an additive prompt");
  check_inputs(z, c, layer);
  if (p.values.rank() != 3 || p.values.dim(0) != 1 || p.values.dim(2) != c.dim(2)) {
    throw DimensionError("prompt " + nn::shape_str(p.values.shape()) + " incompatible with context " +
                         nn::shape_str(c.shape()));
  }
  const auto b = z.dim(0);
  // Projection is row-wise, so W cat(C, P) = cat(W C, W P); projecting the
  // shared prompt once avoids b copies of the same product.
  auto k = nn::concat({to_batch(nn::linear(c, layer.w_k()), b), to_batch(nn::linear(p.values, layer.w_k()), b)}, 1);
  auto v = nn::concat({to_batch(nn::linear(c, layer.w_v()), b), to_batch(nn::linear(p.values, layer.w_v()), b)}, 1);
  return attend_projected(z, k, v, layer, capture);
}

AttentionOutput attend_additive(const nn::Tensor& z, const nn::Tensor& c, const Prompt& p,
                                const CrossAttentionLayer& layer, bool capture) {
  if (p.mechanism != Mechanism::additive) throw ConfigError("attend_additive called with a concat prompt");
  check_inputs(z, c, layer);
  if (p.values.rank() != 3 || p.values.dim(1) != c.dim(1) || p.values.dim(2) != c.dim(2)) {
    throw DimensionError("additive prompt " + nn::shape_str(p.values.shape()) + " must match context rows " +
                         nn::shape_str(c.shape()));
  }
  return attend_original(z, nn::add(c, p.values), layer, capture);
}

AttentionOutput attend(const nn::Tensor& z, const nn::Tensor& c, const Prompt* p, const CrossAttentionLayer& layer,
                       bool capture) {
  if (!p) return attend_original(z, c, layer, capture);
  return p->mechanism == Mechanism::concat ? attend_concat(z, c, *p, layer, capture)
                                           : attend_additive(z, c, *p, layer, capture);
}

}  // namespace kpop::attn

#include "kpop/diffusion_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kpop/adam.hpp"
#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::diffusion {

using nn::Tensor;

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  double ab = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    ab *= 1.0 - b;
    s.alpha_bars.push_back(ab);
  }
  s.validate();
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > T) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > T) throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  return betas[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
  if (T < 1 || static_cast<int>(betas.size()) != T) throw ConfigError("schedule length mismatch");
  for (int i = 0; i < T; ++i) {
    const double b = betas[static_cast<std::size_t>(i)];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta outside (0, 1)");
    if (i > 0 && !(b > betas[static_cast<std::size_t>(i - 1)])) throw ConfigError("betas must increase strictly");
  }
  if (!(alpha_bars.back() < 0.05)) throw ConfigError("final alpha_bar must fall below 0.05");
}

LatentState forward_noise(const Tensor& x0, int t, const NoiseSchedule& schedule, const Tensor& noise) {
  if (t < 1 || t > schedule.T) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) + "]");
  }
  std::vector<int> ts(static_cast<std::size_t>(x0.dim(0)), t);
  return {forward_noise(x0, ts, schedule, noise), t};
}

Tensor forward_noise(const Tensor& x0, std::span<const int> ts, const NoiseSchedule& schedule, const Tensor& noise) {
  if (x0.shape() != noise.shape()) {
    throw DimensionError("noise " + nn::shape_str(noise.shape()) + " does not match x0 " + nn::shape_str(x0.shape()));
  }
  if (static_cast<std::int64_t>(ts.size()) != x0.dim(0)) throw DimensionError("one timestep per batch element required");
  const std::size_t per = x0.numel() / ts.size();
  std::vector<double> out(x0.numel());
  const auto a = x0.data(), n = noise.data();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    if (t < 1 || t > schedule.T) {
      throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) + "]");
    }
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) out[j] = sa * a[j] + sn * n[j];
  }
  return Tensor::from_data(x0.shape(), std::move(out));
}

std::string Architecture::fingerprint() const {
  std::ostringstream os;
  os << "unet-img" << image_size << "-ch" << channels << "-w" << width1 << "x" << width2 << "-h" << heads << "-mc"
     << seq_len << "-dc" << text_width << "-td" << time_dim << "-sites:down,mid,up";
  return os.str();
}

void Architecture::validate() const {
  if (image_size < 4 || image_size % 4 != 0) throw ConfigError("image size must be a positive multiple of 4");
  if (channels < 1 || width1 < 1 || width2 < 1 || seq_len < 1 || text_width < 1) {
    throw ConfigError("architecture sizes must be positive");
  }
  if (heads < 1 || width1 % heads != 0 || width2 % heads != 0) {
    throw ConfigError("block widths must be divisible by the head count");
  }
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("time embedding width must be even");
}

std::string_view role_name(ModelRole role) { return role == ModelRole::foundation ? "foundation" : "sanitized"; }

ModelRole parse_model_role(std::string_view name) {
  if (name == "foundation") return ModelRole::foundation;
  if (name == "sanitized") return ModelRole::sanitized;
  throw FingerprintError("unknown model role '" + std::string(name) + "'");
}

std::string_view subset_name(TrainableSubset s) {
  switch (s) {
    case TrainableSubset::all: return "all";
    case TrainableSubset::cross_attention: return "cross-attention";
    case TrainableSubset::non_cross_attention: return "non-cross-attention";
  }
  return "?";
}

TrainableSubset parse_subset(std::string_view name) {
  if (name == "all") return TrainableSubset::all;
  if (name == "cross-attention") return TrainableSubset::cross_attention;
  if (name == "non-cross-attention") return TrainableSubset::non_cross_attention;
  throw ConfigError("unknown trainable subset '" + std::string(name) +
                    "' (expected all, cross-attention or non-cross-attention)");
}

namespace {

constexpr const char* kBlocks[Denoiser::kLayerCount] = {"d1", "d2", "mid", "u2", "u1"};

bool is_attention_param(const std::string& name) { return name.find(".attn.") != std::string::npos; }

Tensor time_embedding(std::span<const int> ts, int dim) {
  const int half = dim / 2;
  std::vector<double> v(ts.size() * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (int k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * k / half);
      v[i * dim + k] = std::sin(ts[i] * f);
      v[i * dim + half + k] = std::cos(ts[i] * f);
    }
  }
  return Tensor::from_data({static_cast<std::int64_t>(ts.size()), dim}, std::move(v));
}

}  // namespace

Denoiser Denoiser::create(const Architecture& arch, const NoiseSchedule& schedule, std::uint64_t seed) {
  arch.validate();
  schedule.validate();
  Denoiser m;
  m.arch_ = arch;
  m.schedule_ = schedule;
  m.seed_ = seed;
  Rng rng(seed);
  const int td = arch.time_dim, te = 2 * arch.time_dim;
  auto add = [&](std::string name, nn::Shape shape, double stddev) {
    auto t = stddev > 0 ? Tensor::randn(std::move(shape), rng, stddev, true) : Tensor::zeros(std::move(shape), true);
    m.params_.emplace_back(std::move(name), std::move(t));
  };
  add("time.l1.w", {td, te}, std::sqrt(1.0 / td));
  add("time.l1.b", {te}, 0);
  add("time.l2.w", {te, te}, std::sqrt(1.0 / te));
  add("time.l2.b", {te}, 0);
  const int w1 = arch.width1, w2 = arch.width2, ch = arch.channels;
  const int in_ch[] = {ch, w1, w2, w2 + w2, w2 + w1};
  const int out_ch[] = {w1, w2, w2, w2, w1};
  for (int i = 0; i < kLayerCount; ++i) {
    const std::string b = kBlocks[i];
    add(b + ".conv.w", {out_ch[i], in_ch[i], 3, 3}, std::sqrt(2.0 / (in_ch[i] * 9)));
    add(b + ".conv.b", {out_ch[i]}, 0);
    add(b + ".temb.w", {te, out_ch[i]}, std::sqrt(1.0 / te));
    add(b + ".temb.b", {out_ch[i]}, 0);
    const double sz = std::sqrt(1.0 / out_ch[i]), sc = std::sqrt(1.0 / arch.text_width);
    add(b + ".attn.wq", {out_ch[i], out_ch[i]}, sz);
    add(b + ".attn.wk", {arch.text_width, out_ch[i]}, sc);
    add(b + ".attn.wv", {arch.text_width, out_ch[i]}, sc);
    add(b + ".attn.wo", {out_ch[i], out_ch[i]}, sz);
  }
  add("out.conv.w", {ch, w1, 3, 3}, std::sqrt(1.0 / (w1 * 9)));
  add("out.conv.b", {ch}, 0);
  m.build_layers();
  return m;
}

void Denoiser::build_layers() {
  layers_.clear();
  for (int i = 0; i < kLayerCount; ++i) {
    const std::string b = kBlocks[i];
    layers_.emplace_back(param(b + ".attn.wq"), param(b + ".attn.wk"), param(b + ".attn.wv"), param(b + ".attn.wo"),
                         arch_.heads, layer_site(i));
  }
}

attn::Site Denoiser::layer_site(int layer_index) const {
  if (layer_index < 2) return attn::Site::down;
  if (layer_index == 2) return attn::Site::mid;
  return attn::Site::up;
}

int Denoiser::layer_grid(int layer_index) const {
  const int s = arch_.image_size;
  switch (layer_index) {
    case 0: case 4: return s;
    case 1: case 3: return s / 2;
    default: return s / 4;
  }
}

std::vector<Tensor> Denoiser::parameters(TrainableSubset subset) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    const bool a = is_attention_param(name);
    if (subset == TrainableSubset::all || (subset == TrainableSubset::cross_attention && a) ||
        (subset == TrainableSubset::non_cross_attention && !a)) {
      out.push_back(t);
    }
  }
  return out;
}

const Tensor& Denoiser::param(std::string_view name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw StateError("denoiser has no parameter '" + std::string(name) + "'");
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.second.numel();
  return n;
}

Denoiser Denoiser::clone() const {
  Denoiser m;
  m.arch_ = arch_;
  m.schedule_ = schedule_;
  m.seed_ = seed_;
  m.role_ = role_;
  for (const auto& [n, t] : params_) m.params_.emplace_back(n, t.clone());
  m.build_layers();
  return m;
}

void Denoiser::set_requires_grad(bool on) {
  for (auto& p : params_) p.second.set_requires_grad(on);
}

Tensor Denoiser::predict_noise(const Tensor& z, const Tensor& c, int t, const attn::Prompt* prompt,
                               attn::SiteSet sites, TraceSink* sink) const {
  std::vector<int> ts(static_cast<std::size_t>(z.dim(0)), t);
  return predict_noise(z, c, ts, prompt, sites, sink);
}

Tensor Denoiser::predict_noise(const Tensor& z, const Tensor& c, std::span<const int> ts, const attn::Prompt* prompt,
                               attn::SiteSet sites, TraceSink* sink) const {
  if (params_.empty()) throw StateError("denoiser is not initialised");
  const int s = arch_.image_size;
  if (z.rank() != 4 || z.dim(1) != arch_.channels || z.dim(2) != s || z.dim(3) != s) {
    throw DimensionError("latent " + nn::shape_str(z.shape()) + " does not match the architecture");
  }
  const auto b = z.dim(0);
  if (c.rank() != 3 || c.dim(1) != arch_.seq_len || c.dim(2) != arch_.text_width || (c.dim(0) != 1 && c.dim(0) != b)) {
    throw DimensionError("text encoding " + nn::shape_str(c.shape()) + " does not match the architecture");
  }
  if (static_cast<std::int64_t>(ts.size()) != b) throw DimensionError("one timestep per batch element required");
  for (int t : ts) {
    if (t < 1 || t > schedule_.T) throw ConfigError("timestep " + std::to_string(t) + " out of range");
  }
  if (prompt) {
    if (sites.empty()) throw ConfigError("a prompt was supplied but no injection site is enabled");
    prompt->validate(arch_.seq_len, arch_.text_width);
  }

  auto temb = nn::silu(nn::linear(time_embedding(ts, arch_.time_dim), param("time.l1.w"), param("time.l1.b")));
  temb = nn::silu(nn::linear(temb, param("time.l2.w"), param("time.l2.b")));

  auto block = [&](const Tensor& x, int i) {
    const std::string name = kBlocks[i];
    auto h = nn::conv2d(x, param(name + ".conv.w"), param(name + ".conv.b"), 1);
    const auto w = h.dim(1), hh = h.dim(2), ww = h.dim(3);
    auto shift = nn::reshape(nn::linear(temb, param(name + ".temb.w"), param(name + ".temb.b")), {b, w, 1, 1});
    h = nn::silu(nn::add(h, shift));
    auto tokens = nn::reshape(nn::permute(h, {0, 2, 3, 1}), {b, hh * ww, w});
    const auto& layer = layers_[static_cast<std::size_t>(i)];
    const bool inject = prompt && sites.contains(layer.site());
    const bool capture = sink && sink->sites.contains(layer.site());
    auto res = attn::attend(tokens, c, inject ? prompt : nullptr, layer, capture);
    if (res.trace) {
      res.trace->layer_index = i;
      res.trace->timestep = ts[0];
      sink->traces.push_back(std::move(*res.trace));
    }
    auto a = nn::permute(nn::reshape(res.out, {b, hh, ww, w}), {0, 3, 1, 2});
    return nn::add(h, a);
  };

  auto h1 = block(z, 0);
  auto h2 = block(nn::avg_pool2(h1), 1);
  auto hm = block(nn::avg_pool2(h2), 2);
  auto u2 = block(nn::concat({nn::upsample2(hm), h2}, 1), 3);
  auto u1 = block(nn::concat({nn::upsample2(u2), h1}, 1), 4);
  return nn::conv2d(u1, param("out.conv.w"), param("out.conv.b"), 1);
}

std::string Denoiser::content_hash() const { return io::tensor_digest(params_); }

void Denoiser::save(const std::filesystem::path& path) const {
  io::Archive ar;
  auto& m = ar.manifest;
  m.set("format", "kpop-denoiser");
  m.set("fingerprint", arch_.fingerprint());
  m.set("role", std::string(role_name(role_)));
  m.set_num("seed", seed_);
  m.set_num("arch.image_size", arch_.image_size);
  m.set_num("arch.channels", arch_.channels);
  m.set_num("arch.width1", arch_.width1);
  m.set_num("arch.width2", arch_.width2);
  m.set_num("arch.heads", arch_.heads);
  m.set_num("arch.seq_len", arch_.seq_len);
  m.set_num("arch.text_width", arch_.text_width);
  m.set_num("arch.time_dim", arch_.time_dim);
  m.set_num("schedule.T", schedule_.T);
  m.set_num("schedule.beta_start", schedule_.beta_start);
  m.set_num("schedule.beta_end", schedule_.beta_end);
  m.set("content_hash", content_hash());
  ar.tensors = params_;
  io::save_archive(path, ar);
}

Denoiser Denoiser::load(const std::filesystem::path& path, const Architecture* expected) {
  const auto ar = io::load_archive(path);
  const auto& m = ar.manifest;
  if (m.get_or("format", "") != "kpop-denoiser") throw FingerprintError(path.string() + " is not a denoiser checkpoint");
  Architecture a;
  a.image_size = static_cast<int>(m.get_int("arch.image_size"));
  a.channels = static_cast<int>(m.get_int("arch.channels"));
  a.width1 = static_cast<int>(m.get_int("arch.width1"));
  a.width2 = static_cast<int>(m.get_int("arch.width2"));
  a.heads = static_cast<int>(m.get_int("arch.heads"));
  a.seq_len = static_cast<int>(m.get_int("arch.seq_len"));
  a.text_width = static_cast<int>(m.get_int("arch.text_width"));
  a.time_dim = static_cast<int>(m.get_int("arch.time_dim"));
  if (a.fingerprint() != m.get("fingerprint")) throw FingerprintError("architecture fingerprint is inconsistent in " + path.string());
  if (expected && !(*expected == a)) {
    throw FingerprintError("checkpoint fingerprint " + a.fingerprint() + " does not match expected " +
                           expected->fingerprint());
  }
  Denoiser d = create(a,
                      NoiseSchedule::linear(static_cast<int>(m.get_int("schedule.T")), m.get_double("schedule.beta_start"),
                                            m.get_double("schedule.beta_end")),
                      std::stoull(m.get("seed")));
  d.role_ = parse_model_role(m.get("role"));
  if (ar.tensors.size() != d.params_.size()) throw FingerprintError("checkpoint tensor count does not match architecture");
  for (auto& [name, t] : d.params_) {
    const auto& src = ar.tensor(name);
    if (src.shape() != t.shape()) throw FingerprintError("parameter '" + name + "' has shape " + nn::shape_str(src.shape()));
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
  if (d.content_hash() != m.get("content_hash")) throw FingerprintError("content hash mismatch in " + path.string());
  return d;
}

std::vector<int> sampler_timesteps(int T, int steps) {
  if (steps <= 0 || steps >= T) steps = T;
  std::vector<int> out;
  for (int i = steps; i >= 1; --i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * T / steps));
    if (out.empty() || out.back() != t) out.push_back(std::max(t, 1));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Tensor sample_range(const Denoiser& model, const Tensor& c, int first, int count, std::uint64_t seed,
                    const SampleOptions& options) {
  if (count < 0 || first < 0) throw UsageError("negative sample range");
  nn::NoGradGuard guard;
  const auto& arch = model.arch();
  const auto& sch = model.schedule();
  const auto per = static_cast<std::size_t>(arch.channels * arch.image_size * arch.image_size);
  const auto taus = sampler_timesteps(sch.T, options.steps);
  std::vector<double> all(per * static_cast<std::size_t>(count));
  const int chunk = std::max(1, options.chunk);
  // Chunk boundaries are aligned to absolute indices so a range reproduces
  // the batches of the full set.
  int i = first;
  while (i < first + count) {
    const int end = std::min(first + count, (i / chunk + 1) * chunk);
    const int b = end - i;
    std::vector<Rng> rngs;
    for (int j = i; j < end; ++j) rngs.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(j)));
    std::vector<double> z(per * static_cast<std::size_t>(b));
    for (int j = 0; j < b; ++j)
      for (std::size_t k = 0; k < per; ++k) z[j * per + k] = rngs[static_cast<std::size_t>(j)].normal();
    const nn::Shape shape{b, arch.channels, arch.image_size, arch.image_size};
    for (std::size_t s = 0; s < taus.size(); ++s) {
      const int t = taus[s];
      const int t_prev = s + 1 < taus.size() ? taus[s + 1] : 0;
      const double ab = sch.alpha_bar(t), ab_prev = sch.alpha_bar(t_prev);
      const double beta = 1.0 - ab / ab_prev;
      auto eps = model.predict_noise(Tensor::from_data(shape, z), c, t, options.prompt, options.sites, options.sink);
      const auto e = eps.data();
      const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
      const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
      const double sigma = t_prev > 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
      for (int j = 0; j < b; ++j) {
        for (std::size_t k = 0; k < per; ++k) {
          const std::size_t idx = j * per + k;
          const double x0 = std::clamp((z[idx] - std::sqrt(1.0 - ab) * e[idx]) / std::sqrt(ab), -1.0, 1.0);
          z[idx] = t_prev > 0 ? c0 * x0 + ct * z[idx] + sigma * rngs[static_cast<std::size_t>(j)].normal() : x0;
        }
      }
    }
    std::copy(z.begin(), z.end(), all.begin() + static_cast<std::ptrdiff_t>(per * (i - first)));
    i = end;
  }
  for (auto& v : all) v = std::clamp(v, -1.0, 1.0);
  return Tensor::from_data({count, arch.channels, arch.image_size, arch.image_size}, std::move(all));
}

Tensor sample(const Denoiser& model, const Tensor& c, int n, std::uint64_t seed, const SampleOptions& options) {
  return sample_range(model, c, 0, n, seed, options);
}

namespace {

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  nn::Shape shape = x.shape();
  const std::size_t per = x.numel() / static_cast<std::size_t>(shape[0]);
  shape[0] = static_cast<std::int64_t>(rows.size());
  std::vector<double> out(per * rows.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(d.begin() + rows[i] * per, d.begin() + (rows[i] + 1) * per, out.begin() + i * per);
  }
  return Tensor::from_data(std::move(shape), std::move(out));
}

}  // namespace

std::vector<TrainLogEntry> train_denoiser(Denoiser& model, const Tensor& images, const Tensor& texts,
                                          const TrainConfig& cfg) {
  if (images.dim(0) != texts.dim(0)) throw DimensionError("images and texts must align");
  if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("training needs steps >= 0 and batch >= 1");
  Rng rng(cfg.seed);
  auto params = model.parameters();
  auto opt = nn::AdamState::init(params, cfg.lr);
  std::vector<TrainLogEntry> log;
  double acc = 0;
  int acc_n = 0;
  const int n = static_cast<int>(images.dim(0));
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<int> rows(static_cast<std::size_t>(cfg.batch)), ts(static_cast<std::size_t>(cfg.batch));
    for (auto& r : rows) r = rng.uniform_int(0, n - 1);
    for (auto& t : ts) t = rng.uniform_int(1, model.schedule().T);
    auto x0 = gather_rows(images, rows);
    auto c = gather_rows(texts, rows);
    auto noise = Tensor::randn(x0.shape(), rng);
    auto zt = forward_noise(x0, ts, model.schedule(), noise);
    nn::zero_grads(params);
    double loss_value;
    {
      nn::Tape tape;
      auto loss = nn::mse(model.predict_noise(zt, c, ts), noise);
      loss_value = loss.item();
      tape.backward(loss);
    }
    nn::adam_step(params, opt);
    acc += loss_value;
    ++acc_n;
    if (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps) {
      log.push_back({step, acc / acc_n});
      acc = 0;
      acc_n = 0;
    }
  }
  return log;
}

}  // namespace kpop::diffusion

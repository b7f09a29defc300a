#include "kpop/attribution.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "kpop/archive.hpp"
#include "kpop/error.hpp"

namespace kpop::attrib {

namespace {

constexpr std::array<std::string_view, diffusion::Denoiser::kLayerCount> kLayerNames{"d1", "d2", "mid", "u2", "u1"};

}  // namespace

int parse_layer(std::string_view name) {
  for (std::size_t i = 0; i < kLayerNames.size(); ++i) {
    if (kLayerNames[i] == name) return static_cast<int>(i);
  }
  throw ConfigError("unknown attention layer '" + std::string(name) + "' (expected d1, d2, mid, u2 or u1)");
}

std::string_view layer_name(int layer_index) {
  if (layer_index < 0 || layer_index >= static_cast<int>(kLayerNames.size())) {
    throw ConfigError("layer index " + std::to_string(layer_index) + " out of range");
  }
  return kLayerNames[static_cast<std::size_t>(layer_index)];
}

double spatial_entropy(std::span<const double> values) {
  double total = 0;
  for (double v : values) {
    if (v < 0) throw NumericError("entropy of a negative map");
    total += v;
  }
  if (total <= 0) return 0.0;
  double h = 0;
  for (double v : values) {
    const double p = v / total;
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

std::vector<std::string> token_labels(const text::Phrase& phrase, const text::Vocabulary& vocab,
                                      const attn::Prompt* prompt, bool prompt_at_layer) {
  std::vector<std::string> out(phrase.begin(), phrase.end());
  while (static_cast<int>(out.size()) < vocab.seq_len()) out.emplace_back(text::kPadToken);
  if (prompt && prompt_at_layer && prompt->mechanism == attn::Mechanism::concat) {
    for (std::int64_t j = 0; j < prompt->rows(); ++j) out.push_back("key" + std::to_string(j));
  }
  return out;
}

std::vector<AttributionMap> attribute(const diffusion::Denoiser& model, const text::Phrase& phrase,
                                      const text::Vocabulary& vocab, const attn::Prompt* prompt,
                                      attn::SiteSet prompt_sites, std::span<const int> token_indices,
                                      const AttributeOptions& options) {
  const int layer = options.layer;
  layer_name(layer);
  const auto site = model.layer_site(layer);
  const bool prompted = prompt && prompt_sites.contains(site);
  const auto labels = token_labels(phrase, vocab, prompt, prompted);
  for (int ti : token_indices) {
    if (ti < 0 || ti >= static_cast<int>(labels.size())) {
      throw UsageError("token index " + std::to_string(ti) + " out of range [0, " + std::to_string(labels.size()) +
                       ") at layer " + std::string(layer_name(layer)));
    }
  }

  diffusion::TraceSink sink;
  sink.sites = attn::SiteSet{site == attn::Site::down, site == attn::Site::mid, site == attn::Site::up};
  diffusion::SampleOptions so;
  so.steps = options.sampler_steps;
  so.prompt = prompt;
  so.sites = prompt_sites;
  so.sink = &sink;
  diffusion::sample(model, text::encode(phrase, vocab), 1, options.seed, so);

  const int heads = model.arch().heads;
  const int grid = model.layer_grid(layer);
  const auto mz = static_cast<std::size_t>(grid) * static_cast<std::size_t>(grid);
  const auto mk = labels.size();
  std::vector<AttributionMap> maps(token_indices.size());
  for (std::size_t m = 0; m < maps.size(); ++m) {
    auto& a = maps[m];
    a.token_index = token_indices[m];
    a.token = labels[static_cast<std::size_t>(a.token_index)];
    a.layer_index = layer;
    a.site = site;
    a.heads = heads;
    a.grid = grid;
    a.raw_heads.assign(static_cast<std::size_t>(heads), std::vector<double>(mz, 0.0));
  }

  double worst = 0;
  int steps = 0;
  for (const auto& tr : sink.traces) {
    if (tr.layer_index != layer) continue;
    const auto& s = tr.scores;
    if (s.dim(1) != heads || static_cast<std::size_t>(s.dim(2)) != mz || static_cast<std::size_t>(s.dim(3)) != mk) {
      throw DimensionError("attention trace shape does not match the layer grid and token axis");
    }
    const auto x = s.data();
    for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
      for (std::size_t p = 0; p < mz; ++p) {
        const auto row = x.subspan((h * mz + p) * mk, mk);
        double sum = 0;
        for (double v : row) sum += v;
        worst = std::max(worst, std::abs(sum - 1.0));
        for (auto& a : maps) a.raw_heads[h][p] += row[static_cast<std::size_t>(a.token_index)];
      }
    }
    if (steps == 0) {
      for (auto& a : maps) a.t_first = tr.timestep;
    }
    for (auto& a : maps) a.t_last = tr.timestep;
    ++steps;
  }
  if (steps == 0) {
    throw ConfigError("no attention trace captured at layer " + std::string(layer_name(layer)));
  }

  for (auto& a : maps) {
    a.steps = steps;
    a.max_row_sum_error = worst;
    std::vector<double> mean_raw(mz, 0.0);
    a.aggregated.assign(mz, 0.0);
    for (auto& raw : a.raw_heads) {
      for (auto& v : raw) v /= steps;
      const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
      std::vector<double> norm(mz, 1.0);
      if (*hi - *lo > 1e-12) {
        for (std::size_t p = 0; p < mz; ++p) norm[p] = (raw[p] - *lo) / (*hi - *lo);
      } else {
        a.degenerate = true;
      }
      for (std::size_t p = 0; p < mz; ++p) {
        a.aggregated[p] += norm[p] / heads;
        mean_raw[p] += raw[p] / heads;
      }
      a.head_entropy.push_back(spatial_entropy(raw));
      a.head_maps.push_back(std::move(norm));
    }
    a.entropy = spatial_entropy(mean_raw);
  }
  return maps;
}

AttributionMap attribute(const diffusion::Denoiser& model, const text::Phrase& phrase, const text::Vocabulary& vocab,
                         const attn::Prompt* prompt, attn::SiteSet prompt_sites, int token_index,
                         const AttributeOptions& options) {
  const std::array<int, 1> idx{token_index};
  return std::move(attribute(model, phrase, vocab, prompt, prompt_sites, idx, options)[0]);
}

void save_maps(const std::filesystem::path& dir, std::span<const AttributionMap> maps, const std::string& stem,
               int scale) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "file,token,token_index,site,layer,head,entropy,degenerate,t_first,t_last,steps\n";
  for (const auto& a : maps) {
    const std::string base = stem + "_t" + std::to_string(a.token_index) + "_" + a.token;
    const std::string site(attn::site_name(a.site));
    const std::string layer(layer_name(a.layer_index));
    auto row = [&](const std::string& file, const std::string& head, double entropy) {
      manifest << file << ',' << a.token << ',' << a.token_index << ',' << site << ',' << layer << ',' << head << ','
               << io::Manifest::format_number(entropy) << ',' << (a.degenerate ? 1 : 0) << ',' << a.t_first << ','
               << a.t_last << ',' << a.steps << '\n';
    };
    for (int h = 0; h < a.heads; ++h) {
      const std::string file = base + "_head" + std::to_string(h) + ".pgm";
      io::write_pgm(dir / file, io::gray_image(a.head_maps[static_cast<std::size_t>(h)], a.grid, a.grid, 0.0, 1.0, scale));
      row(file, std::to_string(h), a.head_entropy[static_cast<std::size_t>(h)]);
    }
    const std::string file = base + ".ppm";
    io::write_ppm(dir / file, io::heat_image(a.aggregated, a.grid, a.grid, scale));
    row(file, "mean", a.entropy);
  }
  io::write_text_file(dir / "manifest.txt", manifest.str());
}

}  // namespace kpop::attrib

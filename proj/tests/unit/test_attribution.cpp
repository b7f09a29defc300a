#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "kpop/archive.hpp"
#include "kpop/attribution.hpp"
#include "kpop/error.hpp"

using namespace kpop;
using namespace kpop::attrib;
using nn::Tensor;

namespace {

diffusion::Denoiser small_model(int seq_len, std::uint64_t seed = 5) {
  diffusion::Architecture a;
  a.width1 = 4;
  a.width2 = 8;
  a.heads = 2;
  a.seq_len = seq_len;
  a.text_width = 8;
  a.time_dim = 8;
  return diffusion::Denoiser::create(a, diffusion::NoiseSchedule::linear(20, 0.01, 0.5), seed);
}

AttributeOptions quick(int layer = 2) {
  AttributeOptions o;
  o.layer = layer;
  o.sampler_steps = 4;
  o.seed = 3;
  return o;
}

}  // namespace

TEST_CASE("spatial entropy") {
  const std::vector<double> uniform(16, 0.25);
  CHECK(spatial_entropy(uniform) == doctest::Approx(std::log(16.0)));
  const std::vector<double> spike{0, 0, 3, 0};
  CHECK(spatial_entropy(spike) == 0.0);
  CHECK_THROWS_AS(spatial_entropy(std::vector<double>{1, -1}), NumericError);
}

TEST_CASE("layer names") {
  CHECK(parse_layer("mid") == 2);
  CHECK(layer_name(4) == "u1");
  CHECK_THROWS_AS(parse_layer("bottleneck"), ConfigError);
}

TEST_CASE("token attributions are row-stochastic at every layer") {
  const auto model = small_model(4);
  const auto vocab = text::Vocabulary::standard(7, 4, 8);
  const std::vector<int> all{0, 1, 2, 3};
  for (int layer = 0; layer < diffusion::Denoiser::kLayerCount; ++layer) {
    const auto maps = attribute(model, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), all, quick(layer));
    REQUIRE(maps.size() == 4);
    CHECK(maps[0].max_row_sum_error < 1e-6);
    CHECK(maps[0].grid == model.layer_grid(layer));
    CHECK(maps[0].steps == 4);
    const auto mz = maps[0].raw_heads[0].size();
    for (int h = 0; h < 2; ++h) {
      for (std::size_t p = 0; p < mz; ++p) {
        double s = 0;
        for (const auto& m : maps) s += m.raw_heads[static_cast<std::size_t>(h)][p];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
    for (const auto& m : maps) {
      for (double v : m.aggregated) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
  CHECK(attribute(model, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), 0, quick()).token == "cross");
  CHECK(attribute(model, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), 3, quick()).token == "pad");
}

TEST_CASE("a single text token gives a constant, degenerate map") {
  const auto model = small_model(1);
  const auto vocab = text::Vocabulary::standard(7, 1, 8);
  const auto m = attribute(model, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), 0, quick());
  CHECK(m.degenerate);
  for (double v : m.aggregated) CHECK(v == m.aggregated[0]);
  for (double v : m.raw_heads[0]) CHECK(v == doctest::Approx(1.0));
  CHECK(m.entropy == doctest::Approx(std::log(16.0)));
}

TEST_CASE("prompt rows extend the token axis only where injected") {
  const auto model = small_model(4);
  const auto vocab = text::Vocabulary::standard(7, 4, 8);
  Rng rng(2);
  const attn::Prompt p{Tensor::randn({1, 8, 8}, rng, 1.0), 2, attn::Mechanism::concat};
  const auto labels = token_labels({"cross"}, vocab, &p, true);
  REQUIRE(labels.size() == 12);
  CHECK(labels[4] == "key0");
  const auto m = attribute(model, {"cross"}, vocab, &p, attn::SiteSet::mid_only(), 11, quick());
  CHECK(m.token == "key7");
  CHECK(m.max_row_sum_error < 1e-6);
  CHECK_THROWS_AS(attribute(model, {"cross"}, vocab, &p, attn::SiteSet::mid_only(), 11, quick(0)), UsageError);
  CHECK_THROWS_AS(attribute(model, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), -1, quick()), UsageError);
}

TEST_CASE("maps are deterministic and saved with a manifest") {
  const auto model = small_model(4);
  const auto vocab = text::Vocabulary::standard(7, 4, 8);
  const auto a = attribute(model, {"ring"}, vocab, nullptr, attn::SiteSet::mid_only(), 0, quick());
  const auto b = attribute(model, {"ring"}, vocab, nullptr, attn::SiteSet::mid_only(), 0, quick());
  CHECK(a.raw_heads == b.raw_heads);
  CHECK(a.entropy == b.entropy);
  const auto dir = std::filesystem::temp_directory_path() / "kpop_unit" / "attrib";
  std::filesystem::remove_all(dir);
  const std::vector<AttributionMap> maps{a};
  save_maps(dir, maps, "theta");
  CHECK(std::filesystem::exists(dir / "theta_t0_ring_head0.pgm"));
  CHECK(std::filesystem::exists(dir / "theta_t0_ring_head1.pgm"));
  const auto img = io::read_pnm(dir / "theta_t0_ring.ppm");
  CHECK(img.width == 4 * 8);
  const auto manifest = io::read_text_file(dir / "manifest.txt");
  CHECK(manifest.find("theta_t0_ring.ppm,ring,0,mid,mid,mean,") != std::string::npos);
}

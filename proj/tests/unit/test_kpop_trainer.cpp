#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/kpop_trainer.hpp"
#include "kpop/ops.hpp"
#include "kpop/synthetic_data.hpp"

using namespace kpop;
using namespace kpop::trainer;
using nn::Tensor;

namespace {

// 0.5 (p - a)^T A (p - a) with A = [[3, 1], [1, 2]], a = (2, -1).
struct Quadratic {
  Tensor A = Tensor::from_data({2, 2}, {3, 1, 1, 2});
  Tensor a = Tensor::from_data({1, 2}, {2, -1});

  RecoveryObjective objective(attn::Prompt& p) const {
    return [this, &p](Rng&) {
      auto d = nn::sub(nn::reshape(p.values, {1, 2}), a);
      return nn::scale(nn::sum(nn::mul(nn::matmul(d, A), d)), 0.5);
    };
  }
};

attn::Prompt two_param_prompt(double x, double y) {
  return {Tensor::from_data({1, 1, 2}, {x, y}, true), 1, attn::Mechanism::concat};
}

// Independent projected gradient descent on plain doubles.
void scripted_pgd_step(double& x, double& y, double lr, double rho) {
  const double gx = 3 * (x - 2) + 1 * (y + 1);
  const double gy = 1 * (x - 2) + 2 * (y + 1);
  x -= lr * gx;
  y -= lr * gy;
  const double n = std::sqrt(x * x + y * y);
  if (n > rho) {
    x *= rho / n;
    y *= rho / n;
  }
}

diffusion::Architecture tiny_arch() {
  diffusion::Architecture a;
  a.image_size = 8;
  a.width1 = 4;
  a.width2 = 8;
  a.heads = 2;
  a.seq_len = 3;
  a.text_width = 6;
  a.time_dim = 8;
  return a;
}

struct TinySetup {
  diffusion::Denoiser theta = diffusion::Denoiser::create(tiny_arch(), diffusion::NoiseSchedule::linear(20, 0.01, 0.5), 3);
  text::Vocabulary vocab = text::Vocabulary::standard(7, 3, 6);
  std::vector<std::string> erase{"cross", "ring"};
  text::ConceptRegistry registry = data::standard_registry(erase, 7);
  ConceptImageSource source = [](const std::string&, int n, Rng& rng) {
    return Tensor::randn({n, 1, 8, 8}, rng, 0.5);
  };

  KpopConfig config(int steps) const {
    KpopConfig c;
    c.steps = steps;
    c.k_factor = 2;
    c.lr_model = 1e-3;
    c.batch = 2;
    c.log_every = 1;
    c.snapshot_every = 2;
    return c;
  }
};

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "kpop_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double param_distance(const diffusion::Denoiser& a, const diffusion::Denoiser& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
    const auto d = distance(a.named_parameters()[i].second, b.named_parameters()[i].second);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("projected descent matches a scripted trajectory") {
  Quadratic q;
  auto p = two_param_prompt(0.1, 0.2);
  const auto anchor = Tensor::zeros({1, 1, 2});
  auto opt = PromptOptimizerState::create(PromptOptimizer::sgd, p.values, anchor, 0.1, 1.5);
  Rng rng(1);
  double x = 0.1, y = 0.2;
  for (int s = 0; s < 25; ++s) {
    recovery_stage(q.objective(p), p, opt, 1, rng);
    scripted_pgd_step(x, y, 0.1, 1.5);
    CHECK(std::abs(p.values.data()[0] - x) <= 1e-10);
    CHECK(std::abs(p.values.data()[1] - y) <= 1e-10);
    CHECK(distance(p.values, anchor) <= 1.5 + 1e-9);
  }
  // Frozen from an independent NumPy run of the same iteration.
  CHECK(std::abs(p.values.data()[0] - 1.416861459141555) <= 1e-10);
  CHECK(std::abs(p.values.data()[1] - -0.492446551007583) <= 1e-10);
}

TEST_CASE("projected Adam matches frozen values") {
  Quadratic q;
  auto p = two_param_prompt(0.1, 0.2);
  const auto anchor = Tensor::zeros({1, 1, 2});
  auto opt = PromptOptimizerState::create(PromptOptimizer::adam, p.values, anchor, 0.05, 1.5);
  Rng rng(1);
  auto l = recovery_stage(q.objective(p), p, opt, 40, rng);
  CHECK(std::abs(p.values.data()[0] - 1.3461538063779088) <= 1e-10);
  CHECK(std::abs(p.values.data()[1] - -0.6617174091515707) <= 1e-10);
  CHECK(l.last < l.first);
}

TEST_CASE("degenerate prompt constraints") {
  Quadratic q;
  Rng rng(1);
  SUBCASE("rho = 0 pins the prompt to its anchor") {
    auto p = two_param_prompt(0.3, -0.4);
    const auto anchor = Tensor::from_data({1, 1, 2}, {0.3, -0.4});
    auto opt = PromptOptimizerState::create(PromptOptimizer::adam, p.values, anchor, 0.1, 0.0);
    recovery_stage(q.objective(p), p, opt, 5, rng);
    CHECK(p.values.data()[0] == 0.3);
    CHECK(p.values.data()[1] == -0.4);
  }
  SUBCASE("zero learning rate leaves the prompt unchanged") {
    for (auto kind : {PromptOptimizer::sgd, PromptOptimizer::adam}) {
      auto p = two_param_prompt(0.3, -0.4);
      auto opt = PromptOptimizerState::create(kind, p.values, Tensor::zeros({1, 1, 2}), 0.0, 10.0);
      recovery_stage(q.objective(p), p, opt, 1, rng);
      CHECK(p.values.data()[0] == 0.3);
      CHECK(p.values.data()[1] == -0.4);
    }
  }
  SUBCASE("projection rescales onto the sphere") {
    auto v = Tensor::from_data({1, 1, 2}, {3.0, 4.0});
    CHECK(project_to_ball(v, Tensor::zeros({1, 1, 2}), 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(v.data()[0] == doctest::Approx(0.6));
    CHECK(v.data()[1] == doctest::Approx(0.8));
  }
}

TEST_CASE("recovery stage guards") {
  Quadratic q;
  Rng rng(1);
  auto p = two_param_prompt(0.1, 0.2);
  auto opt = PromptOptimizerState::create(PromptOptimizer::sgd, p.values, Tensor::zeros({1, 1, 2}), 0.1, 5.0);

  SUBCASE("gradient reaching a frozen tensor is a state error") {
    auto w = Tensor::from_data({1, 2}, {1.0, 1.0}, true);
    RecoveryObjective leaky = [&](Rng&) { return nn::sum(nn::mul(nn::reshape(p.values, {1, 2}), w)); };
    CHECK_THROWS_AS(recovery_stage(leaky, p, opt, 1, rng, {w}), StateError);
  }
  SUBCASE("non-finite loss aborts with the step") {
    int calls = 0;
    RecoveryObjective blowup = [&](Rng& r) {
      if (++calls == 3) return nn::scale(nn::sum(nn::reshape(p.values, {1, 2})), std::nan(""));
      return q.objective(p)(r);
    };
    try {
      recovery_stage(blowup, p, opt, 5, rng);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("inner step 2") != std::string::npos);
    }
  }
  SUBCASE("a prompt that does not require gradients is refused") {
    p.values.set_requires_grad(false);
    CHECK_THROWS_AS(recovery_stage(q.objective(p), p, opt, 1, rng), StateError);
  }
}

TEST_CASE("config validation and manifest round trip") {
  KpopConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.resolved_rho(8, 64, 1.0) == doctest::Approx(3.0 * std::sqrt(10.0 * 8 * 64)));
  c.rho = 2.5;
  CHECK(c.resolved_rho(8, 64, 1.0) == 2.5);
  auto bad = c;
  bad.lambda = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.mechanism = attn::Mechanism::additive;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.k_factor = 1;
  CHECK_NOTHROW(bad.validate());
  bad = c;
  bad.sites = attn::SiteSet{};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  c.trainable_subset = diffusion::TrainableSubset::cross_attention;
  c.preserve_term = true;
  c.sites = attn::SiteSet::parse("mid-up");
  auto back = KpopConfig::from_manifest(c.to_manifest());
  CHECK(back.to_manifest().to_text() == c.to_manifest().to_text());
  auto m = c.to_manifest();
  m.set("learning_rate", "1");
  CHECK_THROWS_AS(KpopConfig::from_manifest(m), ConfigError);
}

TEST_CASE("hiding stage isolates prompts and respects the subset") {
  TinySetup s;
  auto cfg = s.config(1);
  cfg.trainable_subset = diffusion::TrainableSubset::cross_attention;
  auto tp = s.theta.clone();
  const auto theta_hash = s.theta.content_hash();
  std::vector<ConceptTexts> erased;
  for (const auto& c : s.registry.erased()) erased.push_back({c.concept_id, text::encode(c.phrase, s.vocab)});
  std::vector<attn::Prompt> prompts;
  for (const auto& e : erased) prompts.push_back({attn::Prompt::tile(e.encoding, 2), 2, attn::Mechanism::concat});
  std::vector<attn::Prompt*> ptrs{&prompts[0], &prompts[1]};
  const auto before = prompts[0].values.detach();
  auto opt = nn::AdamState::init(tp.parameters(cfg.trainable_subset), 1e-2);
  Rng rng(3);
  auto loss = hiding_stage(tp, s.theta, erased, ptrs, text::neutral_target(s.registry, s.vocab), {}, cfg, opt,
                           s.source, rng);
  CHECK(std::isfinite(loss.total));
  CHECK(loss.total == doctest::Approx(loss.erase + cfg.lambda * loss.recover));
  CHECK(distance(prompts[0].values, before) == 0.0);
  CHECK_FALSE(prompts[0].values.has_grad());
  CHECK(s.theta.content_hash() == theta_hash);
  for (const auto& [name, t] : tp.named_parameters()) {
    const bool moved = distance(t, s.theta.param(name)) > 0;
    CHECK_MESSAGE(moved == (name.find(".attn.") != std::string::npos), name);
  }
  CHECK_THROWS_AS(hiding_stage(tp, s.theta, {}, {}, text::neutral_target(s.registry, s.vocab), {}, cfg, opt, s.source,
                               rng),
                  RegistryError);
}

TEST_CASE("zero outer steps copies the foundation model") {
  TinySetup s;
  auto res = run_kpop(s.theta, s.registry, s.vocab, s.config(0), s.source);
  CHECK(res.sanitized.content_hash() == s.theta.content_hash());
  CHECK(res.sanitized.role() == s.theta.role());
  const auto a = temp_path("steps0_theta.kpd"), b = temp_path("steps0_prime.kpd");
  s.theta.save(a);
  res.sanitized.save(b);
  CHECK(io::read_text_file(a) == io::read_text_file(b));
  REQUIRE(res.keys.size() == 2);
  for (const auto& k : res.keys) {
    const auto anchor = attn::Prompt::tile(text::encode({k.concept_id}, s.vocab), 2);
    CHECK(k.anchor_distance == doctest::Approx(distance(k.prompt.values, anchor)));
    CHECK(k.anchor_distance < 0.01 * std::sqrt(double(anchor.numel())) * 2);
    CHECK(k.model_fingerprint == s.theta.content_hash());
  }
  CHECK(res.log.losses.empty());
  CHECK(res.log.snapshots.size() == 2);
}

TEST_CASE("a short run is feasible, isolated and reproducible") {
  TinySetup s;
  const auto path = temp_path("theta.kpd");
  s.theta.save(path);
  const auto bytes_before = io::file_sha256(path);
  auto cfg = s.config(6);
  cfg.rho = 0.5;
  cfg.lr_prompt = 0.2;
  std::vector<int> progress_steps;
  auto a = run_kpop(s.theta, s.registry, s.vocab, cfg, s.source,
                    [&](int step, const LossRecord&) { progress_steps.push_back(step); });
  CHECK(progress_steps == std::vector<int>{1, 2, 3, 4, 5, 6});
  s.theta.save(path);
  CHECK(io::file_sha256(path) == bytes_before);
  CHECK(a.sanitized.content_hash() != s.theta.content_hash());
  REQUIRE(a.log.rho_distance_max.size() == 6);
  for (double d : a.log.rho_distance_max) CHECK(d <= 0.5 + 1e-9);
  CHECK(a.log.snapshots.size() == 2 * 4);
  CHECK(a.log.losses_csv().rfind("step,recovery,hiding,erase,recover,preserve\n", 0) == 0);

  auto b = run_kpop(s.theta, s.registry, s.vocab, cfg, s.source);
  CHECK(b.sanitized.content_hash() == a.sanitized.content_hash());
  const auto ka = temp_path("a.key"), kb = temp_path("b.key");
  a.keys[0].save(ka);
  b.keys[0].save(kb);
  CHECK(io::file_sha256(ka) == io::file_sha256(kb));

  auto loaded = PromptKey::load_for(ka, a.sanitized);
  CHECK(loaded.concept_id == "cross");
  CHECK(loaded.rho == 0.5);
  CHECK(loaded.sites.to_string() == "mid");
  CHECK(loaded.prompt.k_factor == 2);
  CHECK(distance(loaded.prompt.values, a.keys[0].prompt.values) == 0.0);
  CHECK(loaded.config.get("lambda") == cfg.to_manifest().get("lambda"));

  try {
    PromptKey::load_for(ka, s.theta);
    FAIL("expected a fingerprint error");
  } catch (const FingerprintError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(a.sanitized.content_hash()) != std::string::npos);
    CHECK(msg.find(s.theta.content_hash()) != std::string::npos);
  }

  auto broken = a.keys[0];
  broken.anchor_distance = broken.rho + 1.0;
  CHECK_THROWS_AS(broken.save(temp_path("broken.key")), StateError);

  const auto dir = temp_path("log");
  a.log.save(dir);
  auto snaps = KpopLog::load_snapshots(dir / "prompt_snapshots.kpa");
  REQUIRE(snaps.size() == a.log.snapshots.size());
  CHECK(snaps.back().step == 6);
  CHECK(snaps.back().concept_id == "ring");
  CHECK(distance(snaps.back().values, a.log.snapshots.back().values) == 0.0);
}

TEST_CASE("larger lambda keeps the sanitized model closer") {
  TinySetup s;
  auto cfg = s.config(15);
  cfg.lambda = 0.01;
  auto lo = run_kpop(s.theta, s.registry, s.vocab, cfg, s.source);
  cfg.lambda = 10.0;
  auto hi = run_kpop(s.theta, s.registry, s.vocab, cfg, s.source);
  CHECK(param_distance(hi.sanitized, s.theta) < param_distance(lo.sanitized, s.theta));
}

TEST_CASE("key gap compares against the foundation model") {
  TinySetup s;
  auto res = run_kpop(s.theta, s.registry, s.vocab, s.config(2), s.source);
  const ConceptTexts ct{"cross", text::encode({"cross"}, s.vocab)};
  auto g = key_gap(res.sanitized, s.theta, ct, res.keys[0], 4, 1, s.source);
  CHECK(g.no_key > 0);
  CHECK(g.with_key > 0);
  CHECK(g.ratio() == doctest::Approx(g.no_key / g.with_key));
  CHECK_THROWS_AS(key_gap(s.theta, s.theta, ct, res.keys[0], 4, 1, s.source), FingerprintError);
}

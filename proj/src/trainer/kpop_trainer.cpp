#include "kpop/kpop_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::trainer {

using nn::Tensor;

std::string_view optimizer_name(PromptOptimizer o) { return o == PromptOptimizer::sgd ? "sgd" : "adam"; }

PromptOptimizer parse_optimizer(std::string_view name) {
  if (name == "sgd") return PromptOptimizer::sgd;
  if (name == "adam") return PromptOptimizer::adam;
  throw ConfigError("unknown prompt optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

void KpopConfig::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be strictly positive");
  if (!std::isfinite(rho)) throw ConfigError("rho must be finite");
  if (k_factor < 1) throw ConfigError("k must be >= 1");
  if (mechanism == attn::Mechanism::additive && k_factor != 1) throw ConfigError("the additive mechanism requires k = 1");
  if (sites.empty()) throw ConfigError("at least one injection site is required");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (inner_prompt_steps < 0 || inner_model_steps < 0) throw ConfigError("inner step counts must be >= 0");
  if (!(lr_model >= 0.0) || !(lr_prompt >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(init_noise >= 0.0)) throw ConfigError("init noise must be >= 0");
  if (log_every < 1 || snapshot_every < 1) throw ConfigError("log and snapshot intervals must be >= 1");
}

double KpopConfig::resolved_rho(int m_c, int d_c, double embedding_scale) const {
  if (rho > 0.0) return rho;
  return 3.0 * std::sqrt(static_cast<double>(k_factor) * m_c * d_c) * embedding_scale;
}

io::Manifest KpopConfig::to_manifest() const {
  io::Manifest m;
  m.set_num("lambda", lambda);
  m.set_num("rho", rho);
  m.set_num("k", k_factor);
  m.set("mechanism", std::string(attn::mechanism_name(mechanism)));
  m.set("sites", sites.to_string());
  m.set_num("steps", steps);
  m.set_num("inner_prompt_steps", inner_prompt_steps);
  m.set_num("inner_model_steps", inner_model_steps);
  m.set_num("lr_model", lr_model);
  m.set_num("lr_prompt", lr_prompt);
  m.set("prompt_optimizer", std::string(optimizer_name(prompt_optimizer)));
  m.set_num("batch", batch);
  m.set("trainable_subset", std::string(diffusion::subset_name(trainable_subset)));
  m.set("preserve_term", preserve_term ? "true" : "false");
  m.set_num("init_noise", init_noise);
  m.set_num("seed", seed);
  m.set_num("log_every", log_every);
  m.set_num("snapshot_every", snapshot_every);
  return m;
}

KpopConfig KpopConfig::from_manifest(const io::Manifest& m) {
  KpopConfig c;
  for (const auto& [k, v] : m.entries()) {
    try {
      if (k == "lambda") c.lambda = std::stod(v);
      else if (k == "rho") c.rho = std::stod(v);
      else if (k == "k") c.k_factor = std::stoi(v);
      else if (k == "mechanism") c.mechanism = attn::parse_mechanism(v);
      else if (k == "sites") c.sites = attn::SiteSet::parse(v);
      else if (k == "steps") c.steps = std::stoi(v);
      else if (k == "inner_prompt_steps") c.inner_prompt_steps = std::stoi(v);
      else if (k == "inner_model_steps") c.inner_model_steps = std::stoi(v);
      else if (k == "lr_model") c.lr_model = std::stod(v);
      else if (k == "lr_prompt") c.lr_prompt = std::stod(v);
      else if (k == "prompt_optimizer") c.prompt_optimizer = parse_optimizer(v);
      else if (k == "batch") c.batch = std::stoi(v);
      else if (k == "trainable_subset") c.trainable_subset = diffusion::parse_subset(v);
      else if (k == "preserve_term") {
        if (v != "true" && v != "false") throw ConfigError("preserve_term must be true or false");
        c.preserve_term = v == "true";
      } else if (k == "init_noise") c.init_noise = std::stod(v);
      else if (k == "seed") c.seed = std::stoull(v);
      else if (k == "log_every") c.log_every = std::stoi(v);
      else if (k == "snapshot_every") c.snapshot_every = std::stoi(v);
      else throw ConfigError("unknown KPOP setting '" + k + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("KPOP setting '" + k + "' has malformed value '" + v + "'");
    }
  }
  c.validate();
  return c;
}

PromptOptimizerState PromptOptimizerState::create(PromptOptimizer kind, const Tensor& values, const Tensor& anchor,
                                                  double lr, double rho) {
  if (values.shape() != anchor.shape()) throw DimensionError("prompt and anchor shapes differ");
  if (rho < 0.0) throw ConfigError("rho must be >= 0");
  PromptOptimizerState s;
  s.kind = kind;
  s.lr = lr;
  s.rho = rho;
  s.anchor = anchor.detach();
  const Tensor v[] = {values};
  s.adam = nn::AdamState::init(v, lr);
  return s;
}

double distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("distance between " + nn::shape_str(a.shape()) + " and " + nn::shape_str(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

double project_to_ball(Tensor& values, const Tensor& anchor, double rho) {
  const double d = distance(values, anchor);
  if (d <= rho) return d;
  const double s = d > 0 ? rho / d : 0.0;
  auto v = values.mutable_data();
  const auto a = anchor.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + (v[i] - a[i]) * s;
  return distance(values, anchor);
}

namespace {

bool any_nonzero_grad(const Tensor& t) {
  if (!t.has_grad()) return false;
  const auto g = t.grad();
  return std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
}

// Runs one backward pass, rewrapping non-finite losses with the history.
double backward_checked(const Tensor& loss, nn::Tape& tape, const char* stage, int step,
                        const std::vector<double>& history) {
  const double v = loss.item();
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << stage << " loss became non-finite at inner step " << step << "; recent losses:";
    const std::size_t from = history.size() > 8 ? history.size() - 8 : 0;
    for (std::size_t i = from; i < history.size(); ++i) os << ' ' << history[i];
    throw NumericError(os.str());
  }
  tape.backward(loss);
  return v;
}

struct Draw {
  Tensor z;
  Tensor noise;
  std::vector<int> ts;
};

Draw draw(const std::string& concept_id, int n, const diffusion::NoiseSchedule& sch, const ConceptImageSource& source,
          Rng& rng) {
  auto x0 = source(concept_id, n, rng);
  Draw d;
  d.ts.resize(static_cast<std::size_t>(n));
  for (auto& t : d.ts) t = rng.uniform_int(1, sch.T);
  d.noise = Tensor::randn(x0.shape(), rng);
  d.z = diffusion::forward_noise(x0, d.ts, sch, d.noise);
  return d;
}

Tensor frozen_prediction(const diffusion::Denoiser& m, const Draw& d, const Tensor& c) {
  nn::NoGradGuard g;
  return m.predict_noise(d.z, c, d.ts);
}

}  // namespace

StageLoss recovery_stage(const RecoveryObjective& objective, attn::Prompt& prompt, PromptOptimizerState& opt,
                         int steps, Rng& rng, const std::vector<Tensor>& frozen) {
  if (!prompt.values.requires_grad()) throw StateError("prompt values must require gradients during recovery");
  for (auto t : frozen) t.clear_grad();
  StageLoss out;
  std::vector<double> history;
  for (int s = 0; s < steps; ++s) {
    prompt.values.clear_grad();
    {
      nn::Tape tape;
      history.push_back(backward_checked(objective(rng), tape, "recovery", s, history));
    }
    for (const auto& t : frozen) {
      if (any_nonzero_grad(t)) throw StateError("recovery stage produced a gradient on a frozen model parameter");
    }
    if (!prompt.values.has_grad()) throw StateError("recovery objective does not depend on the prompt");
    if (opt.kind == PromptOptimizer::adam) {
      Tensor v[] = {prompt.values};
      nn::adam_step(v, opt.adam);
    } else {
      auto v = prompt.values.mutable_data();
      const auto g = prompt.values.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= opt.lr * g[i];
    }
    project_to_ball(prompt.values, opt.anchor, opt.rho);
  }
  if (!history.empty()) {
    double acc = 0;
    for (double v : history) acc += v;
    out.first = acc / static_cast<double>(history.size());
    out.last = history.back();
  }
  return out;
}

RecoveryObjective diffusion_recovery_objective(const diffusion::Denoiser& theta_prime,
                                               const diffusion::Denoiser& theta, const ConceptTexts& concept_text,
                                               const attn::Prompt& prompt, const KpopConfig& cfg,
                                               const ConceptImageSource& source) {
  return [&theta_prime, &theta, concept_text, &prompt, sites = cfg.sites, batch = cfg.batch, &source](Rng& rng) {
    auto d = draw(concept_text.concept_id, batch, theta.schedule(), source, rng);
    auto target = frozen_prediction(theta, d, concept_text.encoding);
    return nn::mse(theta_prime.predict_noise(d.z, concept_text.encoding, d.ts, &prompt, sites), target);
  };
}

HidingLoss hiding_stage(diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                        const std::vector<ConceptTexts>& erased, const std::vector<attn::Prompt*>& prompts,
                        const Tensor& neutral, const std::vector<ConceptTexts>& preserved, const KpopConfig& cfg,
                        nn::AdamState& opt, const ConceptImageSource& source, Rng& rng) {
  if (erased.empty()) throw RegistryError("hiding needs at least one concept to erase");
  if (prompts.size() != erased.size()) throw UsageError("one prompt per erased concept is required");
  theta_prime.set_requires_grad(false);
  auto params = theta_prime.parameters(cfg.trainable_subset);
  for (auto& p : params) p.set_requires_grad(true);
  for (auto* p : prompts) {
    p->values.set_requires_grad(false);
    p->values.clear_grad();
  }
  HidingLoss out;
  std::vector<double> history;
  const double ne = static_cast<double>(erased.size());
  for (int s = 0; s < cfg.inner_model_steps; ++s) {
    for (auto& p : params) p.clear_grad();
    HidingLoss step;
    {
      nn::Tape tape;
      Tensor total = Tensor::scalar(0.0);
      for (std::size_t e = 0; e < erased.size(); ++e) {
        const auto& ce = erased[e];
        // One (z_t, t, noise) draw shared by both terms.
        auto d = draw(ce.concept_id, cfg.batch, theta.schedule(), source, rng);
        auto target_neutral = frozen_prediction(theta, d, neutral);
        auto target_concept = frozen_prediction(theta, d, ce.encoding);
        auto l1 = nn::mse(theta_prime.predict_noise(d.z, ce.encoding, d.ts), target_neutral);
        auto l2 = nn::mse(theta_prime.predict_noise(d.z, ce.encoding, d.ts, prompts[e], cfg.sites), target_concept);
        step.erase += l1.item() / ne;
        step.recover += l2.item() / ne;
        total = nn::add(total, nn::scale(nn::add(l1, nn::scale(l2, cfg.lambda)), 1.0 / ne));
      }
      if (cfg.preserve_term && !preserved.empty()) {
        const auto& cp = preserved[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(preserved.size()) - 1))];
        auto d = draw(cp.concept_id, cfg.batch, theta.schedule(), source, rng);
        auto l3 = nn::mse(theta_prime.predict_noise(d.z, cp.encoding, d.ts), frozen_prediction(theta, d, cp.encoding));
        step.preserve = l3.item();
        total = nn::add(total, l3);
      }
      step.total = backward_checked(total, tape, "hiding", s, history);
      history.push_back(step.total);
    }
    for (auto* p : prompts) {
      if (any_nonzero_grad(p->values)) throw StateError("hiding stage produced a gradient on a prompt");
    }
    nn::adam_step(params, opt);
    out.total += step.total;
    out.erase += step.erase;
    out.recover += step.recover;
    out.preserve += step.preserve;
  }
  if (cfg.inner_model_steps > 0) {
    const double n = cfg.inner_model_steps;
    out.total /= n;
    out.erase /= n;
    out.recover /= n;
    out.preserve /= n;
  }
  for (auto* p : prompts) p->values.set_requires_grad(true);
  theta_prime.set_requires_grad(false);
  return out;
}

void PromptKey::check_matches(const diffusion::Denoiser& model) const {
  const auto fp = model.content_hash();
  if (fp != model_fingerprint) {
    throw FingerprintError("key for '" + concept_id + "' was issued for checkpoint " + model_fingerprint +
                           " but the checkpoint is " + fp);
  }
}

void PromptKey::save(const std::filesystem::path& path) const {
  if (anchor_distance > rho + 1e-9) {
    throw StateError("key for '" + concept_id + "' lies outside its rho ball");
  }
  io::Archive ar;
  auto& m = ar.manifest;
  m.set("format", "kpop-key");
  m.set("concept_id", concept_id);
  m.set("fingerprint", model_fingerprint);
  m.set("mechanism", std::string(attn::mechanism_name(prompt.mechanism)));
  m.set_num("k", prompt.k_factor);
  m.set("sites", sites.to_string());
  m.set_num("rho", rho);
  m.set_num("anchor_distance", anchor_distance);
  m.set_num("seed", seed);
  for (const auto& [k, v] : config.entries()) m.set("config." + k, v);
  ar.tensors.emplace_back("prompt", prompt.values.detach());
  io::save_archive(path, ar);
}

PromptKey PromptKey::load(const std::filesystem::path& path) {
  const auto ar = io::load_archive(path);
  const auto& m = ar.manifest;
  if (m.get_or("format", "") != "kpop-key") throw FingerprintError(path.string() + " is not a key file");
  PromptKey k;
  k.concept_id = m.get("concept_id");
  k.model_fingerprint = m.get("fingerprint");
  k.prompt.mechanism = attn::parse_mechanism(m.get("mechanism"));
  k.prompt.k_factor = static_cast<int>(m.get_int("k"));
  k.prompt.values = ar.tensor("prompt").detach();
  k.sites = attn::SiteSet::parse(m.get("sites"));
  k.rho = m.get_double("rho");
  k.anchor_distance = m.get_double("anchor_distance");
  k.seed = std::stoull(m.get("seed"));
  for (const auto& [key, v] : m.entries()) {
    if (key.rfind("config.", 0) == 0) k.config.set(key.substr(7), v);
  }
  return k;
}

PromptKey PromptKey::load_for(const std::filesystem::path& path, const diffusion::Denoiser& model) {
  auto k = load(path);
  k.check_matches(model);
  return k;
}

std::string KpopLog::losses_csv() const {
  std::ostringstream os;
  os << "step,recovery,hiding,erase,recover,preserve\n";
  for (const auto& r : losses) {
    os << r.step << ',' << io::Manifest::format_number(r.recovery) << ',' << io::Manifest::format_number(r.hiding) << ','
       << io::Manifest::format_number(r.erase) << ',' << io::Manifest::format_number(r.recover) << ','
       << io::Manifest::format_number(r.preserve) << '\n';
  }
  return os.str();
}

void KpopLog::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_text_file(dir / "losses.csv", losses_csv());
  io::Archive ar;
  ar.manifest.set("format", "kpop-prompt-snapshots");
  ar.manifest.set_num("count", static_cast<std::int64_t>(snapshots.size()));
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    const auto name = "snap." + std::to_string(i);
    ar.manifest.set(name, std::to_string(snapshots[i].step) + " " + snapshots[i].concept_id);
    ar.tensors.emplace_back(name, snapshots[i].values);
  }
  io::save_archive(dir / "prompt_snapshots.kpa", ar);
}

std::vector<PromptSnapshot> KpopLog::load_snapshots(const std::filesystem::path& path) {
  const auto ar = io::load_archive(path);
  if (ar.manifest.get_or("format", "") != "kpop-prompt-snapshots") throw IoError(path.string() + " is not a snapshot file");
  std::vector<PromptSnapshot> out;
  for (const auto& [name, t] : ar.tensors) {
    std::istringstream is(ar.manifest.get(name));
    PromptSnapshot s;
    is >> s.step >> s.concept_id;
    s.values = t;
    out.push_back(std::move(s));
  }
  return out;
}

KpopResult run_kpop(const diffusion::Denoiser& theta, const text::ConceptRegistry& registry,
                    const text::Vocabulary& vocab, const KpopConfig& cfg, const ConceptImageSource& source,
                    const ProgressFn& progress) {
  cfg.validate();
  registry.validate_for_hiding(&vocab);
  Rng rng(cfg.seed);
  std::vector<ConceptTexts> erased, preserved;
  for (const auto& c : registry.erased()) erased.push_back({c.concept_id, text::encode(c.phrase, vocab)});
  for (const auto& c : registry.preserved()) preserved.push_back({c.concept_id, text::encode(c.phrase, vocab)});
  const auto neutral = text::neutral_target(registry, vocab);

  KpopResult res;
  res.sanitized = theta.clone();
  // With no steps theta' is theta, role included, so checkpoints compare equal byte for byte.
  if (cfg.steps > 0) res.sanitized.set_role(diffusion::ModelRole::sanitized);
  res.sanitized.set_requires_grad(false);
  auto& tp = res.sanitized;
  const double rho = cfg.resolved_rho(vocab.seq_len(), vocab.width(), vocab.scale());

  std::vector<attn::Prompt> prompts;
  std::vector<PromptOptimizerState> popt;
  for (const auto& e : erased) {
    const auto anchor = attn::Prompt::tile(e.encoding, cfg.k_factor);
    auto values = anchor.clone();
    auto v = values.mutable_data();
    for (auto& x : v) x += cfg.init_noise * rng.normal();
    project_to_ball(values, anchor, rho);
    values.set_requires_grad(true);
    prompts.push_back({values, cfg.k_factor, cfg.mechanism});
    prompts.back().validate(vocab.seq_len(), vocab.width());
    popt.push_back(PromptOptimizerState::create(cfg.prompt_optimizer, values, anchor, cfg.lr_prompt, rho));
  }
  std::vector<attn::Prompt*> prompt_ptrs;
  for (auto& p : prompts) prompt_ptrs.push_back(&p);
  auto model_opt = nn::AdamState::init(tp.parameters(cfg.trainable_subset), cfg.lr_model);

  auto snapshot = [&](int step) {
    for (std::size_t e = 0; e < erased.size(); ++e) {
      res.log.snapshots.push_back({step, erased[e].concept_id, prompts[e].values.detach()});
    }
  };
  snapshot(0);
  const auto all_params = tp.parameters();
  for (int step = 1; step <= cfg.steps; ++step) {
    LossRecord rec;
    rec.step = step;
    double dmax = 0.0;
    for (std::size_t e = 0; e < erased.size(); ++e) {
      auto obj = diffusion_recovery_objective(tp, theta, erased[e], prompts[e], cfg, source);
      auto l = recovery_stage(obj, prompts[e], popt[e], cfg.inner_prompt_steps, rng, all_params);
      rec.recovery += l.first / static_cast<double>(erased.size());
      dmax = std::max(dmax, distance(prompts[e].values, popt[e].anchor));
    }
    res.log.rho_distance_max.push_back(dmax);
    const auto h = hiding_stage(tp, theta, erased, prompt_ptrs, neutral, preserved, cfg, model_opt, source, rng);
    rec.hiding = h.total;
    rec.erase = h.erase;
    rec.recover = h.recover;
    rec.preserve = h.preserve;
    res.log.losses.push_back(rec);
    if (progress && (step % cfg.log_every == 0 || step == cfg.steps)) progress(step, rec);
    if (step % cfg.snapshot_every == 0 || step == cfg.steps) snapshot(step);
  }

  const auto fp = tp.content_hash();
  for (std::size_t e = 0; e < erased.size(); ++e) {
    PromptKey k;
    k.prompt = {prompts[e].values.detach(), cfg.k_factor, cfg.mechanism};
    k.concept_id = erased[e].concept_id;
    k.model_fingerprint = fp;
    k.sites = cfg.sites;
    k.rho = rho;
    k.anchor_distance = distance(prompts[e].values, popt[e].anchor);
    k.seed = cfg.seed;
    k.config = cfg.to_manifest();
    res.keys.push_back(std::move(k));
  }
  return res;
}

GapReport key_gap(const diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                  const ConceptTexts& concept_text, const PromptKey& key, int draws, std::uint64_t seed,
                  const ConceptImageSource& source) {
  key.check_matches(theta_prime);
  if (draws < 1) throw UsageError("key_gap needs at least one draw");
  Rng rng(seed);
  nn::NoGradGuard g;
  GapReport r;
  for (int i = 0; i < draws; ++i) {
    auto d = draw(concept_text.concept_id, 1, theta.schedule(), source, rng);
    auto target = theta.predict_noise(d.z, concept_text.encoding, d.ts);
    r.no_key += nn::mse(theta_prime.predict_noise(d.z, concept_text.encoding, d.ts), target).item();
    r.with_key +=
        nn::mse(theta_prime.predict_noise(d.z, concept_text.encoding, d.ts, &key.prompt, key.sites), target).item();
  }
  r.no_key /= draws;
  r.with_key /= draws;
  return r;
}

}  // namespace kpop::trainer

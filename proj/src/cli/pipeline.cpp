#include "kpop/pipeline.hpp"

#include <cstdio>
#include <iostream>
#include <sstream>

#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/image_io.hpp"
#include "kpop/ops.hpp"

namespace kpop::pipeline {

namespace {

std::string num(double v) { return io::Manifest::format_number(v); }

const data::ConceptClass& find_class(const std::vector<data::ConceptClass>& classes, const std::string& id) {
  for (const auto& c : classes) {
    if (c.concept_id == id) return c;
  }
  throw RegistryError("unknown class '" + id + "'");
}

trainer::ConceptImageSource render_source() {
  auto classes = std::make_shared<std::vector<data::ConceptClass>>(data::oracle_classes());
  return [classes](const std::string& id, int n, Rng& rng) { return data::render_batch(*classes, id, n, rng); };
}

std::vector<text::Phrase> probe_phrases() {
  std::vector<text::Phrase> probes;
  for (const auto& c : data::standard_classes()) probes.push_back(class_phrase(c));
  probes.push_back({});
  return probes;
}

}  // namespace

void log_line(const std::string& line) { std::clog << line << std::endl; }

text::Phrase class_phrase(const data::ConceptClass& cls) {
  return cls.token.empty() ? text::Phrase{} : text::Phrase{cls.token};
}

std::vector<std::string> standard_ids() {
  std::vector<std::string> ids;
  for (const auto& c : data::standard_classes()) ids.push_back(c.concept_id);
  return ids;
}

void write_config_snapshot(const fs::path& dir, const std::string& text) {
  fs::create_directories(dir);
  io::write_text_file(dir / "resolved_config.ini", text);
}

data::LabeledImages make_data(const DataOptions& options, const fs::path& out_file) {
  if (options.per_class < 1) throw ConfigError("per-class count must be >= 1");
  const auto classes = data::oracle_classes();
  auto set = data::render_dataset(classes, options.per_class, options.seed);
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  data::save_dataset(out_file, set, options.seed);
  log_line("dataset: " + std::to_string(set.size()) + " images over " + std::to_string(classes.size()) +
           " classes -> " + out_file.string());
  return set;
}

data::OracleClassifier train_oracle(const data::OracleConfig& config, const fs::path& out_file) {
  auto oracle = data::OracleClassifier::train(config);
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  oracle.save(out_file);
  std::ostringstream os;
  os << "validation_accuracy " << num(oracle.validation_accuracy()) << "\n";
  os << "gate " << num(data::OracleClassifier::kAccuracyGate) << " confusion_limit "
     << num(data::OracleClassifier::kConfusionLimit) << "\n\nconfusion";
  for (const auto& c : oracle.classes()) os << ' ' << c;
  os << '\n';
  for (std::size_t i = 0; i < oracle.classes().size(); ++i) {
    os << oracle.classes()[i];
    for (double v : oracle.confusion()[i]) os << ' ' << num(v);
    os << '\n';
  }
  io::write_text_file(out_file.parent_path() / "oracle_report.txt", os.str());
  log_line("oracle: validation accuracy " + num(oracle.validation_accuracy()));
  return oracle;
}

BaseResult train_base(const BaseOptions& options, const data::LabeledImages& dataset,
                      const data::OracleClassifier& oracle, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto vocab = text::Vocabulary::standard(options.vocab_seed, options.arch.seq_len, options.arch.text_width);
  const auto classes = data::oracle_classes();
  std::vector<text::Phrase> phrases;
  phrases.reserve(dataset.size());
  for (int l : dataset.labels) {
    phrases.push_back(class_phrase(find_class(classes, dataset.class_ids.at(static_cast<std::size_t>(l)))));
  }
  const auto texts = text::encode_batch(phrases, vocab);

  BaseResult r;
  r.model = diffusion::Denoiser::create(
      options.arch, diffusion::NoiseSchedule::linear(options.T, options.beta_start, options.beta_end),
      options.init_seed);
  log_line("train-base: " + std::to_string(r.model.parameter_count()) + " parameters, " +
           std::to_string(options.train.steps) + " steps");
  const auto log = diffusion::train_denoiser(r.model, dataset.images, texts, options.train);
  r.model.save(out_dir / "foundation.kpd");

  std::ostringstream csv;
  csv << "step,loss\n";
  io::Series s{"loss", {}, {}};
  for (const auto& e : log) {
    csv << e.step << ',' << num(e.loss) << '\n';
    s.x.push_back(e.step);
    s.y.push_back(e.loss);
  }
  io::write_text_file(out_dir / "train_log.csv", csv.str());
  io::write_ppm(out_dir / "train_loss.ppm", io::line_plot({s}, {480, 320, "foundation training", "step", "loss"}));

  std::ostringstream gate;
  gate << "class accuracy (top-1, n=" << options.gate_n << ", sampler steps " << options.gate_sampler_steps << ")\n";
  std::vector<nn::Tensor> grids;
  double total = 0;
  for (const auto& cls : data::standard_classes()) {
    diffusion::SampleOptions so;
    so.steps = options.gate_sampler_steps;
    const auto imgs = eval::generate(r.model, text::encode(class_phrase(cls), vocab), options.gate_n,
                                     eval::concept_seed(options.gate_seed, cls.concept_id), so, options.jobs);
    int ok = 0;
    for (const auto& t : oracle.classify_topk(imgs, 1)) ok += t.entries.at(0).first == cls.concept_id;
    const double acc = static_cast<double>(ok) / options.gate_n;
    r.class_accuracy.emplace_back(cls.concept_id, acc);
    total += acc;
    gate << cls.concept_id << ' ' << num(acc) << '\n';
    grids.push_back(data::slice_rows(imgs, 0, std::min(8, options.gate_n)));
  }
  r.mean_accuracy = total / static_cast<double>(r.class_accuracy.size());
  gate << "mean " << num(r.mean_accuracy) << "\ngate " << num(options.gate) << ' '
       << (r.mean_accuracy >= options.gate ? "pass" : "fail") << '\n';
  io::write_text_file(out_dir / "gate.txt", gate.str());
  io::write_pgm(out_dir / "samples.pgm", io::tile_images(nn::concat(std::span<const nn::Tensor>(grids), 0), 8, 2));
  log_line("train-base: mean sample accuracy " + num(r.mean_accuracy));
  if (r.mean_accuracy < options.gate) {
    throw StateError("foundation sample accuracy " + num(r.mean_accuracy) + " is below the gate " +
                     num(options.gate) + " (see " + (out_dir / "gate.txt").string() + ")");
  }
  return r;
}

trainer::KpopResult hide(const HideOptions& options, const diffusion::Denoiser& theta, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto& arch = theta.arch();
  const auto vocab = text::Vocabulary::standard(options.vocab_seed, arch.seq_len, arch.text_width);
  const auto registry = data::standard_registry(options.erase, options.vocab_seed);
  io::write_text_file(out_dir / "kpop_config.txt", options.kpop.to_manifest().to_text());
  const int every = std::max(1, options.kpop.steps / 10);
  auto res = trainer::run_kpop(theta, registry, vocab, options.kpop, render_source(),
                               [every](int step, const trainer::LossRecord& l) {
                                 if (step % every == 0) {
                                   char buf[160];
                                   std::snprintf(buf, sizeof buf, "hide: step %d recovery %.5f erase %.5f recover %.5f",
                                                 step, l.recovery, l.erase, l.recover);
                                   log_line(buf);
                                 }
                               });
  res.sanitized.save(out_dir / "sanitized.kpd");
  fs::create_directories(out_dir / "keys");
  for (const auto& k : res.keys) k.save(out_dir / "keys" / (k.concept_id + ".key"));
  res.log.save(out_dir);

  std::vector<io::Series> loss_series{{"recovery", {}, {}}, {"hiding", {}, {}}};
  for (const auto& l : res.log.losses) {
    loss_series[0].x.push_back(l.step);
    loss_series[0].y.push_back(l.recovery);
    loss_series[1].x.push_back(l.step);
    loss_series[1].y.push_back(l.hiding);
  }
  io::write_ppm(out_dir / "losses.ppm", io::line_plot(loss_series, {480, 320, "kpop losses", "step", "loss"}));

  const auto probes = probe_phrases();
  for (const auto& id : options.erase) {
    const auto tr = eval::alignment_trace(res.log.snapshots, id, vocab, probes, options.kpop.snapshot_every,
                                          options.kpop.steps);
    io::write_text_file(out_dir / ("alignment_" + id + ".csv"), tr.to_csv());
    io::write_ppm(out_dir / ("alignment_" + id + ".ppm"), tr.plot("prompt alignment " + id));
  }
  log_line("hide: wrote " + std::to_string(res.keys.size()) + " keys to " + (out_dir / "keys").string());
  return res;
}

eval::MetricsReport evaluate(const EvaluateOptions& options, const diffusion::Denoiser& model,
                             std::span<const trainer::PromptKey> keys, const data::OracleClassifier& oracle,
                             const fs::path& out_dir) {
  const auto& arch = model.arch();
  const auto vocab = text::Vocabulary::standard(options.vocab_seed, arch.seq_len, arch.text_width);
  const auto registry = data::standard_registry(options.erase, options.vocab_seed);
  auto report = eval::esr_psr_rsr(model, keys, registry, vocab, oracle, options.eval);
  report.save(out_dir);
  log_line("evaluate: " + std::string(diffusion::role_name(model.role())) + " ESR-1 " +
           num(report.esr_at(options.eval.k_list.front())) + " PSR-1 " +
           num(report.psr_at(options.eval.k_list.front())) +
           (report.rsr ? " RSR-1 " + num(*report.rsr_at(options.eval.k_list.front())) : std::string{}));
  return report;
}

std::vector<trainer::GapReport> key_gaps(const diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                                         std::span<const trainer::PromptKey> keys, std::uint64_t vocab_seed,
                                         int draws, std::uint64_t seed, const fs::path& out_dir) {
  const auto& arch = theta.arch();
  const auto vocab = text::Vocabulary::standard(vocab_seed, arch.seq_len, arch.text_width);
  const auto classes = data::oracle_classes();
  const auto source = render_source();
  std::vector<trainer::GapReport> out;
  std::ostringstream csv;
  csv << "concept,no_key,with_key,ratio\n";
  for (const auto& k : keys) {
    const trainer::ConceptTexts ct{k.concept_id, text::encode(class_phrase(find_class(classes, k.concept_id)), vocab)};
    out.push_back(trainer::key_gap(theta_prime, theta, ct, k, draws, seed, source));
    csv << k.concept_id << ',' << num(out.back().no_key) << ',' << num(out.back().with_key) << ','
        << num(out.back().ratio()) << '\n';
  }
  fs::create_directories(out_dir);
  io::write_text_file(out_dir / "gap.csv", csv.str());
  return out;
}

eval::TrendTable ablate(const AblateOptions& options, const diffusion::Denoiser& theta,
                        const data::OracleClassifier& oracle, const fs::path& out_dir) {
  if (options.values.empty()) throw UsageError("ablation grid for '" + options.parameter + "' is empty");
  eval::TrendTable table;
  table.parameter = options.parameter;
  std::vector<eval::MetricsReport> split_reports;
  for (std::size_t i = 0; i < options.values.size(); ++i) {
    const auto& v = options.values[i];
    HideOptions h = options.hide;
    EvaluateOptions e = options.evaluate;
    double x = static_cast<double>(i);
    if (options.parameter == "lambda") {
      h.kpop.lambda = std::stod(v);
      x = std::log10(h.kpop.lambda);
    } else if (options.parameter == "k") {
      h.kpop.k_factor = std::stoi(v);
      x = h.kpop.k_factor;
    } else if (options.parameter == "sites") {
      h.kpop.sites = attn::SiteSet::parse(v);
    } else if (options.parameter == "mechanism") {
      h.kpop.mechanism = attn::parse_mechanism(v);
      if (h.kpop.mechanism == attn::Mechanism::additive) h.kpop.k_factor = 1;
    } else if (options.parameter == "split") {
      const auto ids = standard_ids();
      h.erase = eval::class_splits(ids, 1, static_cast<int>(options.hide.erase.size()), std::stoull(v))[0];
      e.erase = h.erase;
      if (std::find(h.erase.begin(), h.erase.end(), e.eval.ner_concept) == h.erase.end()) e.eval.ner_concept.clear();
    } else {
      throw UsageError("unknown ablation parameter '" + options.parameter +
                       "' (expected lambda, k, sites, mechanism or split)");
    }
    h.kpop.validate();
    const auto cell = out_dir / ("cell_" + options.parameter + "_" + v);
    log_line("ablate: " + options.parameter + " = " + v);
    auto res = hide(h, theta, cell / "hide");
    auto report = evaluate(e, res.sanitized, res.keys, oracle, cell / "eval");
    if (options.parameter == "split") {
      std::string erase;
      for (const auto& id : h.erase) erase += (erase.empty() ? "" : "+") + id;
      io::write_text_file(cell / "split.txt", erase + "\n");
      split_reports.push_back(report);
    }
    table.rows.push_back({v, x, std::move(report)});
  }
  fs::create_directories(out_dir);
  io::write_text_file(out_dir / "table.csv", table.to_csv());
  io::write_text_file(out_dir / "table.txt", table.to_text());
  io::write_ppm(out_dir / "trend.ppm", table.plot());
  if (!split_reports.empty()) eval::merge_runs(split_reports).save(out_dir / "merged");
  return table;
}

std::vector<attrib::AttributionMap> attribute(const AttributeOptions& options, const diffusion::Denoiser& model,
                                              const trainer::PromptKey* key, const fs::path& out_dir,
                                              const std::string& stem) {
  if (options.seeds < 1) throw ConfigError("seeds must be >= 1");
  if (options.tokens.empty()) throw UsageError("no token indices given");
  if (key) key->check_matches(model);
  const auto& arch = model.arch();
  const auto vocab = text::Vocabulary::standard(options.vocab_seed, arch.seq_len, arch.text_width);
  attrib::AttributeOptions ao;
  ao.layer = attrib::parse_layer(options.layer);
  ao.sampler_steps = options.sampler_steps;
  std::vector<attrib::AttributionMap> all;
  std::ostringstream csv;
  csv << "seed,token_index,token,entropy,degenerate\n";
  for (int s = 0; s < options.seeds; ++s) {
    ao.seed = options.seed + static_cast<std::uint64_t>(s);
    auto maps = attrib::attribute(model, options.phrase, vocab, key ? &key->prompt : nullptr,
                                  key ? key->sites : attn::SiteSet::mid_only(), options.tokens, ao);
    attrib::save_maps(out_dir / ("seed_" + std::to_string(ao.seed)), maps, stem);
    for (auto& m : maps) {
      csv << ao.seed << ',' << m.token_index << ',' << m.token << ',' << num(m.entropy) << ',' << (m.degenerate ? 1 : 0)
          << '\n';
      all.push_back(std::move(m));
    }
  }
  fs::create_directories(out_dir);
  io::write_text_file(out_dir / "entropy.csv", csv.str());
  return all;
}

void repro(const ReproOptions& options, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto dataset = make_data(options.data, out_dir / "data" / "dataset.kpd");
  const auto oracle = train_oracle(options.oracle, out_dir / "oracle" / "oracle.kpa");
  const auto base = train_base(options.base, dataset, oracle, out_dir / "base");
  const auto res = hide(options.hide, base.model, out_dir / "hide");
  auto eval_opts = options.evaluate;
  evaluate(eval_opts, base.model, {}, oracle, out_dir / "eval_foundation");
  evaluate(eval_opts, res.sanitized, res.keys, oracle, out_dir / "eval_sanitized");
  key_gaps(res.sanitized, base.model, res.keys, options.hide.vocab_seed, options.gap_draws, options.gap_seed,
           out_dir / "eval_sanitized");
}

}  // namespace kpop::pipeline

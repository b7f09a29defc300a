#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"
#include "kpop/pipeline.hpp"

using namespace kpop;
namespace fs = std::filesystem;

namespace {

// Enum-valued flags are taken as text and converted after parsing.
struct KpopFlags {
  std::string mechanism = "concat";
  std::string sites = "mid";
  std::string subset;
  std::string optimizer;
};

struct EvalFlags {
  std::string ner_concept = data::kForbiddenId;
};

CLI::App* command(CLI::App& app, const std::string& name, const std::string& help) {
  auto* sub = app.add_subcommand(name, help);
  // Consumed by expand_config before parsing; registered for --help.
  sub->add_option("--config", "key = value file; flags given on the command line win");
  return sub;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

// Splices `--config FILE` entries into the argument list as flags, skipping
// any key that is also given on the command line.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string file;
  std::size_t at = 0;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      at = i;
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      at = i;
      break;
    }
  }
  if (file.empty()) return args;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i].rfind("--", 0) == 0) given.insert(args[i].substr(2, args[i].find('=') - 2));
  }
  std::istringstream in(io::read_text_file(file));
  std::vector<std::string> extra;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(file + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
    // Lists come back as "a", "b"; strip the quotes from every element.
    std::string joined, item;
    std::istringstream items(value);
    while (std::getline(items, item, ',')) {
      item = trim(item);
      if (item.size() >= 2 && (item.front() == '"' || item.front() == '\'') && item.back() == item.front()) {
        item = item.substr(1, item.size() - 2);
      }
      joined += (joined.empty() ? "" : ",") + item;
    }
    value = joined;
    if (given.count(key)) continue;
    extra.push_back("--" + key);
    extra.push_back(value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
  return args;
}

void add_arch(CLI::App* sub, pipeline::BaseOptions& o) {
  sub->add_option("--width1", o.arch.width1, "channels of the 16x16 blocks");
  sub->add_option("--width2", o.arch.width2, "channels of the 8x8 and 4x4 blocks");
  sub->add_option("--heads", o.arch.heads, "attention heads");
  sub->add_option("--timesteps", o.T, "diffusion steps T");
  sub->add_option("--beta-start", o.beta_start);
  sub->add_option("--beta-end", o.beta_end);
}

void add_base(CLI::App* sub, pipeline::BaseOptions& o) {
  add_arch(sub, o);
  sub->add_option("--base-steps", o.train.steps, "foundation training steps");
  sub->add_option("--base-lr", o.train.lr);
  sub->add_option("--base-batch", o.train.batch);
  sub->add_option("--base-seed", o.train.seed, "minibatch and noise seed");
  sub->add_option("--init-seed", o.init_seed, "parameter initialisation seed");
  sub->add_option("--gate", o.gate, "required mean top-1 sample accuracy");
  sub->add_option("--gate-n", o.gate_n, "samples per class for the gate");
  sub->add_option("--gate-sampler-steps", o.gate_sampler_steps);
  sub->add_option("--gate-seed", o.gate_seed);
}

void add_kpop(CLI::App* sub, pipeline::HideOptions& o, KpopFlags& f) {
  auto& c = o.kpop;
  f.subset = std::string(diffusion::subset_name(c.trainable_subset));
  f.optimizer = std::string(trainer::optimizer_name(c.prompt_optimizer));
  sub->add_option("--erase", o.erase, "concepts to hide")->delimiter(',');
  sub->add_option("--lambda", c.lambda, "weight of the recovery term in the hiding loss");
  sub->add_option("--k", c.k_factor, "prompt size factor (m_p = k * m_c)");
  sub->add_option("--mechanism", f.mechanism, "concat or additive");
  sub->add_option("--sites", f.sites, "prompt injection sites, e.g. mid, mid-up, down-mid-up");
  sub->add_option("--steps", c.steps, "outer iterations");
  sub->add_option("--lr", c.lr_model, "model learning rate");
  sub->add_option("--lr-prompt", c.lr_prompt);
  sub->add_option("--batch", c.batch);
  sub->add_option("--rho", c.rho, "prompt ball radius; <= 0 picks the default");
  sub->add_option("--inner-prompt-steps", c.inner_prompt_steps);
  sub->add_option("--inner-model-steps", c.inner_model_steps);
  sub->add_option("--subset", f.subset, "trainable parameters: all, cross-attention or non-cross-attention");
  sub->add_option("--optimizer", f.optimizer, "prompt optimizer: adam or sgd");
  sub->add_option("--preserve", c.preserve_term, "add the preservation term");
  sub->add_option("--init-noise", c.init_noise);
  sub->add_option("--seed", c.seed);
  sub->add_option("--log-every", c.log_every);
  sub->add_option("--snapshot-every", c.snapshot_every);
  sub->add_option("--vocab-seed", o.vocab_seed);
}

void resolve(pipeline::HideOptions& o, const KpopFlags& f) {
  o.kpop.mechanism = attn::parse_mechanism(f.mechanism);
  o.kpop.sites = attn::SiteSet::parse(f.sites);
  o.kpop.trainable_subset = diffusion::parse_subset(f.subset);
  o.kpop.prompt_optimizer = trainer::parse_optimizer(f.optimizer);
  o.kpop.validate();
}

void add_eval(CLI::App* sub, pipeline::EvaluateOptions& o, EvalFlags& f, const std::string& k_flag, bool erase) {
  auto& e = o.eval;
  if (erase) sub->add_option("--erase", o.erase, "concepts that were hidden")->delimiter(',');
  sub->add_option("--n", e.n, "samples per class");
  sub->add_option(k_flag, e.k_list, "top-k values")->delimiter(',');
  sub->add_option("--thresholds", e.thresholds, "NER confidence thresholds")->delimiter(',');
  sub->add_option("--ner-concept", f.ner_concept, "class used for NER; empty disables");
  sub->add_option("--sampler-steps", e.sampler_steps);
  sub->add_option("--eval-seed", e.seed);
  sub->add_option("--jobs", e.jobs, "sampling threads");
}

void resolve(pipeline::EvaluateOptions& o, const EvalFlags& f) {
  o.eval.ner_concept = f.ner_concept;
  o.eval.validate();
}

std::vector<trainer::PromptKey> load_keys(const std::vector<std::string>& paths, const diffusion::Denoiser& model) {
  std::vector<trainer::PromptKey> keys;
  for (const auto& p : paths) keys.push_back(trainer::PromptKey::load_for(p, model));
  return keys;
}

int usage_exit(const std::string& msg) {
  std::cerr << "error: " << msg << std::endl;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Key-locked concept hiding for a small text-conditioned diffusion model"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("--quiet", quiet, "no progress output");

  fs::path out;
  fs::path dataset_path, oracle_path, checkpoint_path, foundation_path, key_path;
  std::vector<std::string> key_paths;

  // make-data
  pipeline::DataOptions data_opts;
  auto* make_data = command(app, "make-data", "render the labelled synthetic dataset");
  make_data->add_option("--out", out, "dataset file")->required();
  make_data->add_option("--per-class", data_opts.per_class);
  make_data->add_option("--seed", data_opts.seed);

  // train-oracle
  data::OracleConfig oracle_opts;
  auto* train_oracle = command(app, "train-oracle", "train the frozen classifier oracle");
  train_oracle->add_option("--out", out, "oracle file")->required();
  train_oracle->add_option("--seed", oracle_opts.seed);
  train_oracle->add_option("--steps", oracle_opts.steps);
  train_oracle->add_option("--train-per-class", oracle_opts.n_train_per_class);
  train_oracle->add_option("--val-per-class", oracle_opts.n_val_per_class);
  train_oracle->add_option("--batch", oracle_opts.batch);
  train_oracle->add_option("--lr", oracle_opts.lr);
  train_oracle->add_option("--pixel-noise", oracle_opts.pixel_noise);

  // train-base
  pipeline::BaseOptions base_opts;
  auto* train_base = command(app, "train-base", "train the foundation model and check its sample-accuracy gate");
  train_base->add_option("--dataset", dataset_path)->required()->check(CLI::ExistingFile);
  train_base->add_option("--oracle", oracle_path)->required()->check(CLI::ExistingFile);
  train_base->add_option("--out", out, "output directory")->required();
  add_base(train_base, base_opts);
  train_base->add_option("--vocab-seed", base_opts.vocab_seed);
  train_base->add_option("--jobs", base_opts.jobs);

  // hide
  pipeline::HideOptions hide_opts;
  KpopFlags hide_flags;
  auto* hide = command(app, "hide", "run KPOP: hide concepts behind learned prompt keys");
  hide->add_option("--checkpoint", checkpoint_path, "foundation checkpoint")->required()->check(CLI::ExistingFile);
  hide->add_option("--out", out, "output directory")->required();
  add_kpop(hide, hide_opts, hide_flags);

  // generate
  std::string concept_id, phrase_text;
  int gen_n = 16, gen_steps = 50, gen_jobs = 1;
  std::uint64_t gen_seed = 0, gen_vocab_seed = 7;
  auto* generate = command(app, "generate", "sample images, optionally with a key");
  generate->add_option("--checkpoint", checkpoint_path)->required()->check(CLI::ExistingFile);
  generate->add_option("--key", key_path, "prompt key file")->check(CLI::ExistingFile);
  auto* concept_opt = generate->add_option("--concept", concept_id, "class id to prompt with");
  generate->add_option("--phrase", phrase_text, "free phrase over the vocabulary")->excludes(concept_opt);
  generate->add_option("--n", gen_n);
  generate->add_option("--seed", gen_seed);
  generate->add_option("--sampler-steps", gen_steps);
  generate->add_option("--vocab-seed", gen_vocab_seed);
  generate->add_option("--jobs", gen_jobs);
  generate->add_option("--out", out, "output directory")->required();

  // evaluate
  pipeline::EvaluateOptions eval_opts;
  EvalFlags eval_flags;
  auto* evaluate = command(app, "evaluate", "ESR/PSR/RSR and NER report for a checkpoint");
  evaluate->add_option("--checkpoint", checkpoint_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--keys", key_paths, "key files")->delimiter(',')->check(CLI::ExistingFile);
  evaluate->add_option("--oracle", oracle_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--foundation", foundation_path, "foundation checkpoint; adds key gaps")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--vocab-seed", eval_opts.vocab_seed);
  evaluate->add_option("--out", out, "output directory")->required();
  add_eval(evaluate, eval_opts, eval_flags, "--k", true);

  // ablate
  pipeline::AblateOptions ablate_opts;
  KpopFlags ablate_kflags;
  EvalFlags ablate_eflags;
  auto* ablate = command(app, "ablate", "hide + evaluate over a one-parameter grid");
  ablate->add_option("--checkpoint", checkpoint_path)->required()->check(CLI::ExistingFile);
  ablate->add_option("--oracle", oracle_path)->required()->check(CLI::ExistingFile);
  ablate->add_option("--param", ablate_opts.parameter, "lambda, k, sites, mechanism or split")->required();
  ablate->add_option("--values", ablate_opts.values, "grid values")->delimiter(',');
  ablate->add_option("--out", out, "output directory")->required();
  add_kpop(ablate, ablate_opts.hide, ablate_kflags);
  add_eval(ablate, ablate_opts.evaluate, ablate_eflags, "--topk", false);

  // attribute
  pipeline::AttributeOptions attr_opts;
  std::string attr_phrase = "cross", attr_stem = "map";
  auto* attribute = command(app, "attribute", "per-token cross-attention attribution maps");
  attribute->add_option("--checkpoint", checkpoint_path)->required()->check(CLI::ExistingFile);
  attribute->add_option("--key", key_path, "prompt key file")->check(CLI::ExistingFile);
  attribute->add_option("--phrase", attr_phrase);
  attribute->add_option("--tokens", attr_opts.tokens, "token indices along the attended axis")->delimiter(',');
  attribute->add_option("--layer", attr_opts.layer, "d1, d2, mid, u2 or u1");
  attribute->add_option("--sampler-steps", attr_opts.sampler_steps);
  attribute->add_option("--seed", attr_opts.seed);
  attribute->add_option("--seeds", attr_opts.seeds, "number of consecutive seeds");
  attribute->add_option("--vocab-seed", attr_opts.vocab_seed);
  attribute->add_option("--stem", attr_stem, "file name prefix");
  attribute->add_option("--out", out, "output directory")->required();

  // repro
  pipeline::ReproOptions repro_opts;
  KpopFlags repro_kflags;
  EvalFlags repro_eflags;
  auto* repro = command(app, "repro", "make-data, train-oracle, train-base, hide and evaluate in one run");
  repro->add_option("--out", out, "output directory")->required();
  repro->add_option("--data-per-class", repro_opts.data.per_class);
  repro->add_option("--data-seed", repro_opts.data.seed);
  repro->add_option("--oracle-seed", repro_opts.oracle.seed);
  repro->add_option("--oracle-steps", repro_opts.oracle.steps);
  add_base(repro, repro_opts.base);
  add_kpop(repro, repro_opts.hide, repro_kflags);
  add_eval(repro, repro_opts.evaluate, repro_eflags, "--topk", false);
  repro->add_option("--gap-draws", repro_opts.gap_draws);
  repro->add_option("--gap-seed", repro_opts.gap_seed);

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const std::exception& e) {
    return usage_exit(e.what());
  }
  std::vector<char*> cargs;
  for (auto& a : args) cargs.push_back(a.data());

  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return usage_exit(e.what());
  }
  if (quiet) std::clog.rdbuf(nullptr);

  auto* sub = app.get_subcommands().front();
  const std::string snapshot = sub->config_to_str(true, false);

  try {
    if (sub == make_data) {
      pipeline::write_config_snapshot(out.parent_path().empty() ? fs::path(".") : out.parent_path(), snapshot);
      pipeline::make_data(data_opts, out);
    } else if (sub == train_oracle) {
      pipeline::write_config_snapshot(out.parent_path().empty() ? fs::path(".") : out.parent_path(), snapshot);
      pipeline::train_oracle(oracle_opts, out);
    } else if (sub == train_base) {
      pipeline::write_config_snapshot(out, snapshot);
      const auto ds = data::load_dataset(dataset_path);
      const auto oracle = data::OracleClassifier::load(oracle_path);
      pipeline::train_base(base_opts, ds, oracle, out);
    } else if (sub == hide) {
      resolve(hide_opts, hide_flags);
      pipeline::write_config_snapshot(out, snapshot);
      const auto theta = diffusion::Denoiser::load(checkpoint_path);
      pipeline::hide(hide_opts, theta, out);
    } else if (sub == generate) {
      if (gen_n < 1) throw UsageError("--n must be >= 1");
      const auto model = diffusion::Denoiser::load(checkpoint_path);
      std::optional<trainer::PromptKey> key;
      if (!key_path.empty()) key = trainer::PromptKey::load_for(key_path, model);
      const auto vocab = text::Vocabulary::standard(gen_vocab_seed, model.arch().seq_len, model.arch().text_width);
      text::Phrase phrase;
      std::string label;
      if (!concept_id.empty()) {
        const auto registry = data::standard_registry(std::vector<std::string>{}, gen_vocab_seed);
        phrase = registry.find(concept_id).phrase;
        label = concept_id;
      } else {
        phrase = text::parse_phrase(phrase_text);
        label = phrase_text;
      }
      pipeline::write_config_snapshot(out, snapshot);
      diffusion::SampleOptions so;
      so.steps = gen_steps;
      if (key) {
        so.prompt = &key->prompt;
        so.sites = key->sites;
      }
      const auto imgs = eval::generate(model, text::encode(phrase, vocab), gen_n, gen_seed, so, gen_jobs);
      std::ostringstream manifest;
      manifest << "concept = " << label << "\nkey = " << (key ? key_path.string() : "none")
               << "\nseed = " << gen_seed << "\nn = " << gen_n << "\nsampler_steps = " << gen_steps
               << "\ncheckpoint = " << model.content_hash() << "\n";
      for (int i = 0; i < gen_n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "image_%03d.pgm", i);
        io::write_pgm(out / name, io::tile_images(data::slice_rows(imgs, i, 1), 1, 4));
        manifest << "image = " << name << "\n";
      }
      io::write_pgm(out / "grid.pgm", io::tile_images(imgs, 8, 2));
      io::write_text_file(out / "manifest.txt", manifest.str());
    } else if (sub == evaluate) {
      resolve(eval_opts, eval_flags);
      const auto model = diffusion::Denoiser::load(checkpoint_path);
      const auto keys = load_keys(key_paths, model);
      const auto oracle = data::OracleClassifier::load(oracle_path);
      pipeline::write_config_snapshot(out, snapshot);
      pipeline::evaluate(eval_opts, model, keys, oracle, out);
      if (!foundation_path.empty() && !keys.empty()) {
        const auto theta = diffusion::Denoiser::load(foundation_path);
        pipeline::key_gaps(model, theta, keys, eval_opts.vocab_seed, 64, 5, out);
      }
    } else if (sub == ablate) {
      resolve(ablate_opts.hide, ablate_kflags);
      resolve(ablate_opts.evaluate, ablate_eflags);
      ablate_opts.evaluate.erase = ablate_opts.hide.erase;
      ablate_opts.evaluate.vocab_seed = ablate_opts.hide.vocab_seed;
      if (ablate_opts.values.empty()) throw UsageError("ablation grid for '" + ablate_opts.parameter + "' is empty");
      pipeline::write_config_snapshot(out, snapshot);
      const auto theta = diffusion::Denoiser::load(checkpoint_path);
      const auto oracle = data::OracleClassifier::load(oracle_path);
      const auto table = pipeline::ablate(ablate_opts, theta, oracle, out);
      std::cout << table.to_text();
    } else if (sub == attribute) {
      attr_opts.phrase = text::parse_phrase(attr_phrase);
      const auto model = diffusion::Denoiser::load(checkpoint_path);
      std::optional<trainer::PromptKey> key;
      if (!key_path.empty()) key = trainer::PromptKey::load_for(key_path, model);
      pipeline::write_config_snapshot(out, snapshot);
      pipeline::attribute(attr_opts, model, key ? &*key : nullptr, out, attr_stem);
    } else if (sub == repro) {
      resolve(repro_opts.hide, repro_kflags);
      resolve(repro_opts.evaluate, repro_eflags);
      repro_opts.evaluate.erase = repro_opts.hide.erase;
      repro_opts.evaluate.vocab_seed = repro_opts.hide.vocab_seed;
      repro_opts.base.vocab_seed = repro_opts.hide.vocab_seed;
      repro_opts.base.jobs = repro_opts.evaluate.eval.jobs;
      pipeline::write_config_snapshot(out, snapshot);
      pipeline::repro(repro_opts, out);
    }
  } catch (const UsageError& e) {
    return usage_exit(e.what());
  } catch (const ConfigError& e) {
    return usage_exit(e.what());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kpop/attribution.hpp"
#include "kpop/diffusion_model.hpp"
#include "kpop/evaluation.hpp"
#include "kpop/kpop_trainer.hpp"
#include "kpop/synthetic_data.hpp"

// Stage runners behind the command-line tool. Each writes its artifacts
// into an output directory and returns what the next stage needs.
namespace kpop::pipeline {

namespace fs = std::filesystem;

// Progress lines go to std::clog.
void log_line(const std::string& line);

/// Phrase a class is prompted with: its token, or the empty phrase.
text::Phrase class_phrase(const data::ConceptClass& cls);
std::vector<std::string> standard_ids();

struct DataOptions {
  int per_class = 500;
  std::uint64_t seed = 11;
};
data::LabeledImages make_data(const DataOptions& options, const fs::path& out_file);

/// Trains, checks the gates and writes `out_file` plus oracle_report.txt.
data::OracleClassifier train_oracle(const data::OracleConfig& config, const fs::path& out_file);

struct BaseOptions {
  diffusion::Architecture arch;
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  diffusion::TrainConfig train;
  std::uint64_t init_seed = 3;
  std::uint64_t vocab_seed = 7;
  // sample-accuracy gate on the standard classes
  double gate = 0.90;
  int gate_n = 32;
  int gate_sampler_steps = 50;
  std::uint64_t gate_seed = 99;
  int jobs = 1;
};

struct BaseResult {
  diffusion::Denoiser model;
  std::vector<std::pair<std::string, double>> class_accuracy;
  double mean_accuracy = 0.0;
};

/// foundation.kpd, train_log.csv, train_loss.ppm, gate.txt, samples.pgm.
/// StateError when the gate is missed (the checkpoint is still written).
BaseResult train_base(const BaseOptions& options, const data::LabeledImages& dataset,
                      const data::OracleClassifier& oracle, const fs::path& out_dir);

struct HideOptions {
  trainer::KpopConfig kpop;
  std::vector<std::string> erase{"cross", "ring"};
  std::uint64_t vocab_seed = 7;
};

/// sanitized.kpd, keys/<concept>.key, losses.csv, losses.ppm,
/// prompt_snapshots.kpa, alignment_<concept>.csv/.ppm, kpop_config.txt.
trainer::KpopResult hide(const HideOptions& options, const diffusion::Denoiser& theta, const fs::path& out_dir);

struct EvaluateOptions {
  eval::EvalOptions eval;
  std::vector<std::string> erase{"cross", "ring"};
  std::uint64_t vocab_seed = 7;
};

/// report.txt / report.csv, plus samples_<concept>.pgm grids.
eval::MetricsReport evaluate(const EvaluateOptions& options, const diffusion::Denoiser& model,
                             std::span<const trainer::PromptKey> keys, const data::OracleClassifier& oracle,
                             const fs::path& out_dir);

/// Held-out noise-prediction gaps for each key, written to gap.csv.
std::vector<trainer::GapReport> key_gaps(const diffusion::Denoiser& theta_prime, const diffusion::Denoiser& theta,
                                         std::span<const trainer::PromptKey> keys, std::uint64_t vocab_seed,
                                         int draws, std::uint64_t seed, const fs::path& out_dir);

struct AblateOptions {
  std::string parameter;  // lambda, k, sites, mechanism, split
  std::vector<std::string> values;
  HideOptions hide;
  EvaluateOptions evaluate;
};

/// One hide + evaluate per grid value in cell_<value>/, then table.csv,
/// table.txt and trend.ppm. An empty grid is a UsageError.
eval::TrendTable ablate(const AblateOptions& options, const diffusion::Denoiser& theta,
                        const data::OracleClassifier& oracle, const fs::path& out_dir);

struct AttributeOptions {
  text::Phrase phrase{"cross"};
  std::vector<int> tokens{0};
  std::string layer = "mid";
  int sampler_steps = 50;
  std::uint64_t seed = 0;
  int seeds = 1;  // seed, seed + 1, ...
  std::uint64_t vocab_seed = 7;
};

/// Maps for every seed under seed_<s>/ and entropy.csv over all of them.
std::vector<attrib::AttributionMap> attribute(const AttributeOptions& options, const diffusion::Denoiser& model,
                                              const trainer::PromptKey* key, const fs::path& out_dir,
                                              const std::string& stem);

struct ReproOptions {
  DataOptions data;
  data::OracleConfig oracle;
  BaseOptions base;
  HideOptions hide;
  EvaluateOptions evaluate;
  int gap_draws = 64;
  std::uint64_t gap_seed = 5;
};

/// data/ oracle/ base/ hide/ eval_foundation/ eval_sanitized/ under out_dir.
void repro(const ReproOptions& options, const fs::path& out_dir);

void write_config_snapshot(const fs::path& dir, const std::string& text);

}  // namespace kpop::pipeline

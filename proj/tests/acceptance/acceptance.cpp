// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
//   acceptance --kpop <path to kpop> --work <scratch dir> [--reuse]

#include <sys/resource.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "../support/grad_check.hpp"
#include "../support/naive_attention.hpp"
#include "kpop/archive.hpp"
#include "kpop/attribution.hpp"
#include "kpop/error.hpp"
#include "kpop/evaluation.hpp"
#include "kpop/kpop_trainer.hpp"
#include "kpop/ops.hpp"
#include "kpop/pipeline.hpp"

using namespace kpop;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kLayerConcatRel = 1e-9;
constexpr double kPredictConcatRel = 1e-7;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradPassFraction = 0.99;
constexpr double kRowSumTol = 1e-9;
constexpr double kAlgebraTol = 1e-12;
constexpr double kPgdTol = 1e-10;
constexpr double kOracleGate = 0.95;
constexpr double kFoundationGate = 0.90;
constexpr double kEsrMin = 90.0;
constexpr double kPsrSlack = 15.0;
constexpr double kRsrSlack = 15.0;
constexpr double kCpuMinutes = 45.0;
constexpr double kTrendSlack = 2.0;
constexpr double kPromptSizeSlack = 1.0;
constexpr double kNerFactor = 2.0;
constexpr double kSpecificitySlack = 5.0;
constexpr double kGapRatio = 5.0;
constexpr double kAttribRowSumTol = 1e-6;
constexpr double kEntropySeedFraction = 0.70;
constexpr int kEntropySeeds = 10;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double max_abs(const Tensor& t) {
  double m = 0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

double child_cpu_seconds() {
  rusage ru{};
  getrusage(RUSAGE_CHILDREN, &ru);
  return static_cast<double>(ru.ru_utime.tv_sec + ru.ru_stime.tv_sec) +
         static_cast<double>(ru.ru_utime.tv_usec + ru.ru_stime.tv_usec) * 1e-6;
}

int run(const std::string& cmd, const fs::path& log) {
  const std::string full = cmd + " >" + log.string() + " 2>&1";
  const int rc = std::system(full.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// "scope,concept,role,metric,k,value,std,n" rows keyed by scope|concept|metric|k.
std::map<std::string, double> read_report(const fs::path& csv) {
  std::map<std::string, double> out;
  std::istringstream in(io::read_text_file(csv));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() < 6) continue;
    out[f[0] + "|" + f[1] + "|" + f[3] + "|" + f[4]] = std::stod(f[5]);
  }
  return out;
}

double lookup(const std::map<std::string, double>& r, const std::string& key) {
  const auto it = r.find(key);
  if (it == r.end()) throw IoError("report has no entry " + key);
  return it->second;
}

double read_keyed_number(const fs::path& path, const std::string& key) {
  std::istringstream in(io::read_text_file(path));
  std::string k;
  std::string v;
  while (in >> k) {
    if (k == key && in >> v) return std::stod(v);
  }
  throw IoError(path.string() + " has no '" + key + "'");
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

// 1. attention identities
Outcome attention_identities() {
  Outcome o;
  Rng rng(101);
  const auto layer = attn::CrossAttentionLayer::create(32, 64, 32, 4, attn::Site::mid, rng);
  const auto z = Tensor::randn({2, 16, 32}, rng);
  const auto c = Tensor::randn({1, 8, 64}, rng);
  const auto base = attn::attend_original(z, c, layer).out;
  const attn::Prompt zero{Tensor::zeros({1, 8, 64}), 1, attn::Mechanism::additive};
  o.check(bitwise_equal(attn::attend_additive(z, c, zero, layer).out, base), "layer: additive p = 0 is exact");
  const attn::Prompt copy{c.clone(), 1, attn::Mechanism::concat};
  const double rel = max_abs_diff(attn::attend_concat(z, c, copy, layer).out, base) / max_abs(base);
  o.check(rel <= kLayerConcatRel, "layer: concat C-copy relative error " + fmt(rel) + " <= 1e-9");

  const auto model = diffusion::Denoiser::create(diffusion::Architecture{}, diffusion::NoiseSchedule::linear(), 3);
  const auto& a = model.arch();
  const auto zz = Tensor::randn({2, 1, a.image_size, a.image_size}, rng);
  const auto cc = Tensor::randn({1, a.seq_len, a.text_width}, rng);
  const int ts[] = {5, 80};
  const auto sites = attn::SiteSet::all();
  const auto out = model.predict_noise(zz, cc, ts);
  const attn::Prompt z2{Tensor::zeros({1, a.seq_len, a.text_width}), 1, attn::Mechanism::additive};
  o.check(bitwise_equal(model.predict_noise(zz, cc, ts, &z2, sites), out), "predict_noise: additive p = 0 is exact");
  const attn::Prompt c2{cc.clone(), 1, attn::Mechanism::concat};
  const double rel2 = max_abs_diff(model.predict_noise(zz, cc, ts, &c2, sites), out) / std::max(1.0, max_abs(out));
  o.check(rel2 <= kPredictConcatRel, "predict_noise: concat C-copy error " + fmt(rel2) + " <= 1e-7");
  return o;
}

// 2. finite-difference gradient checks
Outcome autodiff_soundness() {
  Outcome o;
  {
    Rng rng(17);
    const auto x = Tensor::randn({5, 4}, rng);
    const auto target = Tensor::randn({5, 3}, rng);
    std::vector<Tensor> params = {Tensor::randn({4, 8}, rng, 0.5, true), Tensor::randn({8}, rng, 0.1, true),
                                  Tensor::randn({8, 6}, rng, 0.5, true), Tensor::randn({6}, rng, 0.1, true),
                                  Tensor::randn({6, 3}, rng, 0.5, true), Tensor::randn({3}, rng, 0.1, true)};
    auto forward = [&] {
      auto h = nn::silu(nn::linear(x, params[0], params[1]));
      h = nn::silu(nn::linear(h, params[2], params[3]));
      return nn::mse(nn::linear(h, params[4], params[5]), target);
    };
    {
      nn::Tape tape;
      tape.backward(forward());
    }
    const auto r = testing::finite_difference_check([&] { return forward().item(); }, params, 1e-5, kGradRelTol);
    o.check(r.pass_fraction() >= kGradPassFraction,
            "random MLP: " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + " coordinates");
  }
  {
    auto m = diffusion::Denoiser::create(tiny_arch(), diffusion::NoiseSchedule::linear(20, 0.01, 0.5), 5);
    const auto& a = m.arch();
    Rng rng(6);
    const auto z = Tensor::randn({2, 1, 8, 8}, rng);
    const auto c = Tensor::randn({1, a.seq_len, a.text_width}, rng);
    const auto target = Tensor::randn({2, 1, 8, 8}, rng);
    attn::Prompt p{Tensor::randn({1, 2 * a.seq_len, a.text_width}, rng, 1.0, true), 2, attn::Mechanism::concat};
    const int ts[] = {4, 12};
    m.set_requires_grad(true);
    auto loss = [&] { return nn::mse(m.predict_noise(z, c, ts, &p), target); };
    {
      nn::Tape tape;
      tape.backward(loss());
    }
    std::vector<Tensor> checked{p.values, m.param("mid.attn.wk"), m.param("d1.conv.w"), m.param("u1.attn.wv"),
                                m.param("time.l1.w"), m.param("out.conv.b")};
    const auto r = testing::finite_difference_check([&] { return loss().item(); }, checked, 1e-5, kGradRelTol, 16, 9);
    o.check(r.pass_fraction() >= kGradPassFraction,
            "random U-Net: " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + " coordinates");
  }
  {
    const auto theta = diffusion::Denoiser::create(tiny_arch(), diffusion::NoiseSchedule::linear(20, 0.01, 0.5), 8);
    auto theta_prime = theta.clone();
    Rng rng(9);
    for (const auto& entry : theta_prime.named_parameters()) {
      nn::Tensor t = entry.second;
      for (auto& v : t.mutable_data()) v += 0.02 * rng.normal();
    }
    theta_prime.set_requires_grad(false);
    const auto& a = theta.arch();
    trainer::KpopConfig cfg;
    cfg.k_factor = 2;
    cfg.batch = 2;
    const trainer::ConceptTexts ct{"cross", Tensor::randn({1, a.seq_len, a.text_width}, rng)};
    attn::Prompt p{Tensor::randn({1, 2 * a.seq_len, a.text_width}, rng, 1.0, true), 2, attn::Mechanism::concat};
    const trainer::ConceptImageSource source = [](const std::string&, int n, Rng& r) {
      return Tensor::randn({n, 1, 8, 8}, r, 0.5);
    };
    const auto objective = trainer::diffusion_recovery_objective(theta_prime, theta, ct, p, cfg, source);
    auto loss = [&] {
      Rng r(123);
      return objective(r);
    };
    {
      nn::Tape tape;
      tape.backward(loss());
    }
    const auto r = testing::finite_difference_check([&] { return loss().item(); }, {p.values}, 1e-5, kGradRelTol);
    o.check(r.pass_fraction() >= kGradPassFraction,
            "recovery loss w.r.t. prompt: " + std::to_string(r.passed) + "/" + std::to_string(r.checked) +
                " coordinates, max rel " + fmt(r.max_rel_error));
  }
  return o;
}

// 3. attention algebra
Outcome attention_algebra() {
  Outcome o;
  Rng rng(33);
  const auto layer = attn::CrossAttentionLayer::create(6, 5, 8, 2, attn::Site::mid, rng);
  const auto z = Tensor::randn({3, 4, 6}, rng);
  const auto c = Tensor::randn({1, 3, 5}, rng);
  const attn::Prompt p{Tensor::randn({1, 6, 5}, rng), 2, attn::Mechanism::concat};
  const auto res = attn::attend_concat(z, c, p, layer, true);
  const auto& s = res.trace->scores;
  const auto keys = static_cast<std::size_t>(s.dim(3));
  double worst = 0;
  for (std::size_t r = 0; r < s.numel() / keys; ++r) {
    double sum = 0;
    for (std::size_t j = 0; j < keys; ++j) sum += s.data()[r * keys + j];
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  o.check(worst <= kRowSumTol, "rows sum to one, worst " + fmt(worst));

  const auto cat = nn::concat({nn::reshape(c, {3, 5}), nn::reshape(p.values, {6, 5})}, 0);
  const auto k_joint = nn::matmul(cat, layer.w_k());
  const auto k_split = nn::concat({nn::matmul(nn::reshape(c, {3, 5}), layer.w_k()),
                                   nn::matmul(nn::reshape(p.values, {6, 5}), layer.w_k())},
                                  0);
  const double dk = max_abs_diff(k_joint, k_split);
  o.check(dk <= kAlgebraTol, "K = [C Wk; P Wk] recombination, max diff " + fmt(dk));

  const auto ref = testing::naive_attention(z, c, layer);
  const auto got = attn::attend_original(z, c, layer).out;
  double dn = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) dn = std::max(dn, std::abs(ref[i] - got.data()[i]));
  o.check(dn <= kAlgebraTol, "dense loop oracle, max diff " + fmt(dn));
  const auto ref_cat = testing::naive_attention(z, nn::reshape(cat, {1, 9, 5}), layer);
  double dc = 0;
  for (std::size_t i = 0; i < ref_cat.size(); ++i) dc = std::max(dc, std::abs(ref_cat[i] - res.out.data()[i]));
  o.check(dc <= kAlgebraTol, "concat against dense oracle on [C; P], max diff " + fmt(dc));
  return o;
}

// 4. projected gradient descent against a scripted oracle
Outcome projected_descent() {
  Outcome o;
  const auto A = Tensor::from_data({2, 2}, {3, 1, 1, 2});
  const auto target = Tensor::from_data({1, 2}, {2, -1});
  attn::Prompt p{Tensor::from_data({1, 1, 2}, {0.1, 0.2}, true), 1, attn::Mechanism::concat};
  const trainer::RecoveryObjective objective = [&](Rng&) {
    auto d = nn::sub(nn::reshape(p.values, {1, 2}), target);
    return nn::scale(nn::sum(nn::mul(nn::matmul(d, A), d)), 0.5);
  };
  const auto anchor = Tensor::zeros({1, 1, 2});
  const double lr = 0.1, rho = 1.5;
  auto opt = trainer::PromptOptimizerState::create(trainer::PromptOptimizer::sgd, p.values, anchor, lr, rho);
  Rng rng(1);
  double x = 0.1, y = 0.2, worst = 0, worst_dist = 0;
  for (int s = 0; s < 25; ++s) {
    trainer::recovery_stage(objective, p, opt, 1, rng);
    const double gx = 3 * (x - 2) + (y + 1), gy = (x - 2) + 2 * (y + 1);
    x -= lr * gx;
    y -= lr * gy;
    const double n = std::hypot(x, y);
    if (n > rho) {
      x *= rho / n;
      y *= rho / n;
    }
    worst = std::max({worst, std::abs(p.values.data()[0] - x), std::abs(p.values.data()[1] - y)});
    worst_dist = std::max(worst_dist, trainer::distance(p.values, anchor));
  }
  o.check(worst <= kPgdTol, "trajectory matches scripted PGD, max diff " + fmt(worst));
  o.check(worst_dist <= rho + 1e-12, "feasible after every step, max distance " + fmt(worst_dist, 10));
  return o;
}

struct Workspace {
  fs::path kpop;
  fs::path work;
  bool reuse = false;
  double repro_cpu_minutes = 0;
  std::string repro_error;
};

bool done(const Workspace& w, const fs::path& marker) { return w.reuse && fs::exists(marker); }

// Both repro runs write to the same relative path from their own working
// directory, so the resolved configs they record are comparable too.
fs::path run_dir(const Workspace& w, const std::string& name) { return w.work / name / "run"; }

bool repro(Workspace& w, const std::string& name, double* cpu_minutes) {
  const auto dir = run_dir(w, name);
  if (done(w, dir / "eval_sanitized" / "gap.csv")) return true;
  fs::remove_all(w.work / name);
  fs::create_directories(w.work / name);
  const double before = child_cpu_seconds();
  const int rc = run("cd " + (w.work / name).string() + " && " + fs::absolute(w.kpop).string() +
                         " repro --seed 7 --out run",
                     w.work / (name + ".log"));
  if (cpu_minutes) *cpu_minutes = (child_cpu_seconds() - before) / 60.0;
  if (rc != 0 && w.repro_error.empty()) w.repro_error = "kpop repro exited " + std::to_string(rc) + " (see " + name + ".log)";
  return rc == 0;
}

bool ablate(const Workspace& w, const std::string& param, const std::string& values) {
  const auto dir = w.work / ("ablate_" + param);
  if (done(w, dir / "table.csv")) return true;
  fs::remove_all(dir);
  const auto a = run_dir(w, "A");
  const int rc = run(w.kpop.string() + " ablate --checkpoint " + (a / "base" / "foundation.kpd").string() +
                         " --oracle " + (a / "oracle" / "oracle.kpa").string() + " --param " + param + " --values " +
                         values + " --seed 7 --out " + dir.string(),
                     w.work / ("ablate_" + param + ".log"));
  return rc == 0;
}

// 5. end-to-end hide / recover
Outcome end_to_end(const Workspace& w) {
  Outcome o;
  const auto a = run_dir(w, "A");
  const double oracle_acc = read_keyed_number(a / "oracle" / "oracle_report.txt", "validation_accuracy");
  const double foundation_acc = read_keyed_number(a / "base" / "gate.txt", "mean");
  o.check(oracle_acc >= kOracleGate, "oracle validation accuracy " + fmt(oracle_acc) + " >= 0.95");
  o.check(foundation_acc >= kFoundationGate, "foundation sample accuracy " + fmt(foundation_acc) + " >= 0.90");
  const auto f = read_report(a / "eval_foundation" / "report.csv");
  const auto s = read_report(a / "eval_sanitized" / "report.csv");
  const double esr = lookup(s, "aggregate||ESR|1");
  o.check(esr >= kEsrMin, "ESR-1 " + fmt(esr) + " >= 90");
  const double psr = lookup(s, "aggregate||PSR|1"), psr0 = lookup(f, "aggregate||PSR|1");
  o.check(psr >= psr0 - kPsrSlack, "PSR-1 " + fmt(psr) + " >= foundation " + fmt(psr0) + " - 15");
  for (const auto& id : {std::string("cross"), std::string("ring")}) {
    const double base = 100.0 - lookup(f, "class|" + id + "|ESR|1");
    const double rsr = lookup(s, "class|" + id + "|RSR|1");
    o.check(rsr >= base - kRsrSlack, "RSR-1 " + id + " " + fmt(rsr) + " >= foundation " + fmt(base) + " - 15");
  }
  o.check(w.repro_cpu_minutes <= kCpuMinutes,
          "repro CPU time " + fmt(w.repro_cpu_minutes, 3) + " min <= 45" + (w.reuse ? " (reused run)" : ""));
  return o;
}

std::map<std::string, std::map<std::string, double>> cell_reports(const fs::path& dir, const std::string& param,
                                                                   const std::vector<std::string>& values) {
  std::map<std::string, std::map<std::string, double>> out;
  for (const auto& v : values) out[v] = read_report(dir / ("cell_" + param + "_" + v) / "eval" / "report.csv");
  return out;
}

// 6. lambda trend
Outcome lambda_trend(const Workspace& w) {
  Outcome o;
  const std::vector<std::string> values{"0.01", "0.1", "1.0"};
  const auto cells = cell_reports(w.work / "ablate_lambda", "lambda", values);
  std::vector<double> esr, psr;
  std::string line;
  for (const auto& v : values) {
    esr.push_back(lookup(cells.at(v), "aggregate||ESR|5"));
    psr.push_back(lookup(cells.at(v), "aggregate||PSR|5"));
    line += " lambda=" + v + ": ESR-5 " + fmt(esr.back()) + " PSR-5 " + fmt(psr.back()) + ";";
  }
  o.notes.push_back("     " + line);
  o.check(eval::monotone_with_slack(esr, true, kTrendSlack, 1), "ESR-5 non-increasing in lambda (one 2-point slip)");
  o.check(eval::monotone_with_slack(psr, false, kTrendSlack, 1), "PSR-5 non-decreasing in lambda (one 2-point slip)");
  const auto table = io::read_text_file(w.work / "ablate_lambda" / "table.csv");
  bool consistent = true;
  for (const auto& v : values) {
    char row[96];
    std::snprintf(row, sizeof row, "%s,ESR,5,%.4f", v.c_str(), lookup(cells.at(v), "aggregate||ESR|5"));
    consistent = consistent && table.find(row) != std::string::npos;
  }
  o.check(consistent, "merged table matches the cell reports");
  return o;
}

// 7. prompt size trend
Outcome prompt_size_trend(const Workspace& w) {
  Outcome o;
  const std::vector<std::string> values{"1", "100", "200"};
  const auto cells = cell_reports(w.work / "ablate_k", "k", values);
  const double e1 = lookup(cells.at("1"), "aggregate||ESR|1"), e100 = lookup(cells.at("100"), "aggregate||ESR|1");
  const double p1 = lookup(cells.at("1"), "aggregate||PSR|1"), p200 = lookup(cells.at("200"), "aggregate||PSR|1");
  o.check(e100 >= e1 - kPromptSizeSlack, "ESR-1(k=100) " + fmt(e100) + " >= ESR-1(k=1) " + fmt(e1) + " - 1");
  o.check(p200 <= p1 + kPromptSizeSlack, "PSR-1(k=200) " + fmt(p200) + " <= PSR-1(k=1) " + fmt(p1) + " + 1");
  return o;
}

// 8. NER
Outcome ner_behaviour(const Workspace& w) {
  Outcome o;
  const std::vector<std::string> taus{"0.30", "0.50", "0.70", "0.80"};
  std::map<std::string, double> at05;
  for (const auto& which : {std::string("eval_foundation"), std::string("eval_sanitized")}) {
    const auto r = read_report(run_dir(w, "A") / which / "report.csv");
    std::vector<double> v;
    std::string line;
    for (const auto& t : taus) {
      v.push_back(lookup(r, "aggregate|cross|NER@" + t + "|"));
      line += " " + fmt(v.back());
    }
    at05[which] = v[1];
    o.check(eval::monotone_with_slack(v, true, 0.0, 0), which + " NER monotone:" + line);
  }
  for (const auto& which : {std::string("ablate_lambda"), std::string("ablate_k")}) {
    for (const auto& e : fs::directory_iterator(w.work / which)) {
      if (!e.is_directory()) continue;
      const auto r = read_report(e.path() / "eval" / "report.csv");
      std::vector<double> v;
      for (const auto& t : taus) v.push_back(lookup(r, "aggregate|cross|NER@" + t + "|"));
      o.check(eval::monotone_with_slack(v, true, 0.0, 0), e.path().filename().string() + " NER monotone");
    }
  }
  o.check(at05["eval_sanitized"] * kNerFactor < at05["eval_foundation"],
          "sanitized NER(0.5) " + fmt(at05["eval_sanitized"]) + " x2 < foundation " + fmt(at05["eval_foundation"]));
  return o;
}

// 9. key semantics
Outcome key_semantics(const Workspace& w) {
  Outcome o;
  const auto a = run_dir(w, "A");
  const auto theta = diffusion::Denoiser::load(a / "base" / "foundation.kpd");
  const auto prime = diffusion::Denoiser::load(a / "hide" / "sanitized.kpd");
  bool refused = false;
  std::string msg;
  try {
    trainer::PromptKey::load_for(a / "hide" / "keys" / "cross.key", theta);
  } catch (const FingerprintError& e) {
    refused = true;
    msg = e.what();
  }
  o.check(refused && msg.find(theta.content_hash()) != std::string::npos &&
              msg.find(prime.content_hash()) != std::string::npos,
          "key for the sanitized model refused on the foundation model, both fingerprints named");
  const auto log = w.work / "wrong_key.log";
  const int rc = run(w.kpop.string() + " generate --checkpoint " + (a / "base" / "foundation.kpd").string() +
                         " --key " + (a / "hide" / "keys" / "cross.key").string() + " --concept cross --n 1 --out " +
                         (w.work / "wrong_key").string(),
                     log);
  o.check(rc == 3 && io::read_text_file(log).find(theta.content_hash()) != std::string::npos,
          "kpop generate with a wrong-checkpoint key exits 3 (got " + std::to_string(rc) + ")");

  const auto oracle = data::OracleClassifier::load(a / "oracle" / "oracle.kpa");
  const auto vocab = text::Vocabulary::standard(7);
  const std::vector<std::string> erase{"cross", "ring"};
  const auto registry = data::standard_registry(erase, 7);
  std::map<std::string, trainer::PromptKey> keys;
  for (const auto& id : erase) keys[id] = trainer::PromptKey::load_for(a / "hide" / "keys" / (id + ".key"), prime);
  eval::EvalOptions eo;
  for (const auto& [id, other] : std::map<std::string, std::string>{{"cross", "ring"}, {"ring", "cross"}}) {
    const double none = eval::detection_with_key(prime, nullptr, vocab, registry, id, oracle, 1, eo);
    const double wrong = eval::detection_with_key(prime, &keys.at(other), vocab, registry, id, oracle, 1, eo);
    const double right = eval::detection_with_key(prime, &keys.at(id), vocab, registry, id, oracle, 1, eo);
    o.check(wrong <= none + kSpecificitySlack, id + " with the " + other + " key " + fmt(wrong) + "% <= no key " +
                                                   fmt(none) + "% + 5 (own key " + fmt(right) + "%)");
  }
  std::istringstream gaps(io::read_text_file(a / "eval_sanitized" / "gap.csv"));
  std::string line;
  std::getline(gaps, line);
  int rows = 0;
  while (std::getline(gaps, line)) {
    const auto last = line.rfind(',');
    const double ratio = std::stod(line.substr(last + 1));
    o.check(ratio >= kGapRatio, "gap ratio " + line.substr(0, line.find(',')) + " " + fmt(ratio) + " >= 5");
    ++rows;
  }
  o.check(rows == 2, "gap reported for both keys");
  return o;
}

// 10. determinism
Outcome determinism(const Workspace& w) {
  Outcome o;
  const auto a = run_dir(w, "A"), b = run_dir(w, "B");
  std::size_t files = 0, same = 0;
  std::vector<std::string> differing;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    ++files;
    if (fs::exists(b / rel) && io::read_text_file(e.path()) == io::read_text_file(b / rel)) {
      ++same;
    } else {
      differing.push_back(rel.string());
    }
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) files_b += e.is_regular_file();
  for (const auto* rel : {"base/foundation.kpd", "hide/sanitized.kpd", "hide/keys/cross.key", "hide/keys/ring.key",
                          "eval_sanitized/report.csv", "eval_sanitized/report.txt", "eval_foundation/report.csv"}) {
    o.check(fs::exists(a / rel), std::string("artifact present: ") + rel);
  }
  std::string diff;
  for (std::size_t i = 0; i < std::min<std::size_t>(differing.size(), 5); ++i) diff += " " + differing[i];
  o.check(same == files && files == files_b,
          std::to_string(same) + "/" + std::to_string(files) + " files byte-identical across two runs" + diff);
  return o;
}

// 11. attribution
Outcome attribution(const Workspace& w) {
  Outcome o;
  const auto a = run_dir(w, "A");
  const auto theta = diffusion::Denoiser::load(a / "base" / "foundation.kpd");
  const auto prime = diffusion::Denoiser::load(a / "hide" / "sanitized.kpd");
  const auto vocab = text::Vocabulary::standard(7);
  const std::vector<int> all_tokens{0, 1, 2, 3, 4, 5, 6, 7};
  attrib::AttributeOptions ao;
  ao.sampler_steps = 50;
  int higher = 0;
  double worst = 0;
  std::string line;
  for (int s = 1; s <= kEntropySeeds; ++s) {
    ao.seed = static_cast<std::uint64_t>(s);
    const auto m0 = attrib::attribute(theta, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), all_tokens, ao);
    const auto m1 = attrib::attribute(prime, {"cross"}, vocab, nullptr, attn::SiteSet::mid_only(), all_tokens, ao);
    for (const auto* maps : {&m0, &m1}) {
      worst = std::max(worst, (*maps)[0].max_row_sum_error);
      for (std::size_t h = 0; h < (*maps)[0].raw_heads.size(); ++h) {
        for (std::size_t p = 0; p < (*maps)[0].raw_heads[h].size(); ++p) {
          double sum = 0;
          for (const auto& m : *maps) sum += m.raw_heads[h][p];
          worst = std::max(worst, std::abs(sum - 1.0));
        }
      }
    }
    higher += m1[0].entropy > m0[0].entropy;
    line += " " + fmt(m0[0].entropy) + "->" + fmt(m1[0].entropy);
  }
  o.check(worst <= kAttribRowSumTol, "token attributions sum to one per position/head/step, worst " + fmt(worst));
  const double frac = static_cast<double>(higher) / kEntropySeeds;
  o.notes.push_back("     entropy theta->theta' per seed:" + line);
  o.check(frac >= kEntropySeedFraction,
          "erased-token entropy higher on the sanitized model for " + std::to_string(higher) + "/" +
              std::to_string(kEntropySeeds) + " seeds (>= 70%)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  Workspace w;
  app.add_option("--kpop", w.kpop, "kpop executable")->required()->check(CLI::ExistingFile);
  app.add_option("--work", w.work, "scratch directory")->required();
  app.add_flag("--reuse", w.reuse, "keep finished stages from an earlier run");
  CLI11_PARSE(app, argc, argv);
  w.work = fs::absolute(w.work);
  fs::create_directories(w.work);
  const auto t0 = std::chrono::steady_clock::now();

  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> fn;
  };
  bool have_a = false, have_b = false, have_lambda = false, have_k = false;
  auto needs = [](bool ok, const std::string& what, const std::function<Outcome()>& fn) {
    return [ok, what, fn] {
      if (!ok) {
        Outcome o;
        o.check(false, what + " did not complete");
        return o;
      }
      return fn();
    };
  };

  std::vector<Criterion> criteria{
      {1, "attention identities", attention_identities},
      {2, "autodiff soundness", autodiff_soundness},
      {3, "attention algebra", attention_algebra},
      {4, "projected descent", projected_descent},
  };
  auto run_criterion = [](const Criterion& c) {
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o.check(false, std::string("threw: ") + e.what());
    }
    std::printf("%s %2d %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str());
    for (const auto& n : o.notes) std::printf("        %s\n", n.c_str());
    std::fflush(stdout);
    return o.pass;
  };
  bool all = true;
  for (const auto& c : criteria) all = run_criterion(c) && all;

  have_a = repro(w, "A", &w.repro_cpu_minutes);
  have_b = repro(w, "B", nullptr);
  if (have_a) {
    have_lambda = ablate(w, "lambda", "0.01,0.1,1.0");
    have_k = ablate(w, "k", "1,100,200");
  }
  const std::string why = w.repro_error.empty() ? "kpop repro" : w.repro_error;
  std::vector<Criterion> late{
      {5, "end-to-end hide/recover", needs(have_a, why, [&] { return end_to_end(w); })},
      {6, "lambda trend", needs(have_lambda, "lambda ablation", [&] { return lambda_trend(w); })},
      {7, "prompt-size trend", needs(have_k, "k ablation", [&] { return prompt_size_trend(w); })},
      {8, "NER behaviour", needs(have_a && have_lambda && have_k, "runs", [&] { return ner_behaviour(w); })},
      {9, "key semantics", needs(have_a, why, [&] { return key_semantics(w); })},
      {10, "determinism", needs(have_a && have_b, why, [&] { return determinism(w); })},
      {11, "attribution", needs(have_a, why, [&] { return attribution(w); })},
  };
  for (const auto& c : late) all = run_criterion(c) && all;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s all criteria (%.1f min wall)\n", all ? "PASS" : "FAIL", wall / 60.0);
  return all ? 0 : 1;
}

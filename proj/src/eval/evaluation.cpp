#include "kpop/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::eval {

using nn::Tensor;

namespace {

std::string fmt(double v, int digits = 2) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::size_t k_position(const std::vector<int>& k_list, int k) {
  const auto it = std::find(k_list.begin(), k_list.end(), k);
  if (it == k_list.end()) throw UsageError("k = " + std::to_string(k) + " was not evaluated");
  return static_cast<std::size_t>(it - k_list.begin());
}

Tensor concat_rows(std::vector<Tensor>& parts) {
  if (parts.size() == 1) return parts[0];
  return nn::concat(std::span<const Tensor>(parts), 0);
}

const trainer::PromptKey* key_for(std::span<const trainer::PromptKey> keys, const std::string& id) {
  for (const auto& k : keys) {
    if (k.concept_id == id) return &k;
  }
  return nullptr;
}

std::vector<int> count_detections(const std::vector<data::TopK>& top, const std::string& id,
                                  const std::vector<int>& k_list) {
  std::vector<int> out(k_list.size(), 0);
  for (const auto& t : top) {
    for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
      const auto lim = std::min<std::size_t>(static_cast<std::size_t>(k_list[ki]), t.entries.size());
      for (std::size_t j = 0; j < lim; ++j) {
        if (t.entries[j].first == id) {
          ++out[ki];
          break;
        }
      }
    }
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

Tensor generate(const diffusion::Denoiser& model, const Tensor& c, int n, std::uint64_t seed,
                const diffusion::SampleOptions& options, int jobs) {
  if (n < 1) throw UsageError("generate needs n >= 1");
  const int chunk = std::max(1, options.chunk);
  const int chunks = (n + chunk - 1) / chunk;
  jobs = std::clamp(jobs, 1, chunks);
  if (jobs == 1 || options.sink) return diffusion::sample(model, c, n, seed, options);
  std::vector<Tensor> parts(static_cast<std::size_t>(jobs));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
  std::vector<std::thread> workers;
  for (int j = 0; j < jobs; ++j) {
    const int first = (chunks * j / jobs) * chunk;
    const int last = std::min(n, (chunks * (j + 1) / jobs) * chunk);
    workers.emplace_back([&, j, first, last] {
      try {
        parts[static_cast<std::size_t>(j)] = diffusion::sample_range(model, c, first, last - first, seed, options);
      } catch (...) {
        errors[static_cast<std::size_t>(j)] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return concat_rows(parts);
}

std::uint64_t concept_seed(std::uint64_t seed, std::string_view concept_id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : concept_id) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return diffusion::derive_seed(seed, h);
}

void EvalOptions::validate() const {
  if (n < 1) throw ConfigError("n must be >= 1");
  if (k_list.empty()) throw ConfigError("at least one k is required");
  for (int k : k_list) {
    if (k < 1) throw ConfigError("k must be >= 1");
  }
  if (!ner_concept.empty() && thresholds.empty()) throw ConfigError("the NER sweep needs at least one threshold");
  if (sampler_steps < 0) throw ConfigError("sampler steps must be >= 0");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

std::string EvalOptions::fingerprint() const {
  std::ostringstream os;
  os << "n=" << n << ";k=";
  for (std::size_t i = 0; i < k_list.size(); ++i) os << (i ? "," : "") << k_list[i];
  os << ";tau=";
  for (std::size_t i = 0; i < thresholds.size(); ++i) os << (i ? "," : "") << thresholds[i];
  os << ";ner=" << ner_concept << ";steps=" << sampler_steps << ";seed=" << seed;
  return io::sha256_hex(os.str()).substr(0, 16);
}

double ClassMetrics::detection_rate(std::size_t ki) const { return 100.0 * detected.at(ki) / n; }

std::optional<double> ClassMetrics::key_detection_rate(std::size_t ki) const {
  if (!detected_with_key) return std::nullopt;
  return 100.0 * detected_with_key->at(ki) / n;
}

double MetricsReport::esr_at(int k) const { return esr.at(k_position(k_list, k)); }
double MetricsReport::psr_at(int k) const { return psr.at(k_position(k_list, k)); }

std::optional<double> MetricsReport::rsr_at(int k) const {
  if (!rsr) return std::nullopt;
  return rsr->at(k_position(k_list, k));
}

std::optional<double> MetricsReport::ner_at(double threshold) const {
  for (const auto& [t, r] : ner) {
    if (std::abs(t - threshold) < 1e-12) return r;
  }
  return std::nullopt;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "model " << model_fingerprint.substr(0, 16) << " (" << model_role << "), eval " << config_fingerprint
     << ", runs " << runs << "\n\n";
  os << "class        role      n  ";
  for (int k : k_list) os << "  top" << k << "%   key" << k << "%";
  os << '\n';
  for (const auto& c : classes) {
    char head[64];
    std::snprintf(head, sizeof head, "%-12s %-8s %3d  ", c.concept_id.c_str(), std::string(text::role_name(c.role)).c_str(), c.n);
    os << head;
    for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
      char cell[48];
      const auto kr = c.key_detection_rate(ki);
      std::snprintf(cell, sizeof cell, "  %6s  %6s", fmt(c.detection_rate(ki), 1).c_str(), kr ? fmt(*kr, 1).c_str() : "N/A");
      os << cell;
    }
    os << '\n';
  }
  os << '\n';
  auto line = [&](const char* name, const std::vector<double>& v, const std::vector<double>& sd, std::size_t ki) {
    os << name << '-' << k_list[ki] << ' ' << fmt(v[ki]);
    if (runs > 1 && ki < sd.size()) os << " +- " << fmt(sd[ki]);
    os << '\n';
  };
  for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
    line("ESR", esr, esr_std, ki);
    line("PSR", psr, psr_std, ki);
    if (rsr) {
      line("RSR", *rsr, rsr_std, ki);
    } else {
      os << "RSR-" << k_list[ki] << " N/A\n";
    }
  }
  if (!ner.empty()) {
    os << "\nNER (" << ner_concept << ")";
    for (const auto& [t, r] : ner) os << "  tau=" << fmt(t, 2) << ": " << fmt(r);
    os << '\n';
  }
  return os.str();
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "scope,concept,role,metric,k,value,std,n\n";
  for (const auto& c : classes) {
    const std::string role(text::role_name(c.role));
    for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
      const double det = c.detection_rate(ki);
      if (c.role == text::ConceptRole::erase) {
        os << "class," << c.concept_id << ',' << role << ",ESR," << k_list[ki] << ',' << fmt(100.0 - det, 4) << ",," << c.n << '\n';
        if (auto kr = c.key_detection_rate(ki)) {
          os << "class," << c.concept_id << ',' << role << ",RSR," << k_list[ki] << ',' << fmt(*kr, 4) << ",," << c.n << '\n';
        }
      } else {
        os << "class," << c.concept_id << ',' << role << ",PSR," << k_list[ki] << ',' << fmt(det, 4) << ",," << c.n << '\n';
      }
    }
  }
  auto agg = [&](const char* name, const std::vector<double>& v, const std::vector<double>& sd) {
    for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
      os << "aggregate,,," << name << ',' << k_list[ki] << ',' << fmt(v[ki], 4) << ','
         << (ki < sd.size() ? fmt(sd[ki], 4) : "") << ",\n";
    }
  };
  agg("ESR", esr, esr_std);
  agg("PSR", psr, psr_std);
  if (rsr) agg("RSR", *rsr, rsr_std);
  for (const auto& [t, r] : ner) os << "aggregate," << ner_concept << ",,NER@" << fmt(t, 2) << ",," << fmt(r, 4) << ",,\n";
  return os.str();
}

void MetricsReport::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_text_file(dir / "report.txt", to_text());
  io::write_text_file(dir / "report.csv", to_csv());
}

std::vector<std::pair<double, double>> ner_from_images(const Tensor& images, const data::OracleClassifier& oracle,
                                                       const std::string& forbidden_id,
                                                       std::span<const double> thresholds) {
  if (thresholds.empty()) throw UsageError("the NER sweep needs at least one threshold");
  const auto idx = static_cast<std::size_t>(oracle.class_index(forbidden_id));
  const auto p = oracle.probabilities(images);
  const auto K = static_cast<std::size_t>(p.dim(1));
  const auto n = static_cast<std::size_t>(p.dim(0));
  std::vector<std::pair<double, double>> out;
  for (double tau : thresholds) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) hit += p.data()[i * K + idx] >= tau;
    out.emplace_back(tau, 100.0 * static_cast<double>(hit) / static_cast<double>(n));
  }
  return out;
}

std::vector<std::pair<double, double>> ner_sweep(const diffusion::Denoiser& model, const Tensor& c,
                                                 const data::OracleClassifier& oracle, const std::string& forbidden_id,
                                                 std::span<const double> thresholds, int n, std::uint64_t seed,
                                                 int sampler_steps, int jobs) {
  if (thresholds.empty()) throw UsageError("the NER sweep needs at least one threshold");
  diffusion::SampleOptions so;
  so.steps = sampler_steps;
  return ner_from_images(generate(model, c, n, concept_seed(seed, forbidden_id), so, jobs), oracle, forbidden_id,
                         thresholds);
}

MetricsReport esr_psr_rsr(const diffusion::Denoiser& model, std::span<const trainer::PromptKey> keys,
                          const text::ConceptRegistry& registry, const text::Vocabulary& vocab,
                          const data::OracleClassifier& oracle, const EvalOptions& options) {
  return esr_psr_rsr(model, keys, registry, vocab, oracle, options,
                     [&oracle](const Tensor& images, int k) { return oracle.classify_topk(images, k); });
}

MetricsReport esr_psr_rsr(const diffusion::Denoiser& model, std::span<const trainer::PromptKey> keys,
                          const text::ConceptRegistry& registry, const text::Vocabulary& vocab,
                          const data::OracleClassifier& oracle, const EvalOptions& options, const Detector& detector) {
  options.validate();
  registry.validate(&vocab);
  for (const auto& k : keys) k.check_matches(model);
  MetricsReport r;
  r.model_fingerprint = model.content_hash();
  r.model_role = std::string(diffusion::role_name(model.role()));
  r.config_fingerprint = options.fingerprint();
  r.k_list = options.k_list;
  const int kmax = *std::max_element(options.k_list.begin(), options.k_list.end());
  diffusion::SampleOptions so;
  so.steps = options.sampler_steps;
  Tensor forbidden_images;
  for (const auto& spec : registry.concepts()) {
    if (spec.role == text::ConceptRole::neutral_target) continue;
    const auto c = text::encode(spec.phrase, vocab);
    const auto seed = concept_seed(options.seed, spec.concept_id);
    ClassMetrics m;
    m.concept_id = spec.concept_id;
    m.role = spec.role;
    m.n = options.n;
    auto imgs = generate(model, c, options.n, seed, so, options.jobs);
    if (spec.concept_id == options.ner_concept) forbidden_images = imgs;
    m.detected = count_detections(detector(imgs, kmax), spec.concept_id, options.k_list);
    if (spec.role == text::ConceptRole::erase) {
      if (const auto* key = key_for(keys, spec.concept_id)) {
        auto ko = so;
        ko.prompt = &key->prompt;
        ko.sites = key->sites;
        auto kimgs = generate(model, c, options.n, seed, ko, options.jobs);
        m.detected_with_key = count_detections(detector(kimgs, kmax), spec.concept_id, options.k_list);
      }
    }
    r.classes.push_back(std::move(m));
  }
  const auto nk = options.k_list.size();
  bool any_key = false, all_keys = true;
  std::vector<std::vector<double>> e(nk), p(nk), rs(nk);
  for (const auto& m : r.classes) {
    for (std::size_t ki = 0; ki < nk; ++ki) {
      if (m.role == text::ConceptRole::erase) {
        e[ki].push_back(100.0 - m.detection_rate(ki));
        if (auto kr = m.key_detection_rate(ki)) rs[ki].push_back(*kr);
      } else {
        p[ki].push_back(m.detection_rate(ki));
      }
    }
    if (m.role == text::ConceptRole::erase) {
      any_key = any_key || m.detected_with_key.has_value();
      all_keys = all_keys && m.detected_with_key.has_value();
    }
  }
  for (std::size_t ki = 0; ki < nk; ++ki) {
    r.esr.push_back(mean_of(e[ki]));
    r.psr.push_back(mean_of(p[ki]));
  }
  if (any_key && all_keys) {
    r.rsr.emplace();
    for (std::size_t ki = 0; ki < nk; ++ki) r.rsr->push_back(mean_of(rs[ki]));
  }
  if (!options.ner_concept.empty()) {
    r.ner_concept = options.ner_concept;
    if (!forbidden_images.defined()) {
      const auto c = text::encode({options.ner_concept}, vocab);
      forbidden_images = generate(model, c, options.n, concept_seed(options.seed, options.ner_concept), so, options.jobs);
    }
    r.ner = ner_from_images(forbidden_images, oracle, options.ner_concept, options.thresholds);
  }
  return r;
}

MetricsReport merge_runs(std::span<const MetricsReport> runs) {
  if (runs.empty()) throw UsageError("nothing to merge");
  MetricsReport out;
  out.k_list = runs[0].k_list;
  out.model_role = runs[0].model_role;
  out.config_fingerprint = runs[0].config_fingerprint;
  out.ner_concept = runs[0].ner_concept;
  out.runs = static_cast<int>(runs.size());
  std::string fps;
  for (const auto& r : runs) {
    if (r.k_list != out.k_list) throw UsageError("cannot merge reports with different k lists");
    fps += r.model_fingerprint;
    for (auto c : r.classes) out.classes.push_back(std::move(c));
  }
  out.model_fingerprint = io::sha256_hex(fps);
  const auto nk = out.k_list.size();
  const bool all_rsr = std::all_of(runs.begin(), runs.end(), [](const MetricsReport& r) { return r.rsr.has_value(); });
  if (all_rsr) out.rsr.emplace();
  for (std::size_t ki = 0; ki < nk; ++ki) {
    std::vector<double> e, p, s;
    for (const auto& r : runs) {
      e.push_back(r.esr[ki]);
      p.push_back(r.psr[ki]);
      if (all_rsr) s.push_back((*r.rsr)[ki]);
    }
    out.esr.push_back(mean_of(e));
    out.esr_std.push_back(std_of(e));
    out.psr.push_back(mean_of(p));
    out.psr_std.push_back(std_of(p));
    if (all_rsr) {
      out.rsr->push_back(mean_of(s));
      out.rsr_std.push_back(std_of(s));
    }
  }
  const bool all_ner = std::all_of(runs.begin(), runs.end(), [&](const MetricsReport& r) { return r.ner.size() == runs[0].ner.size(); });
  if (all_ner) {
    for (std::size_t i = 0; i < runs[0].ner.size(); ++i) {
      std::vector<double> v;
      for (const auto& r : runs) v.push_back(r.ner[i].second);
      out.ner.emplace_back(runs[0].ner[i].first, mean_of(v));
    }
  }
  return out;
}

std::vector<std::vector<std::string>> class_splits(std::span<const std::string> ids, int count, int erase_size,
                                                   std::uint64_t seed) {
  if (count < 1) throw ConfigError("need at least one class split");
  if (erase_size < 1 || erase_size >= static_cast<int>(ids.size())) {
    throw ConfigError("erase set size must be between 1 and the class count minus one");
  }
  Rng rng(seed);
  std::vector<std::vector<std::string>> out;
  for (int s = 0; s < count; ++s) {
    std::vector<std::string> pool(ids.begin(), ids.end());
    // Partial Fisher-Yates with the project RNG so splits are portable.
    for (int i = 0; i < erase_size; ++i) {
      const int j = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    out.emplace_back(pool.begin(), pool.begin() + erase_size);
  }
  return out;
}

double detection_with_key(const diffusion::Denoiser& model, const trainer::PromptKey* key,
                          const text::Vocabulary& vocab, const text::ConceptRegistry& registry,
                          const std::string& concept_id, const data::OracleClassifier& oracle, int k,
                          const EvalOptions& options) {
  if (key) key->check_matches(model);
  const auto& spec = registry.find(concept_id);
  diffusion::SampleOptions so;
  so.steps = options.sampler_steps;
  if (key) {
    so.prompt = &key->prompt;
    so.sites = key->sites;
  }
  auto imgs = generate(model, text::encode(spec.phrase, vocab), options.n, concept_seed(options.seed, concept_id), so,
                       options.jobs);
  const std::vector<int> ks{k};
  return 100.0 * count_detections(oracle.classify_topk(imgs, k), concept_id, ks)[0] / options.n;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

AlignmentTrace alignment_trace(std::span<const trainer::PromptSnapshot> snapshots, const std::string& concept_id,
                               const text::Vocabulary& vocab, std::span<const text::Phrase> probes, int every,
                               int last_step) {
  if (probes.empty()) throw UsageError("alignment trace needs at least one probe phrase");
  AlignmentTrace tr;
  tr.concept_id = concept_id;
  std::vector<std::vector<double>> probe_vecs;
  for (const auto& ph : probes) {
    tr.probes.push_back(ph.empty() ? "<empty>" : text::join_phrase(ph));
    probe_vecs.push_back(text::pooled_embedding(text::encode(ph, vocab)));
  }
  std::vector<const trainer::PromptSnapshot*> mine;
  for (const auto& s : snapshots) {
    if (s.concept_id == concept_id) mine.push_back(&s);
  }
  std::sort(mine.begin(), mine.end(), [](auto* a, auto* b) { return a->step < b->step; });
  std::vector<int> grid;
  if (every > 0) {
    const int last = last_step >= 0 ? last_step : (mine.empty() ? 0 : mine.back()->step);
    for (int s = 0; s <= last; s += every) grid.push_back(s);
    if (grid.empty() || grid.back() != last) grid.push_back(last);
  }
  for (const auto* s : mine) {
    if (std::find(grid.begin(), grid.end(), s->step) == grid.end()) grid.push_back(s->step);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  for (int step : grid) {
    const auto it = std::find_if(mine.begin(), mine.end(), [&](auto* s) { return s->step == step; });
    tr.steps.push_back(step);
    if (it == mine.end()) {
      tr.cosine.emplace_back(probes.size(), std::numeric_limits<double>::quiet_NaN());
      tr.gap.push_back(true);
      continue;
    }
    const auto pooled = text::pooled_embedding((*it)->values);
    std::vector<double> row;
    for (const auto& pv : probe_vecs) row.push_back(cosine(pooled, pv));
    tr.cosine.push_back(std::move(row));
    tr.gap.push_back(false);
  }
  return tr;
}

std::string AlignmentTrace::to_csv() const {
  std::ostringstream os;
  os << "step";
  for (const auto& p : probes) os << ',' << p;
  os << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) {
    os << steps[i];
    for (double v : cosine[i]) os << ',' << (gap[i] ? std::string("gap") : fmt(v, 6));
    os << '\n';
  }
  return os.str();
}

io::Image AlignmentTrace::plot(const std::string& title) const {
  std::vector<io::Series> series;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    io::Series s{probes[p], {}, {}};
    for (std::size_t i = 0; i < steps.size(); ++i) {
      s.x.push_back(steps[i]);
      s.y.push_back(cosine[i][p]);
    }
    series.push_back(std::move(s));
  }
  return io::line_plot(series, {480, 320, title, "step", "cosine"});
}

std::vector<std::vector<double>> class_prototypes(const data::OracleClassifier& oracle,
                                                  std::span<const data::ConceptClass> classes, int n,
                                                  std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  for (const auto& cls : classes) {
    Rng rng(concept_seed(seed, cls.concept_id));
    const auto f = oracle.features(data::render_batch(classes, cls.concept_id, n, rng));
    const auto d = static_cast<std::size_t>(f.dim(1));
    std::vector<double> mean(d, 0.0);
    for (std::int64_t i = 0; i < f.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += f.data()[static_cast<std::size_t>(i) * d + j] / n;
    out.push_back(std::move(mean));
  }
  return out;
}

double feature_alignment(const data::OracleClassifier& oracle, const Tensor& images, std::span<const double> prototype) {
  const auto f = oracle.features(images);
  const auto d = static_cast<std::size_t>(f.dim(1));
  double acc = 0;
  for (std::int64_t i = 0; i < f.dim(0); ++i) acc += cosine(f.data().subspan(static_cast<std::size_t>(i) * d, d), prototype);
  return acc / static_cast<double>(f.dim(0));
}

double frechet_distance(std::span<const double> mean_a, std::span<const double> cov_a, std::span<const double> mean_b,
                        std::span<const double> cov_b, int dim) {
  using Mat = Eigen::MatrixXd;
  const auto d = static_cast<std::size_t>(dim);
  if (mean_a.size() != d || mean_b.size() != d || cov_a.size() != d * d || cov_b.size() != d * d) {
    throw DimensionError("frechet_distance size mismatch");
  }
  double mu = 0;
  for (std::size_t i = 0; i < d; ++i) mu += (mean_a[i] - mean_b[i]) * (mean_a[i] - mean_b[i]);
  Mat A = Eigen::Map<const Mat>(cov_a.data(), dim, dim);
  Mat B = Eigen::Map<const Mat>(cov_b.data(), dim, dim);
  A = 0.5 * (A + A.transpose());
  B = 0.5 * (B + B.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> ea(A);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat sa = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  const Mat m = sa * B * sa;
  Eigen::SelfAdjointEigenSolver<Mat> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mu + A.trace() + B.trace() - 2.0 * tr_sqrt);
}

namespace {

void gaussian_fit(const Tensor& f, std::vector<double>& mean, std::vector<double>& cov) {
  const auto n = static_cast<std::size_t>(f.dim(0)), d = static_cast<std::size_t>(f.dim(1));
  if (n < 2) throw UsageError("a Gaussian fit needs at least two images");
  mean.assign(d, 0.0);
  cov.assign(d * d, 0.0);
  const auto x = f.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]) / static_cast<double>(n - 1);
}

}  // namespace

double feature_frechet(const data::OracleClassifier& oracle, const Tensor& a, const Tensor& b) {
  std::vector<double> ma, ca, mb, cb;
  const auto fa = oracle.features(a);
  gaussian_fit(fa, ma, ca);
  gaussian_fit(oracle.features(b), mb, cb);
  return frechet_distance(ma, ca, mb, cb, static_cast<int>(fa.dim(1)));
}

FeatureTrace feature_trace(const diffusion::Denoiser& model, std::span<const trainer::PromptSnapshot> snapshots,
                           const std::string& concept_id, const text::Vocabulary& vocab,
                           const text::ConceptRegistry& registry, const data::OracleClassifier& oracle,
                           std::span<const data::ConceptClass> classes, attn::SiteSet sites, int k_factor,
                           attn::Mechanism mechanism, int n, int sampler_steps, std::uint64_t seed) {
  FeatureTrace tr;
  tr.concept_id = concept_id;
  for (const auto& c : classes) tr.classes.push_back(c.concept_id);
  const auto protos = class_prototypes(oracle, classes, 64, seed);
  const auto c = text::encode(registry.find(concept_id).phrase, vocab);
  for (const auto& s : snapshots) {
    if (s.concept_id != concept_id) continue;
    attn::Prompt p{s.values, k_factor, mechanism};
    diffusion::SampleOptions so;
    so.steps = sampler_steps;
    so.prompt = &p;
    so.sites = sites;
    const auto imgs = diffusion::sample(model, c, n, concept_seed(seed, concept_id), so);
    std::vector<double> row;
    for (const auto& proto : protos) row.push_back(feature_alignment(oracle, imgs, proto));
    tr.steps.push_back(s.step);
    tr.alignment.push_back(std::move(row));
  }
  return tr;
}

std::string FeatureTrace::to_csv() const {
  std::ostringstream os;
  os << "step";
  for (const auto& c : classes) os << ',' << c;
  os << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) {
    os << steps[i];
    for (double v : alignment[i]) os << ',' << fmt(v, 6);
    os << '\n';
  }
  return os.str();
}

std::string TrendTable::to_csv() const {
  std::ostringstream os;
  os << parameter << ",metric,k,value\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    for (std::size_t ki = 0; ki < r.k_list.size(); ++ki) {
      os << row.value << ",ESR," << r.k_list[ki] << ',' << fmt(r.esr[ki], 4) << '\n';
      os << row.value << ",PSR," << r.k_list[ki] << ',' << fmt(r.psr[ki], 4) << '\n';
      if (r.rsr) os << row.value << ",RSR," << r.k_list[ki] << ',' << fmt((*r.rsr)[ki], 4) << '\n';
    }
    for (const auto& [t, v] : r.ner) os << row.value << ",NER@" << fmt(t, 2) << ",," << fmt(v, 4) << '\n';
  }
  return os.str();
}

std::string TrendTable::to_text() const {
  std::ostringstream os;
  if (rows.empty()) return os.str();
  const auto& ks = rows[0].report.k_list;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-14s", parameter.c_str());
  os << buf;
  for (int k : ks) os << "   ESR-" << k << "   PSR-" << k << "   RSR-" << k;
  os << '\n';
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-14s", row.value.c_str());
    os << buf;
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      const auto& r = row.report;
      std::snprintf(buf, sizeof buf, " %7s %7s %7s", fmt(r.esr[ki]).c_str(), fmt(r.psr[ki]).c_str(),
                    r.rsr ? fmt((*r.rsr)[ki]).c_str() : "N/A");
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

io::Image TrendTable::plot() const {
  if (rows.empty()) throw UsageError("empty trend table");
  std::vector<io::Series> series;
  const auto& ks = rows[0].report.k_list;
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    io::Series e{"ESR-" + std::to_string(ks[ki]), {}, {}}, p{"PSR-" + std::to_string(ks[ki]), {}, {}},
        r{"RSR-" + std::to_string(ks[ki]), {}, {}};
    for (const auto& row : rows) {
      e.x.push_back(row.x);
      e.y.push_back(row.report.esr[ki]);
      p.x.push_back(row.x);
      p.y.push_back(row.report.psr[ki]);
      r.x.push_back(row.x);
      r.y.push_back(row.report.rsr ? (*row.report.rsr)[ki] : std::numeric_limits<double>::quiet_NaN());
    }
    series.push_back(std::move(e));
    series.push_back(std::move(p));
    series.push_back(std::move(r));
  }
  return io::line_plot(series, {480, 320, parameter + " sweep", parameter, "percent"});
}

bool monotone_with_slack(std::span<const double> values, bool non_increasing, double slack, int allowed) {
  int violations = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double step = non_increasing ? values[i] - values[i - 1] : values[i - 1] - values[i];
    if (step <= 0) continue;
    if (step > slack) return false;
    ++violations;
  }
  return violations <= allowed;
}

}  // namespace kpop::eval

#include "kpop/text_encoding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "kpop/archive.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"

namespace kpop::text {

std::vector<std::string> Vocabulary::standard_tokens() {
  return {"pad",    "neutral", "a",     "photo",    "of",     "an",    "the",  "image",
          "picture", "circle", "square", "cross",   "ring",   "hstripes", "vstripes", "dots",
          "triangle", "round", "disc",  "box",      "plus",   "hoop",  "lines", "grid",
          "shape",  "object",  "blank", "empty",    "bright", "dark",  "small", "large"};
}

Vocabulary Vocabulary::build(std::vector<std::string> tokens, int seq_len, int width, std::uint64_t seed,
                             double scale) {
  if (seq_len < 1 || width < 1) throw VocabularyError("sequence length and width must be positive");
  std::set<std::string> seen;
  for (auto& t : tokens) {
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    if (t.empty() || t.find_first_of(" \t\n|") != std::string::npos) throw VocabularyError("invalid token '" + t + "'");
    if (!seen.insert(t).second) throw VocabularyError("duplicate token '" + t + "'");
  }
  if (!seen.count(std::string(kPadToken)) || !seen.count(std::string(kNeutralToken))) {
    throw VocabularyError("vocabulary must contain the reserved tokens 'pad' and 'neutral'");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.seq_len_ = seq_len;
  v.width_ = width;
  v.seed_ = seed;
  v.scale_ = scale;
  Rng rng(seed);
  const auto n = static_cast<std::int64_t>(v.tokens_.size());
  v.table_ = nn::Tensor::randn({n, width}, rng, scale);
  const int pad = v.index(kPadToken);
  auto data = v.table_.mutable_data();
  std::fill(data.begin() + pad * width, data.begin() + (pad + 1) * width, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double d = 0.0;
      for (int k = 0; k < width; ++k) {
        const double diff = data[static_cast<std::size_t>(i * width + k)] - data[static_cast<std::size_t>(j * width + k)];
        d += diff * diff;
      }
      if (!(d > 0.0)) throw VocabularyError("embedding rows for '" + v.tokens_[i] + "' and '" + v.tokens_[j] + "' coincide");
    }
  }
  return v;
}

Vocabulary Vocabulary::standard(std::uint64_t seed, int seq_len, int width) {
  return build(standard_tokens(), seq_len, width, seed);
}

int Vocabulary::index(std::string_view token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<int>(i);
  }
  throw VocabularyError("unknown token '" + std::string(token) + "'");
}

bool Vocabulary::contains(std::string_view token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

Phrase parse_phrase(std::string_view text) {
  Phrase out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(w);
  }
  return out;
}

std::string join_phrase(const Phrase& phrase) {
  std::string s;
  for (const auto& w : phrase) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

nn::Tensor encode(const Phrase& phrase, const Vocabulary& vocab) {
  const int m = vocab.seq_len(), d = vocab.width();
  if (static_cast<int>(phrase.size()) > m) {
    throw DimensionError("phrase '" + join_phrase(phrase) + "' has " + std::to_string(phrase.size()) +
                         " tokens, sequence length is " + std::to_string(m));
  }
  std::vector<std::string> unknown;
  for (const auto& w : phrase) {
    if (!vocab.contains(w)) unknown.push_back(w);
  }
  if (!unknown.empty()) throw VocabularyError("unknown tokens: " + join_phrase(unknown));
  std::vector<double> out(static_cast<std::size_t>(m * d), 0.0);
  const auto table = vocab.table().data();
  const int pad = vocab.index(kPadToken);
  for (int r = 0; r < m; ++r) {
    const int row = r < static_cast<int>(phrase.size()) ? vocab.index(phrase[static_cast<std::size_t>(r)]) : pad;
    std::copy(table.begin() + row * d, table.begin() + (row + 1) * d, out.begin() + r * d);
  }
  return nn::Tensor::from_data({1, m, d}, std::move(out));
}

nn::Tensor encode_batch(std::span<const Phrase> phrases, const Vocabulary& vocab) {
  if (phrases.empty()) throw DimensionError("encode_batch of zero phrases");
  std::vector<nn::Tensor> parts;
  for (const auto& p : phrases) parts.push_back(encode(p, vocab));
  return nn::concat(parts, 0);
}

std::vector<double> pooled_embedding(const nn::Tensor& rows) {
  const auto d = static_cast<std::size_t>(rows.dim(-1));
  const std::size_t n = rows.numel() / d;
  std::vector<double> acc(d, 0.0);
  std::size_t used = 0;
  const auto data = rows.data();
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = data.subspan(r * d, d);
    if (std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; })) continue;
    for (std::size_t k = 0; k < d; ++k) acc[k] += row[k];
    ++used;
  }
  if (used) {
    for (auto& v : acc) v /= static_cast<double>(used);
  }
  return acc;
}

std::string_view role_name(ConceptRole role) {
  switch (role) {
    case ConceptRole::erase: return "erase";
    case ConceptRole::preserve: return "preserve";
    case ConceptRole::neutral_target: return "neutral-target";
  }
  return "?";
}

ConceptRole parse_role(std::string_view name) {
  if (name == "erase") return ConceptRole::erase;
  if (name == "preserve") return ConceptRole::preserve;
  if (name == "neutral-target") return ConceptRole::neutral_target;
  throw RegistryError("unknown concept role '" + std::string(name) + "'");
}

ConceptRegistry::ConceptRegistry(std::vector<ConceptSpec> concepts, std::uint64_t vocab_seed)
    : concepts_(std::move(concepts)), vocab_seed_(vocab_seed) {}

void ConceptRegistry::validate(const Vocabulary* vocab) const {
  std::set<std::string> ids;
  int neutral = 0;
  for (const auto& c : concepts_) {
    if (c.concept_id.empty() || c.concept_id.find_first_of(" =|") != std::string::npos) {
      throw RegistryError("invalid concept id '" + c.concept_id + "'");
    }
    if (!ids.insert(c.concept_id).second) throw RegistryError("duplicate concept id '" + c.concept_id + "'");
    if (c.role == ConceptRole::neutral_target) ++neutral;
    if (vocab) {
      if (static_cast<int>(c.phrase.size()) > vocab->seq_len()) {
        throw RegistryError("phrase of '" + c.concept_id + "' exceeds the sequence length");
      }
      for (const auto& w : c.phrase) {
        if (!vocab->contains(w)) throw RegistryError("concept '" + c.concept_id + "' uses unknown token '" + w + "'");
      }
    }
  }
  if (neutral != 1) throw RegistryError("registry needs exactly one neutral target, found " + std::to_string(neutral));
  for (const auto& e : concepts_) {
    if (e.role != ConceptRole::erase) continue;
    for (const auto& p : concepts_) {
      if (p.role == ConceptRole::preserve && p.phrase == e.phrase) {
        throw RegistryError("concept '" + e.concept_id + "' is both erased and preserved (as '" + p.concept_id + "')");
      }
    }
  }
}

void ConceptRegistry::validate_for_hiding(const Vocabulary* vocab) const {
  validate(vocab);
  if (erased().empty()) throw RegistryError("erase set is empty");
}

std::vector<ConceptSpec> ConceptRegistry::erased() const {
  std::vector<ConceptSpec> out;
  for (const auto& c : concepts_) {
    if (c.role == ConceptRole::erase) out.push_back(c);
  }
  return out;
}

std::vector<ConceptSpec> ConceptRegistry::preserved() const {
  std::vector<ConceptSpec> out;
  for (const auto& c : concepts_) {
    if (c.role == ConceptRole::preserve) out.push_back(c);
  }
  return out;
}

const ConceptSpec& ConceptRegistry::neutral() const {
  for (const auto& c : concepts_) {
    if (c.role == ConceptRole::neutral_target) return c;
  }
  throw RegistryError("registry has no neutral target");
}

const ConceptSpec& ConceptRegistry::find(std::string_view concept_id) const {
  for (const auto& c : concepts_) {
    if (c.concept_id == concept_id) return c;
  }
  throw RegistryError("unknown concept '" + std::string(concept_id) + "'");
}

std::string ConceptRegistry::to_text() const {
  io::Manifest m;
  m.set("vocab_seed", std::to_string(vocab_seed_));
  for (const auto& c : concepts_) {
    m.set("concept." + c.concept_id, std::string(role_name(c.role)) + " | " + join_phrase(c.phrase));
  }
  return m.to_text();
}

ConceptRegistry ConceptRegistry::from_text(std::string_view text) {
  const auto m = io::Manifest::parse(text);
  ConceptRegistry r;
  try {
    r.vocab_seed_ = std::stoull(m.get("vocab_seed"));
  } catch (const std::logic_error&) {
    throw RegistryError("registry vocab_seed is not an integer");
  }
  for (const auto& [k, v] : m.entries()) {
    if (k.rfind("concept.", 0) != 0) continue;
    const auto bar = v.find('|');
    if (bar == std::string::npos) throw RegistryError("registry entry '" + k + "' needs 'role | phrase'");
    ConceptSpec c;
    c.concept_id = k.substr(8);
    auto role = v.substr(0, bar);
    role.erase(role.find_last_not_of(' ') + 1);
    c.role = parse_role(role);
    c.phrase = parse_phrase(v.substr(bar + 1));
    r.concepts_.push_back(std::move(c));
  }
  r.validate();
  return r;
}

void ConceptRegistry::save(const std::filesystem::path& path) const { io::write_text_file(path, to_text()); }

ConceptRegistry ConceptRegistry::load(const std::filesystem::path& path) { return from_text(io::read_text_file(path)); }

bool ConceptRegistry::operator==(const ConceptRegistry& o) const {
  return vocab_seed_ == o.vocab_seed_ && concepts_ == o.concepts_;
}

nn::Tensor neutral_target(const ConceptRegistry& registry, const Vocabulary& vocab) {
  return encode(registry.neutral().phrase, vocab);
}

}  // namespace kpop::text

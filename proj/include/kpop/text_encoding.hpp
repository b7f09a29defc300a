#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kpop/tensor.hpp"

namespace kpop::text {

using Phrase = std::vector<std::string>;

inline constexpr std::string_view kPadToken = "pad";
inline constexpr std::string_view kNeutralToken = "neutral";

/// Frozen token embeddings standing in for a pretrained text encoder.
///
/// Rows are seeded Gaussian draws scaled by `scale`; the PAD row is zero so
/// padding contributes neither keys nor values to attention and drops out of
/// pooled phrase embeddings.
class Vocabulary {
 public:
  static constexpr int kDefaultSeqLen = 8;
  static constexpr int kDefaultWidth = 64;

  // Fails with VocabularyError on duplicates, missing reserved tokens or
  // coincident embedding rows.
  static Vocabulary build(std::vector<std::string> tokens, int seq_len, int width, std::uint64_t seed,
                          double scale = 1.0);
  static Vocabulary standard(std::uint64_t seed, int seq_len = kDefaultSeqLen, int width = kDefaultWidth);
  static std::vector<std::string> standard_tokens();

  int index(std::string_view token) const;
  bool contains(std::string_view token) const;
  const nn::Tensor& table() const { return table_; }
  std::span<const std::string> tokens() const { return tokens_; }
  int seq_len() const { return seq_len_; }
  int width() const { return width_; }
  std::uint64_t seed() const { return seed_; }
  double scale() const { return scale_; }

 private:
  std::vector<std::string> tokens_;
  nn::Tensor table_;
  int seq_len_ = 0;
  int width_ = 0;
  std::uint64_t seed_ = 0;
  double scale_ = 1.0;
};

/// Splits on whitespace and lowercases; "" yields the empty phrase.
Phrase parse_phrase(std::string_view text);
std::string join_phrase(const Phrase& phrase);

/// [1, m_c, d_c] lookup of `phrase`, PAD-filled. VocabularyError lists an
/// unknown token; a phrase longer than m_c is a DimensionError.
nn::Tensor encode(const Phrase& phrase, const Vocabulary& vocab);
/// Stacks several encodings into [n, m_c, d_c].
nn::Tensor encode_batch(std::span<const Phrase> phrases, const Vocabulary& vocab);

/// Mean of the non-PAD rows of an encoding (or prompt) [1|m, d].
std::vector<double> pooled_embedding(const nn::Tensor& rows);

enum class ConceptRole { erase, preserve, neutral_target };
std::string_view role_name(ConceptRole role);
ConceptRole parse_role(std::string_view name);

struct ConceptSpec {
  std::string concept_id;
  Phrase phrase;
  ConceptRole role = ConceptRole::preserve;
};

/// The to-be-erased set, the preserved set and the neutral target c_t.
class ConceptRegistry {
 public:
  ConceptRegistry() = default;
  ConceptRegistry(std::vector<ConceptSpec> concepts, std::uint64_t vocab_seed);

  // RegistryError unless exactly one neutral target exists, ids are unique
  // and erase/preserve phrases are disjoint. Phrase tokens are checked
  // against `vocab` when given.
  void validate(const Vocabulary* vocab = nullptr) const;
  // As validate(), and additionally requires a non-empty erase set.
  void validate_for_hiding(const Vocabulary* vocab = nullptr) const;

  const std::vector<ConceptSpec>& concepts() const { return concepts_; }
  std::vector<ConceptSpec> erased() const;
  std::vector<ConceptSpec> preserved() const;
  const ConceptSpec& neutral() const;
  const ConceptSpec& find(std::string_view concept_id) const;
  std::uint64_t vocab_seed() const { return vocab_seed_; }

  // Human-readable key = value file.
  std::string to_text() const;
  static ConceptRegistry from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static ConceptRegistry load(const std::filesystem::path& path);

  bool operator==(const ConceptRegistry&) const;

 private:
  std::vector<ConceptSpec> concepts_;
  std::uint64_t vocab_seed_ = 0;
};

inline bool operator==(const ConceptSpec& a, const ConceptSpec& b) {
  return a.concept_id == b.concept_id && a.phrase == b.phrase && a.role == b.role;
}

/// Encoding of the registry's neutral target.
nn::Tensor neutral_target(const ConceptRegistry& registry, const Vocabulary& vocab);

}  // namespace kpop::text

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fairmed/vocab.hpp"

namespace fairmed {

struct SocialGroup {
  std::string name;
  int token = 0;
  bool operator==(const SocialGroup&) const = default;
};

/// A protected attribute and its ordered social groups (one token each).
struct AttributeSpec {
  std::string name;
  std::vector<SocialGroup> groups;

  void validate() const;
  std::vector<int> group_tokens() const;
  std::size_t size() const { return groups.size(); }

  static AttributeSpec from_vocabulary(const Vocabulary& vocab);
};

struct CorpusEntry {
  std::string attribute;
  std::string concept_name;
  std::vector<int> sentence;  // ends right before the group slot
  std::string sentence_text;  // optional
  std::string source_group;
  bool operator==(const CorpusEntry&) const = default;
};

inline constexpr int kConceptSlot = -1;
inline constexpr int kFillerSlot = -2;

/// Token patterns with exactly one kConceptSlot. kFillerSlot positions are
/// drawn from `filler_pool`.
struct TemplateSet {
  std::vector<std::vector<int>> patterns;
  std::vector<int> filler_pool;

  void validate() const;
  static TemplateSet make_default(const Vocabulary& vocab);
};

/// concepts.size() x sentences_per_concept entries, concept-major. Concept i is
/// generated against source group groups[i % n].
std::vector<CorpusEntry> generate_corpus(const AttributeSpec& attribute, const Vocabulary& vocab,
                                         const std::vector<int>& concepts,
                                         const TemplateSet& templates,
                                         std::size_t sentences_per_concept, std::uint64_t seed);

void save_corpus(const std::vector<CorpusEntry>& entries, const std::filesystem::path& path);
/// Throws FormatError carrying the 1-based line number of the first bad line.
std::vector<CorpusEntry> load_corpus(const std::filesystem::path& path);

/// Throws InvalidArgument if a sentence is empty, ends in a group token, or has
/// ids outside the vocabulary.
void validate_corpus(const std::vector<CorpusEntry>& entries, const Vocabulary& vocab);

}  // namespace fairmed

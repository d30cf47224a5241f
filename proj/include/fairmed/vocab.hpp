#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fairmed {

/// Fixed integer-token toy vocabulary with a string table and token roles.
struct Vocabulary {
  std::vector<std::string> names;  // id -> string
  int bos = 0;
  int unknown = 1;
  std::string attribute = "creed";
  std::vector<int> groups;
  std::vector<int> concepts;
  std::vector<int> cues;     // control-set question cues
  std::vector<int> answers;  // control-set answers, answers[i] pairs with cues[i]
  std::vector<int> fillers;

  std::size_t size() const { return names.size(); }
  std::optional<int> find(std::string_view name) const;
  /// Throws InvalidArgument for unknown names.
  int id(std::string_view name) const;
  bool is_group(int token) const;
  bool is_concept(int token) const;

  /// Layout: <bos>, <unknown>, groups, concepts, cues, answers, fillers. The
  /// first fillers carry template words; the rest are numbered.
  bool operator==(const Vocabulary&) const = default;

  static Vocabulary make_default(std::size_t vocab_size = 128, std::size_t n_groups = 4,
                                 std::size_t n_concepts = 20, std::size_t n_facts = 8);
};

/// Named template words guaranteed to exist in make_default vocabularies.
inline constexpr std::string_view kTemplateWords[] = {
    "the",  "a",     "was",    "by",    "who",  "is",   "linked", "to",     "and",
    "were", "there", "did",    "it",    "then", "seen", "with",   "people", "say",
    "comes", "from", "done",   "often", "one",  "of",   "them",   "person", "said",
    "met",  "later", "answer", "next",  "?",    ".",    "known",  "for",    "caused"};

}  // namespace fairmed

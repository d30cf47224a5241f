#include "fairmed/vocab.hpp"

#include <algorithm>
#include <cstdio>
#include <iterator>

#include "fairmed/errors.hpp"

namespace fairmed {

namespace {

constexpr const char* kGroupNames[] = {"ashar", "belin", "coram", "dovet", "elund", "farro",
                                       "gavin", "hollo"};

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02zu", prefix, i);
  return buf;
}

}  // namespace

std::optional<int> Vocabulary::find(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<int>(std::distance(names.begin(), it));
}

int Vocabulary::id(std::string_view name) const {
  if (auto t = find(name)) return *t;
  throw InvalidArgument("unknown token name '" + std::string(name) + "'");
}

bool Vocabulary::is_group(int token) const {
  return std::find(groups.begin(), groups.end(), token) != groups.end();
}

bool Vocabulary::is_concept(int token) const {
  return std::find(concepts.begin(), concepts.end(), token) != concepts.end();
}

Vocabulary Vocabulary::make_default(std::size_t vocab_size, std::size_t n_groups,
                                    std::size_t n_concepts, std::size_t n_facts) {
  const std::size_t n_words = std::size(kTemplateWords);
  const std::size_t needed = 2 + n_groups + n_concepts + 2 * n_facts + n_words;
  if (n_groups < 2) throw InvalidArgument("vocabulary needs at least two groups");
  if (vocab_size < needed)
    throw InvalidArgument("vocab_size " + std::to_string(vocab_size) + " too small; need " +
                          std::to_string(needed));
  Vocabulary v;
  v.names = {"<bos>", "<unknown>"};
  v.bos = 0;
  v.unknown = 1;
  auto push = [&](std::string name, std::vector<int>& role) {
    role.push_back(static_cast<int>(v.names.size()));
    v.names.push_back(std::move(name));
  };
  for (std::size_t i = 0; i < n_groups; ++i)
    push(i < std::size(kGroupNames) ? kGroupNames[i] : numbered("group_", i), v.groups);
  for (std::size_t i = 0; i < n_concepts; ++i) push(numbered("concept_", i), v.concepts);
  for (std::size_t i = 0; i < n_facts; ++i) push(numbered("cue_", i), v.cues);
  for (std::size_t i = 0; i < n_facts; ++i) push(numbered("answer_", i), v.answers);
  for (auto w : kTemplateWords) push(std::string(w), v.fillers);
  for (std::size_t i = 0; v.names.size() < vocab_size; ++i) push(numbered("w_", i), v.fillers);
  return v;
}

}  // namespace fairmed

#include "fairmed/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "fairmed/errors.hpp"
#include "fairmed/rng.hpp"
#include "json.hpp"

namespace fairmed {

using nlohmann::json;

void AttributeSpec::validate() const {
  if (groups.size() < 2) throw InvalidArgument("attribute '" + name + "' needs at least two groups");
  std::set<int> seen;
  for (const auto& g : groups)
    if (!seen.insert(g.token).second)
      throw InvalidArgument("attribute '" + name + "' repeats token " + std::to_string(g.token));
}

std::vector<int> AttributeSpec::group_tokens() const {
  std::vector<int> out;
  for (const auto& g : groups) out.push_back(g.token);
  return out;
}

AttributeSpec AttributeSpec::from_vocabulary(const Vocabulary& vocab) {
  AttributeSpec a;
  a.name = vocab.attribute;
  for (int g : vocab.groups) a.groups.push_back({vocab.names.at(std::size_t(g)), g});
  return a;
}

void TemplateSet::validate() const {
  if (patterns.empty()) throw InvalidArgument("template set is empty");
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    const auto& p = patterns[i];
    const auto slots = std::count(p.begin(), p.end(), kConceptSlot);
    if (slots != 1)
      throw InvalidArgument("template " + std::to_string(i) + " has " + std::to_string(slots) +
                            " concept slots; expected exactly one");
    if (std::count(p.begin(), p.end(), kFillerSlot) > 0 && filler_pool.empty())
      throw InvalidArgument("template " + std::to_string(i) + " uses filler slots but the pool is empty");
    for (int t : p)
      if (t < kFillerSlot) throw InvalidArgument("template " + std::to_string(i) + " has a bad slot marker");
  }
}

TemplateSet TemplateSet::make_default(const Vocabulary& v) {
  auto w = [&](std::string_view s) { return v.id(s); };
  TemplateSet t;
  t.patterns = {
      {v.bos, w("the"), kConceptSlot, w("was"), w("caused"), w("by"), w("a")},
      {v.bos, kConceptSlot, w("is"), w("linked"), w("to"), w("the")},
      {v.bos, w("people"), w("say"), kConceptSlot, w("comes"), w("from"), w("a")},
      {v.bos, w("the"), kFillerSlot, kConceptSlot, w("was"), w("done"), w("by"), w("a")},
      {v.bos, kConceptSlot, w("is"), w("often"), w("seen"), w("with"), kFillerSlot, w("the")},
      {v.bos, w("one"), w("of"), w("them"), w("was"), w("known"), w("for"), kConceptSlot, w("a")},
  };
  // Numbered fillers act as interchangeable adjectives.
  for (int f : v.fillers)
    if (v.names[std::size_t(f)].rfind("w_", 0) == 0) t.filler_pool.push_back(f);
  return t;
}

std::vector<CorpusEntry> generate_corpus(const AttributeSpec& attribute, const Vocabulary& vocab,
                                         const std::vector<int>& concepts,
                                         const TemplateSet& templates,
                                         std::size_t sentences_per_concept, std::uint64_t seed) {
  attribute.validate();
  templates.validate();
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_template(0, templates.patterns.size() - 1);
  std::vector<CorpusEntry> out;
  out.reserve(concepts.size() * sentences_per_concept);
  for (std::size_t ci = 0; ci < concepts.size(); ++ci) {
    const int concept_token = concepts[ci];
    if (concept_token < 0 || std::size_t(concept_token) >= vocab.size())
      throw InvalidArgument("concept token " + std::to_string(concept_token) + " out of range");
    for (std::size_t s = 0; s < sentences_per_concept; ++s) {
      // With a single template and no filler slots this reduces to the
      // filled template itself.
      const auto& pattern = templates.patterns.size() == 1 ? templates.patterns[0]
                                                           : templates.patterns[pick_template(rng)];
      CorpusEntry e;
      e.attribute = attribute.name;
      e.concept_name = vocab.names[std::size_t(concept_token)];
      e.source_group = attribute.groups[ci % attribute.size()].name;
      for (int t : pattern) {
        if (t == kConceptSlot) {
          e.sentence.push_back(concept_token);
        } else if (t == kFillerSlot) {
          std::uniform_int_distribution<std::size_t> pick(0, templates.filler_pool.size() - 1);
          e.sentence.push_back(templates.filler_pool[pick(rng)]);
        } else {
          e.sentence.push_back(t);
        }
      }
      for (std::size_t i = 0; i < e.sentence.size(); ++i) {
        if (i) e.sentence_text += ' ';
        e.sentence_text += vocab.names.at(std::size_t(e.sentence[i]));
      }
      out.push_back(std::move(e));
    }
  }
  return out;
}

void save_corpus(const std::vector<CorpusEntry>& entries, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write corpus to " + path.string());
  for (const auto& e : entries) {
    json j = {{"attribute", e.attribute},
              {"concept", e.concept_name},
              {"sentence_tokens", e.sentence},
              {"source_group", e.source_group}};
    if (!e.sentence_text.empty()) j["sentence_text"] = e.sentence_text;
    os << j.dump() << '\n';
  }
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot read corpus " + path.string());
  std::vector<CorpusEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) -> FormatError {
      return FormatError(path.string() + ":" + std::to_string(line_no) + ": " + why, line_no);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    for (const char* key : {"attribute", "concept", "sentence_tokens", "source_group"})
      if (!j.contains(key)) throw fail(std::string("missing \"") + key + "\" field");
    try {
      CorpusEntry e;
      e.attribute = j.at("attribute").get<std::string>();
      e.concept_name = j.at("concept").get<std::string>();
      e.sentence = j.at("sentence_tokens").get<std::vector<int>>();
      e.source_group = j.at("source_group").get<std::string>();
      if (j.contains("sentence_text")) e.sentence_text = j.at("sentence_text").get<std::string>();
      out.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw fail(std::string("bad field type: ") + e.what());
    }
  }
  return out;
}

void validate_corpus(const std::vector<CorpusEntry>& entries, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& s = entries[i].sentence;
    if (s.empty()) throw InvalidArgument("corpus entry " + std::to_string(i) + " is empty");
    for (int t : s)
      if (t < 0 || std::size_t(t) >= vocab.size())
        throw InvalidArgument("corpus entry " + std::to_string(i) + " has token " +
                              std::to_string(t) + " outside the vocabulary");
    if (vocab.is_group(s.back()))
      throw InvalidArgument("corpus entry " + std::to_string(i) + " ends in a group token");
  }
}

}  // namespace fairmed

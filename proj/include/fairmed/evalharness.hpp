#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fairmed/corpus.hpp"
#include "fairmed/model.hpp"

namespace fairmed {

enum class Condition { ambiguous, disambiguated };
enum class Polarity { negative, non_negative };

/// BBQ-style multiple-choice item: two group options and one UNKNOWN option.
struct BenchmarkExample {
  std::vector<int> context;
  std::vector<int> question;
  std::vector<std::vector<int>> options;  // 3 continuations
  std::size_t gold = 0;
  Condition condition = Condition::ambiguous;
  Polarity polarity = Polarity::negative;
  std::size_t stereotyped_option = 0;
  std::size_t unknown_option = 2;

  std::vector<int> prompt() const;
  /// Throws InvalidArgument if the structural invariants do not hold.
  void validate(int unknown_token) const;
  bool operator==(const BenchmarkExample&) const = default;
};

/// Score of one continuation given a prompt (higher is more likely).
using OptionScorer = std::function<double(std::span<const int> prompt, std::span<const int> option)>;

/// argmax over options of the scorer; ties go to the lowest index.
std::size_t choose_option(const OptionScorer& scorer, const BenchmarkExample& example);

struct EvalRecord {
  std::size_t chosen = 0;
  std::size_t gold = 0;
  Condition condition = Condition::ambiguous;
  Polarity polarity = Polarity::negative;
  std::size_t stereotyped_option = 0;
  std::size_t unknown_option = 2;
};

EvalRecord make_record(const BenchmarkExample& example, std::size_t chosen);

/// A metric that can be undefined (e.g. zero non-UNKNOWN answers).
struct Metric {
  std::optional<double> value;
  std::string reason;  // set when undefined

  bool defined() const { return value.has_value(); }
  static Metric of(double v) { return {v, {}}; }
  static Metric undefined(std::string why) { return {std::nullopt, std::move(why)}; }
  /// |value|, or nullopt.
  std::optional<double> magnitude() const;
};

struct BiasScores {
  double acc = 0.0;      // overall fraction correct
  double acc_amb = 0.0;  // ambiguous subset
  double acc_dis = 0.0;  // disambiguated subset
  Metric s_dis;
  Metric s_amb;
  std::size_t n_amb = 0, n_dis = 0;
  std::size_t biased_amb = 0, non_unknown_amb = 0;
  std::size_t biased_dis = 0, non_unknown_dis = 0;
};

/// s_DIS = 2 b/n - 1 over disambiguated items; s_AMB = (1 - ACC_amb)(2 b/n - 1)
/// over ambiguous items. Values in [-1, 1].
BiasScores bias_scores(const std::vector<EvalRecord>& records);

struct ClassificationRecord {
  int predicted = 0;  // 0 or 1
  int actual = 0;     // 0 or 1
  int group = 0;      // 0 (a) or 1 (b)
};

struct OddsMetrics {
  Metric eod;  // |TPR_a - TPR_b|
  Metric aod;  // (|FPR_a - FPR_b| + |TPR_a - TPR_b|) / 2
};

OddsMetrics eod_aod(const std::vector<ClassificationRecord>& records);

/// Balanced quadruples (ambiguous/disambiguated x negative/non-negative). The
/// negative question carries a concept planted toward group A; the
/// non-negative question carries a concept planted toward the other option's
/// group B, so a biased model answers A then B.
std::vector<BenchmarkExample> generate_benchmark(const AttributeSpec& attribute,
                                                 const Vocabulary& vocab,
                                                 const PlantedAssociationSpec& planted,
                                                 std::size_t n_examples, std::uint64_t seed);

void save_benchmark(const std::vector<BenchmarkExample>& examples, const std::filesystem::path& path);
std::vector<BenchmarkExample> load_benchmark(const std::filesystem::path& path, int unknown_token);

/// Association-free multiple-choice prompts: a fact cue with its answer and
/// two distractor answers.
struct ControlExample {
  std::vector<int> prompt;
  std::vector<std::vector<int>> options;
  std::size_t gold = 0;
};

std::vector<ControlExample> generate_control_set(const Vocabulary& vocab,
                                                 const PlantedAssociationSpec& planted,
                                                 std::size_t n_examples, std::uint64_t seed);

std::size_t choose_control_option(const OptionScorer& scorer, const ControlExample& example);

/// Scorer backed by sequence_log_likelihood with optional hooks.
OptionScorer log_likelihood_scorer(const ModelWeights& model, const InterventionHooks* hooks = nullptr);

const char* to_string(Condition c);
const char* to_string(Polarity p);

}  // namespace fairmed

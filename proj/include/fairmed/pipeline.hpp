#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fairmed/corpus.hpp"
#include "fairmed/evalharness.hpp"
#include "fairmed/mediator.hpp"
#include "fairmed/model.hpp"
#include "fairmed/prober.hpp"
#include "json.hpp"

namespace fairmed {

/// Everything a command needs. JSON keys are the field names; CLI flags are
/// their kebab-case mirrors.
struct RunConfig {
  std::filesystem::path model_dir;
  std::filesystem::path corpus;
  std::filesystem::path activations_dir;
  std::filesystem::path prober_dir;
  std::filesystem::path benchmark;
  std::filesystem::path out_dir = "out";

  ModelConfig model;
  std::size_t planted_layer = 4;
  double margin = 0.3;
  double context_copy = 0.8;

  std::size_t sentences_per_concept = 10;
  std::size_t benchmark_size = 240;
  double tune_fraction = 0.1;  // leading share of the benchmark used to tune lambda
  std::size_t control_size = 200;

  double val_ratio = 0.2;
  std::size_t prober_hidden = 0;  // 0 -> min(1024, 8 d_model)
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 0.001;

  std::optional<std::size_t> k;  // unset -> round(0.28 L)
  std::optional<double> lambda;  // unset -> tuned over lambda_grid
  double beta = 0.03;
  std::size_t iters = 20;
  double step_divisor = 15.0;
  Intervention ablation = Intervention::neutralize;

  std::vector<double> lambda_grid = {3, 4, 5, 6, 7, 8, 9};
  std::vector<std::size_t> k_grid;  // empty -> {k}
  std::size_t sweep_seeds = 5;

  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string prompt;  // space-separated token names for `mediate`

  void validate() const;
  std::uint64_t require_seed() const;
  std::size_t resolved_k() const;
  ProberHyper prober_hyper(std::uint64_t seed) const;
  PlantedAssociationSpec planted_spec(const Vocabulary& vocab) const;
  /// k, lambda (or the first grid value), neutralizer settings, intervention.
  MediationConfig mediation_template(std::uint64_t seed) const;
};

nlohmann::json to_json(const RunConfig& c);
/// Accepts a bare config object or a report carrying one under "config".
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric.
int exit_code_for(const std::exception& e);

struct TelemetrySummary {
  std::size_t calls = 0;
  double mean_iterations = 0.0;
  double mean_final_kl = 0.0;
};

struct MediatedRun {
  MediationConfig config;  // resolved
  BenchmarkRun run;
  TelemetrySummary telemetry;
};

MediatedRun run_mediated(const ModelWeights& model, const ProberSet& probers, MediationConfig cfg,
                         const std::vector<BenchmarkExample>& examples, std::size_t threads);

struct ControlAgreement {
  std::size_t n = 0;
  std::size_t agree = 0;
  std::size_t correct_unmediated = 0;
  std::size_t correct_mediated = 0;
  double rate() const { return n == 0 ? 1.0 : double(agree) / double(n); }
};

ControlAgreement control_agreement(const ModelWeights& model, const ProberSet& probers,
                                   const MediationConfig& cfg, const std::vector<ControlExample>& set,
                                   std::size_t threads);

/// Splits the benchmark into a tuning prefix (whole quadruples) and the rest.
std::pair<std::vector<BenchmarkExample>, std::vector<BenchmarkExample>> split_for_tuning(
    const std::vector<BenchmarkExample>& bench, double tune_fraction);

struct Evaluation {
  std::uint64_t seed = 0;
  std::vector<double> f1_per_layer;
  std::optional<LambdaSearch> lambda_search;
  std::size_t tuning_examples = 0;
  std::vector<BenchmarkExample> eval_set;
  BenchmarkRun unmediated;
  MediatedRun mediated;
  ControlAgreement control;
  std::map<std::string, double> timing_ms;
};

/// Tunes lambda on the tuning prefix when cfg.lambda is unset (then scores
/// the remainder), otherwise scores the whole benchmark.
Evaluation evaluate(const ModelWeights& model, const ProberSet& probers,
                    const std::vector<BenchmarkExample>& bench, const RunConfig& cfg, std::uint64_t seed);

/// Planted model, corpus, activations, probers and benchmark for one seed.
struct SeedArtifacts {
  ModelWeights model;
  AttributeSpec attribute;
  std::vector<CorpusEntry> corpus;
  ProberSet probers;
  std::vector<BenchmarkExample> benchmark;
  std::map<std::string, double> timing_ms;
};
SeedArtifacts prepare_seed(const RunConfig& cfg, std::uint64_t seed);

std::vector<CorpusEntry> default_corpus(const ModelWeights& model, std::size_t sentences_per_concept,
                                        std::uint64_t seed);

nlohmann::json to_json(const Metric& m);
nlohmann::json to_json(const BiasScores& s);
nlohmann::json report_json(const Evaluation& ev, const RunConfig& cfg);

std::string csv_header();
/// Scores as percentages in [-100, 100]; undefined metrics are empty cells.
std::string csv_row(const std::string& attribute, const std::string& method, double lambda, std::size_t k,
                    std::uint64_t seed, const BiasScores& s);

/// Bar chart of F1 per layer; selected layers drawn in a second colour.
std::string f1_chart_svg(const std::vector<double>& f1, const std::vector<std::size_t>& selected);

// Commands. Each logs plain lines to `log` and throws on failure; failures
// name the stage that raised them.
void cmd_build_model(const RunConfig& cfg, std::ostream& log);
void cmd_gen_corpus(const RunConfig& cfg, std::ostream& log);
void cmd_collect(const RunConfig& cfg, std::ostream& log);
void cmd_train_probers(const RunConfig& cfg, std::ostream& log);
void cmd_mediate(const RunConfig& cfg, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);
void cmd_pipeline(const RunConfig& cfg, std::ostream& log);
void cmd_sweep(const RunConfig& cfg, std::ostream& log);

}  // namespace fairmed

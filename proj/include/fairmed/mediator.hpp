#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "fairmed/evalharness.hpp"
#include "fairmed/neutralizer.hpp"
#include "fairmed/prober.hpp"
#include "json.hpp"

namespace fairmed {

/// Replacement for the neutralizer in ablation runs.
enum class Intervention { neutralize, fgsm, random };
const char* intervention_name(Intervention i);
/// Accepts "neutralize" (alias "pgd"), "fgsm", "random".
Intervention parse_intervention(const std::string& s);

struct MediationConfig {
  std::size_t k = 0;
  double lambda = 4.0;
  NeutralizerConfig neutralizer;
  std::vector<std::size_t> selected_layers;    // ascending, 0-based
  std::map<std::size_t, double> per_layer_eps;  // layer -> lambda * std^l
  Intervention intervention = Intervention::neutralize;

  /// Default k for an L-layer model: round(0.28 L).
  static std::size_t default_k(std::size_t n_layers);
  /// Fills selected_layers and per_layer_eps from prober reports and stds.
  void resolve(const ProberSet& probers);
};

nlohmann::json to_json(const MediationConfig& cfg);
MediationConfig mediation_config_from_json(const nlohmann::json& j);

/// Indices of the k highest F1 scores (ties -> lower layer), ascending.
std::vector<std::size_t> select_layers(const std::vector<ProberReport>& reports, std::size_t k);

/// Per-call diagnostics accumulated across hooked forward passes.
class Telemetry {
 public:
  void record(std::size_t iterations, double final_loss);
  std::size_t calls() const;
  double mean_iterations() const;
  double mean_final_kl() const;
  void merge(const Telemetry& other);

 private:
  mutable std::mutex mu_;
  std::size_t calls_ = 0;
  double iterations_ = 0.0;
  double final_kl_ = 0.0;
};

/// Hooks replacing each selected layer's last-token activation with its
/// neutralized (or ablated) version. The neutralizer seed for a call is
/// derived from cfg seed, layer and the activation itself.
InterventionHooks make_mediation_hooks(const ProberSet& probers, const MediationConfig& cfg,
                                       Telemetry* telemetry = nullptr);

Vector mediated_distribution(const ModelWeights& model, std::span<const int> tokens,
                             const ProberSet& probers, const MediationConfig& cfg,
                             Telemetry* telemetry = nullptr);

struct BenchmarkRun {
  std::vector<std::size_t> choices;
  std::vector<EvalRecord> records;
  BiasScores scores;
};

/// Scores every example (optionally mediated); example-parallel, index-ordered.
BenchmarkRun run_benchmark(const ModelWeights& model, const std::vector<BenchmarkExample>& examples,
                           const ProberSet* probers, const MediationConfig* cfg, std::size_t threads,
                           Telemetry* telemetry = nullptr);

double tuning_objective(const BiasScores& s);

struct LambdaSearch {
  double lambda = 0.0;
  std::vector<std::pair<double, double>> objective_by_lambda;
};

/// Minimizes |s_DIS| + |s_AMB| over the grid on the tuning set; ties -> smaller
/// lambda. Undefined scores count as 0.
LambdaSearch tune_lambda(const ModelWeights& model, const ProberSet& probers,
                         const MediationConfig& cfg_template,
                         const std::vector<BenchmarkExample>& tuning_set,
                         const std::vector<double>& grid, std::size_t threads = 1);

/// lambda grid 3, 4, ..., 9
std::vector<double> default_lambda_grid();

}  // namespace fairmed

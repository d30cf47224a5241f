#include "fairmed/mediator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "fairmed/errors.hpp"
#include "fairmed/parallel.hpp"
#include "fairmed/rng.hpp"

namespace fairmed {

using nlohmann::json;

std::size_t MediationConfig::default_k(std::size_t n_layers) {
  return static_cast<std::size_t>(std::lround(0.28 * double(n_layers)));
}

void MediationConfig::resolve(const ProberSet& probers) {
  selected_layers = select_layers(probers.reports, k);
  per_layer_eps.clear();
  for (std::size_t l : selected_layers) per_layer_eps[l] = compute_epsilon(probers.layer_std.at(l), lambda);
}

const char* intervention_name(Intervention i) {
  switch (i) {
    case Intervention::neutralize: return "neutralize";
    case Intervention::fgsm: return "fgsm";
    case Intervention::random: return "random";
  }
  return "neutralize";
}

Intervention parse_intervention(const std::string& s) {
  if (s == "neutralize" || s == "pgd") return Intervention::neutralize;
  if (s == "fgsm") return Intervention::fgsm;
  if (s == "random") return Intervention::random;
  throw InvalidArgument("unknown intervention '" + s + "'");
}

namespace {

std::uint64_t hash_activation(std::span<const float> m) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (float v : m) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix_seed(h ^ bits);
  }
  return h;
}

}  // namespace

json to_json(const MediationConfig& cfg) {
  json eps = json::object();
  for (auto [l, e] : cfg.per_layer_eps) eps[std::to_string(l)] = e;
  return {{"k", cfg.k},
          {"lambda", cfg.lambda},
          {"beta", cfg.neutralizer.beta},
          {"iters", cfg.neutralizer.iters},
          {"step_divisor", cfg.neutralizer.step_divisor},
          {"seed", cfg.neutralizer.seed},
          {"selected_layers", cfg.selected_layers},
          {"per_layer_eps", eps},
          {"intervention", intervention_name(cfg.intervention)}};
}

MediationConfig mediation_config_from_json(const json& j) {
  MediationConfig cfg;
  try {
    cfg.k = j.at("k").get<std::size_t>();
    cfg.lambda = j.at("lambda").get<double>();
    cfg.neutralizer.beta = j.at("beta").get<double>();
    cfg.neutralizer.iters = j.at("iters").get<std::size_t>();
    cfg.neutralizer.step_divisor = j.at("step_divisor").get<double>();
    cfg.neutralizer.seed = j.at("seed").get<std::uint64_t>();
    cfg.selected_layers = j.value("selected_layers", std::vector<std::size_t>{});
    if (j.contains("per_layer_eps"))
      for (auto& [key, value] : j.at("per_layer_eps").items())
        cfg.per_layer_eps[std::stoul(key)] = value.get<double>();
    cfg.intervention = parse_intervention(j.value("intervention", std::string("neutralize")));
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("mediation config: ") + e.what());
  }
  cfg.neutralizer.validate();
  return cfg;
}

std::vector<std::size_t> select_layers(const std::vector<ProberReport>& reports, std::size_t k) {
  if (k > reports.size())
    throw InvalidArgument("select_layers: k=" + std::to_string(k) + " exceeds layer count " +
                          std::to_string(reports.size()));
  std::vector<ProberReport> sorted = reports;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ProberReport& a, const ProberReport& b) {
    if (a.f1 != b.f1) return a.f1 > b.f1;
    return a.layer < b.layer;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(sorted[i].layer);
  std::sort(out.begin(), out.end());
  return out;
}

void Telemetry::record(std::size_t iterations, double final_loss) {
  std::lock_guard lock(mu_);
  ++calls_;
  iterations_ += double(iterations);
  final_kl_ += final_loss;
}

std::size_t Telemetry::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

double Telemetry::mean_iterations() const {
  std::lock_guard lock(mu_);
  return calls_ ? iterations_ / double(calls_) : 0.0;
}

double Telemetry::mean_final_kl() const {
  std::lock_guard lock(mu_);
  return calls_ ? final_kl_ / double(calls_) : 0.0;
}

void Telemetry::merge(const Telemetry& other) {
  if (&other == this) throw InvalidArgument("telemetry: cannot merge into itself");
  std::scoped_lock lock(mu_, other.mu_);
  calls_ += other.calls_;
  iterations_ += other.iterations_;
  final_kl_ += other.final_kl_;
}

InterventionHooks make_mediation_hooks(const ProberSet& probers, const MediationConfig& cfg,
                                       Telemetry* telemetry) {
  InterventionHooks hooks;
  for (std::size_t layer : cfg.selected_layers) {
    if (layer >= probers.probers.size())
      throw InvalidArgument("mediation: no prober for selected layer " + std::to_string(layer));
    auto eps_it = cfg.per_layer_eps.find(layer);
    if (eps_it == cfg.per_layer_eps.end())
      throw InvalidArgument("mediation: no epsilon for selected layer " + std::to_string(layer));
    const Prober* prober = &probers.probers[layer];
    const float eps = static_cast<float>(eps_it->second);
    const NeutralizerConfig base = cfg.neutralizer;
    const Intervention mode = cfg.intervention;
    hooks.by_layer[layer] = [prober, eps, base, mode, telemetry](std::size_t l, std::span<const float> m) {
      const std::uint64_t call_seed = derive_seed(derive_seed(base.seed, l), hash_activation(m));
      switch (mode) {
        case Intervention::fgsm: {
          Vector out = neutralize_fgsm(m, *prober, eps);
          if (telemetry) telemetry->record(1, kl_to_uniform(prober_forward(*prober, out)));
          return out;
        }
        case Intervention::random: {
          Vector out = random_perturb(m, eps, call_seed);
          if (telemetry) telemetry->record(0, kl_to_uniform(prober_forward(*prober, out)));
          return out;
        }
        case Intervention::neutralize:
        default: {
          NeutralizerConfig c = base;
          c.seed = call_seed;
          NeutralizeResult r = neutralize(m, *prober, eps, c);
          if (telemetry) telemetry->record(r.iterations_used, r.final_loss);
          return std::move(r.activation);
        }
      }
    };
  }
  return hooks;
}

Vector mediated_distribution(const ModelWeights& model, std::span<const int> tokens,
                             const ProberSet& probers, const MediationConfig& cfg,
                             Telemetry* telemetry) {
  InterventionHooks hooks = make_mediation_hooks(probers, cfg, telemetry);
  return next_token_distribution(model, tokens, &hooks);
}

BenchmarkRun run_benchmark(const ModelWeights& model, const std::vector<BenchmarkExample>& examples,
                           const ProberSet* probers, const MediationConfig* cfg, std::size_t threads,
                           Telemetry* telemetry) {
  InterventionHooks hooks;
  if (probers && cfg) hooks = make_mediation_hooks(*probers, *cfg, telemetry);
  const OptionScorer scorer = log_likelihood_scorer(model, hooks.empty() ? nullptr : &hooks);
  BenchmarkRun run;
  run.choices.resize(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) { run.choices[i] = choose_option(scorer, examples[i]); });
  for (std::size_t i = 0; i < examples.size(); ++i) run.records.push_back(make_record(examples[i], run.choices[i]));
  run.scores = bias_scores(run.records);
  return run;
}

double tuning_objective(const BiasScores& s) {
  return s.s_dis.magnitude().value_or(0.0) + s.s_amb.magnitude().value_or(0.0);
}

LambdaSearch tune_lambda(const ModelWeights& model, const ProberSet& probers,
                         const MediationConfig& cfg_template,
                         const std::vector<BenchmarkExample>& tuning_set,
                         const std::vector<double>& grid, std::size_t threads) {
  if (grid.empty()) throw InvalidArgument("tune_lambda: empty grid");
  if (tuning_set.empty()) throw InvalidArgument("tune_lambda: empty tuning set");
  LambdaSearch out;
  double best = INFINITY;
  for (double lambda : grid) {
    MediationConfig cfg = cfg_template;
    cfg.lambda = lambda;
    cfg.resolve(probers);
    const double obj = tuning_objective(run_benchmark(model, tuning_set, &probers, &cfg, threads).scores);
    out.objective_by_lambda.emplace_back(lambda, obj);
    if (obj < best || (obj == best && lambda < out.lambda)) {
      best = obj;
      out.lambda = lambda;
    }
  }
  return out;
}

std::vector<double> default_lambda_grid() { return {3, 4, 5, 6, 7, 8, 9}; }

}  // namespace fairmed

// fairmed: command-line front end for the mediation pipeline.

#include <functional>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "fairmed/errors.hpp"
#include "fairmed/pipeline.hpp"

using namespace fairmed;

namespace {

using Apply = std::function<void(RunConfig&)>;

// Registers a flag whose value, when given, overrides the config file.
template <typename T, typename Set>
void flag(CLI::App& app, std::vector<Apply>& apply, const std::string& name, const std::string& help, Set set) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = app.add_option(name, *value, help);
  if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<std::size_t>>)
    opt->delimiter(',');
  apply.push_back([opt, value, set](RunConfig& c) {
    if (opt->count() > 0) set(c, *value);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stereotype-association probing and inference-time neutralization on a planted toy transformer"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "JSON run config (a previous report.json also works)");
  std::vector<Apply> apply;
  using P = std::string;
  flag<P>(app, apply, "--model-dir", "model directory", [](RunConfig& c, const P& v) { c.model_dir = v; });
  flag<P>(app, apply, "--corpus", "corpus JSONL", [](RunConfig& c, const P& v) { c.corpus = v; });
  flag<P>(app, apply, "--activations-dir", "activation dataset directory", [](RunConfig& c, const P& v) { c.activations_dir = v; });
  flag<P>(app, apply, "--prober-dir", "prober directory", [](RunConfig& c, const P& v) { c.prober_dir = v; });
  flag<P>(app, apply, "--benchmark", "benchmark JSONL", [](RunConfig& c, const P& v) { c.benchmark = v; });
  flag<P>(app, apply, "--out-dir", "report directory", [](RunConfig& c, const P& v) { c.out_dir = v; });

  using Z = std::size_t;
  flag<Z>(app, apply, "--vocab-size", "vocabulary size", [](RunConfig& c, Z v) { c.model.vocab_size = v; });
  flag<Z>(app, apply, "--d-model", "residual width", [](RunConfig& c, Z v) { c.model.d_model = v; });
  flag<Z>(app, apply, "--n-layers", "layer count", [](RunConfig& c, Z v) { c.model.n_layers = v; });
  flag<Z>(app, apply, "--n-heads", "attention heads", [](RunConfig& c, Z v) { c.model.n_heads = v; });
  flag<Z>(app, apply, "--d-ff", "MLP width", [](RunConfig& c, Z v) { c.model.d_ff = v; });
  flag<Z>(app, apply, "--max-seq", "maximum sequence length", [](RunConfig& c, Z v) { c.model.max_seq = v; });
  flag<Z>(app, apply, "--planted-layer", "0-based layer holding the planted associations", [](RunConfig& c, Z v) { c.planted_layer = v; });
  flag<double>(app, apply, "--margin", "planted probability gap", [](RunConfig& c, double v) { c.margin = v; });
  flag<double>(app, apply, "--context-copy", "group-copy head gain (0 disables)", [](RunConfig& c, double v) { c.context_copy = v; });
  flag<Z>(app, apply, "--sentences-per-concept", "corpus prompts per concept", [](RunConfig& c, Z v) { c.sentences_per_concept = v; });
  flag<Z>(app, apply, "--benchmark-size", "benchmark examples (multiple of 4)", [](RunConfig& c, Z v) { c.benchmark_size = v; });
  flag<double>(app, apply, "--tune-fraction", "benchmark share used to tune lambda", [](RunConfig& c, double v) { c.tune_fraction = v; });
  flag<Z>(app, apply, "--control-size", "control prompts (0 skips)", [](RunConfig& c, Z v) { c.control_size = v; });
  flag<double>(app, apply, "--val-ratio", "prober validation share", [](RunConfig& c, double v) { c.val_ratio = v; });
  flag<Z>(app, apply, "--prober-hidden", "prober hidden units (0 = min(1024, 8 d_model))", [](RunConfig& c, Z v) { c.prober_hidden = v; });
  flag<Z>(app, apply, "--epochs", "prober epochs", [](RunConfig& c, Z v) { c.epochs = v; });
  flag<Z>(app, apply, "--batch", "prober batch size", [](RunConfig& c, Z v) { c.batch = v; });
  flag<double>(app, apply, "--lr", "prober learning rate", [](RunConfig& c, double v) { c.lr = v; });
  flag<Z>(app, apply, "--k", "number of mediated layers", [](RunConfig& c, Z v) { c.k = v; });
  flag<double>(app, apply, "--lambda", "epsilon multiplier (unset: tuned)", [](RunConfig& c, double v) { c.lambda = v; });
  flag<double>(app, apply, "--beta", "early-stop KL threshold", [](RunConfig& c, double v) { c.beta = v; });
  flag<Z>(app, apply, "--iters", "neutralizer iterations", [](RunConfig& c, Z v) { c.iters = v; });
  flag<double>(app, apply, "--step-divisor", "alpha = eps / step-divisor", [](RunConfig& c, double v) { c.step_divisor = v; });
  flag<P>(app, apply, "--ablation", "neutralize | fgsm | random", [](RunConfig& c, const P& v) { c.ablation = parse_intervention(v); });
  flag<std::vector<double>>(app, apply, "--lambda-grid", "comma-separated lambdas",
                            [](RunConfig& c, const std::vector<double>& v) { c.lambda_grid = v; });
  flag<std::vector<Z>>(app, apply, "--k-grid", "comma-separated k values",
                       [](RunConfig& c, const std::vector<Z>& v) { c.k_grid = v; });
  flag<Z>(app, apply, "--sweep-seeds", "seeds per sweep cell", [](RunConfig& c, Z v) { c.sweep_seeds = v; });
  flag<std::uint64_t>(app, apply, "--seed", "base seed", [](RunConfig& c, std::uint64_t v) { c.seed = v; });
  flag<Z>(app, apply, "--threads", "example-level worker threads", [](RunConfig& c, Z v) { c.threads = v; });
  flag<P>(app, apply, "--prompt", "token names for mediate", [](RunConfig& c, const P& v) { c.prompt = v; });

  using Command = void (*)(const RunConfig&, std::ostream&);
  const std::pair<const char*, std::pair<Command, const char*>> commands[] = {
      {"build-model", {cmd_build_model, "build and save a planted model"}},
      {"gen-corpus", {cmd_gen_corpus, "write the probing corpus (and a benchmark if --benchmark is set)"}},
      {"collect", {cmd_collect, "collect per-layer MLP activations"}},
      {"train-probers", {cmd_train_probers, "train one prober per layer and report F1"}},
      {"mediate", {cmd_mediate, "group distribution for one prompt with and without mediation"}},
      {"evaluate", {cmd_evaluate, "benchmark scores unmediated and mediated"}},
      {"pipeline", {cmd_pipeline, "collect, train, select layers, evaluate, report"}},
      {"sweep", {cmd_sweep, "lambda x k grid over repeated seeds"}},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, entry] : commands) subs.push_back({app.add_subcommand(name, entry.second), entry.first});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    for (const Apply& a : apply) a(cfg);
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) fn(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}

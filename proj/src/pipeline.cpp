#include "fairmed/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "fairmed/errors.hpp"
#include "fairmed/io.hpp"
#include "fairmed/parallel.hpp"

namespace fairmed {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  model.validate();
  if (planted_layer >= model.n_layers) throw InvalidArgument("planted_layer must be < n_layers");
  if (!(margin > 0.0 && margin < 1.0)) throw InvalidArgument("margin must be in (0,1)");
  if (!(context_copy >= 0.0)) throw InvalidArgument("context_copy must be >= 0");
  if (sentences_per_concept == 0) throw InvalidArgument("sentences_per_concept must be >= 1");
  if (benchmark_size == 0 || benchmark_size % 4 != 0)
    throw InvalidArgument("benchmark_size must be a positive multiple of 4");
  if (!(tune_fraction >= 0.0 && tune_fraction < 1.0)) throw InvalidArgument("tune_fraction must be in [0,1)");
  if (!(val_ratio > 0.0 && val_ratio < 1.0)) throw InvalidArgument("val_ratio must be in (0,1)");
  if (epochs == 0 || batch == 0 || !(lr > 0.0)) throw InvalidArgument("epochs, batch and lr must be positive");
  if (k && *k > model.n_layers) throw InvalidArgument("k must be <= n_layers");
  if (lambda && !(*lambda >= 0.0)) throw InvalidArgument("lambda must be >= 0");
  if (!(beta > 0.0) || iters == 0 || !(step_divisor > 0.0))
    throw InvalidArgument("beta, iters and step_divisor must be positive");
  if (lambda_grid.empty()) throw InvalidArgument("lambda_grid must not be empty");
  for (double l : lambda_grid)
    if (!(l >= 0.0)) throw InvalidArgument("lambda_grid values must be >= 0");
  for (std::size_t kk : k_grid)
    if (kk > model.n_layers) throw InvalidArgument("k_grid values must be <= n_layers");
  if (sweep_seeds == 0) throw InvalidArgument("sweep_seeds must be >= 1");
  if (threads == 0) throw InvalidArgument("threads must be >= 1");
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw InvalidArgument("a seed is required (--seed or \"seed\" in the config)");
  return *seed;
}

std::size_t RunConfig::resolved_k() const { return k.value_or(MediationConfig::default_k(model.n_layers)); }

ProberHyper RunConfig::prober_hyper(std::uint64_t s) const {
  ProberHyper h;
  h.hidden = prober_hidden ? prober_hidden : ProberHyper::hidden_for(model.d_model);
  h.epochs = epochs;
  h.batch = batch;
  h.lr = lr;
  h.seed = s;
  return h;
}

PlantedAssociationSpec RunConfig::planted_spec(const Vocabulary& vocab) const {
  PlantedAssociationSpec spec = PlantedAssociationSpec::make_default(vocab, planted_layer, margin);
  spec.context_copy = context_copy;
  return spec;
}

MediationConfig RunConfig::mediation_template(std::uint64_t s) const {
  MediationConfig m;
  m.k = resolved_k();
  if (lambda) m.lambda = *lambda;
  m.neutralizer.beta = beta;
  m.neutralizer.iters = iters;
  m.neutralizer.step_divisor = step_divisor;
  m.neutralizer.seed = s;
  m.intervention = ablation;
  return m;
}

namespace {

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"model_dir", c.model_dir.string()},
          {"corpus", c.corpus.string()},
          {"activations_dir", c.activations_dir.string()},
          {"prober_dir", c.prober_dir.string()},
          {"benchmark", c.benchmark.string()},
          {"out_dir", c.out_dir.string()},
          {"model", to_json(c.model)},
          {"planted_layer", c.planted_layer},
          {"margin", c.margin},
          {"context_copy", c.context_copy},
          {"sentences_per_concept", c.sentences_per_concept},
          {"benchmark_size", c.benchmark_size},
          {"tune_fraction", c.tune_fraction},
          {"control_size", c.control_size},
          {"val_ratio", c.val_ratio},
          {"prober_hidden", c.prober_hidden},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"lr", c.lr},
          {"k", opt(c.k)},
          {"lambda", opt(c.lambda)},
          {"beta", c.beta},
          {"iters", c.iters},
          {"step_divisor", c.step_divisor},
          {"ablation", intervention_name(c.ablation)},
          {"lambda_grid", c.lambda_grid},
          {"k_grid", c.k_grid},
          {"sweep_seeds", c.sweep_seeds},
          {"seed", opt(c.seed)},
          {"threads", c.threads},
          {"prompt", c.prompt}};
}

RunConfig run_config_from_json(const json& in) {
  const json& j = (in.contains("config") && in.at("config").is_object()) ? in.at("config") : in;
  if (!j.is_object()) throw InvalidArgument("run config must be a JSON object");
  RunConfig c;
  const json known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw InvalidArgument("unknown config key '" + it.key() + "'");
  try {
    auto path = [&](const char* key, fs::path& out) {
      if (j.contains(key)) out = j.at(key).get<std::string>();
    };
    auto get = [&](const char* key, auto& out) {
      if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
    };
    auto get_opt = [&](const char* key, auto& out) {
      if (j.contains(key) && !j.at(key).is_null())
        out = j.at(key).get<typename std::decay_t<decltype(out)>::value_type>();
    };
    path("model_dir", c.model_dir);
    path("corpus", c.corpus);
    path("activations_dir", c.activations_dir);
    path("prober_dir", c.prober_dir);
    path("benchmark", c.benchmark);
    path("out_dir", c.out_dir);
    if (j.contains("model")) {
      const json& m = j.at("model");
      for (auto it = m.begin(); it != m.end(); ++it)
        if (!known["model"].contains(it.key())) throw InvalidArgument("unknown model key '" + it.key() + "'");
      c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.n_layers = m.value("n_layers", c.model.n_layers);
      c.model.n_heads = m.value("n_heads", c.model.n_heads);
      c.model.d_ff = m.value("d_ff", c.model.d_ff);
      c.model.max_seq = m.value("max_seq", c.model.max_seq);
    }
    get("planted_layer", c.planted_layer);
    get("margin", c.margin);
    get("context_copy", c.context_copy);
    get("sentences_per_concept", c.sentences_per_concept);
    get("benchmark_size", c.benchmark_size);
    get("tune_fraction", c.tune_fraction);
    get("control_size", c.control_size);
    get("val_ratio", c.val_ratio);
    get("prober_hidden", c.prober_hidden);
    get("epochs", c.epochs);
    get("batch", c.batch);
    get("lr", c.lr);
    get_opt("k", c.k);
    get_opt("lambda", c.lambda);
    get("beta", c.beta);
    get("iters", c.iters);
    get("step_divisor", c.step_divisor);
    if (j.contains("ablation")) c.ablation = parse_intervention(j.at("ablation").get<std::string>());
    get("lambda_grid", c.lambda_grid);
    get("k_grid", c.k_grid);
    get("sweep_seeds", c.sweep_seeds);
    get_opt("seed", c.seed);
    get("threads", c.threads);
    get("prompt", c.prompt);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("run config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  try {
    return run_config_from_json(read_json_file(path));
  } catch (const FormatError& e) {
    throw InvalidArgument(std::string("config file: ") + e.what());
  }
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvalidArgument*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  if (dynamic_cast<const json::exception*>(&e)) return 3;
  return 4;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

TelemetrySummary summarize(const Telemetry& t) { return {t.calls(), t.mean_iterations(), t.mean_final_kl()}; }

}  // namespace

MediatedRun run_mediated(const ModelWeights& model, const ProberSet& probers, MediationConfig cfg,
                         const std::vector<BenchmarkExample>& examples, std::size_t threads) {
  cfg.resolve(probers);
  Telemetry tel;
  MediatedRun out;
  out.run = run_benchmark(model, examples, &probers, &cfg, threads, &tel);
  out.config = std::move(cfg);
  out.telemetry = summarize(tel);
  return out;
}

ControlAgreement control_agreement(const ModelWeights& model, const ProberSet& probers,
                                   const MediationConfig& cfg, const std::vector<ControlExample>& set,
                                   std::size_t threads) {
  const InterventionHooks hooks = make_mediation_hooks(probers, cfg);
  const OptionScorer plain = log_likelihood_scorer(model);
  const OptionScorer mediated = log_likelihood_scorer(model, &hooks);
  std::vector<std::size_t> a(set.size()), b(set.size());
  parallel_for(set.size(), threads, [&](std::size_t i) {
    a[i] = choose_control_option(plain, set[i]);
    b[i] = choose_control_option(mediated, set[i]);
  });
  ControlAgreement c;
  c.n = set.size();
  for (std::size_t i = 0; i < set.size(); ++i) {
    c.agree += a[i] == b[i];
    c.correct_unmediated += a[i] == set[i].gold;
    c.correct_mediated += b[i] == set[i].gold;
  }
  return c;
}

std::pair<std::vector<BenchmarkExample>, std::vector<BenchmarkExample>> split_for_tuning(
    const std::vector<BenchmarkExample>& bench, double tune_fraction) {
  std::size_t n_tune = 4 * static_cast<std::size_t>(std::lround(tune_fraction * double(bench.size()) / 4.0));
  if (tune_fraction > 0.0 && n_tune == 0) n_tune = 4;
  if (n_tune >= bench.size()) throw InvalidArgument("tuning split leaves no evaluation examples");
  return {std::vector<BenchmarkExample>(bench.begin(), bench.begin() + long(n_tune)),
          std::vector<BenchmarkExample>(bench.begin() + long(n_tune), bench.end())};
}

Evaluation evaluate(const ModelWeights& model, const ProberSet& probers,
                    const std::vector<BenchmarkExample>& bench, const RunConfig& cfg, std::uint64_t seed) {
  Evaluation ev;
  ev.seed = seed;
  for (const ProberReport& r : probers.reports) ev.f1_per_layer.push_back(r.f1);
  MediationConfig mc = cfg.mediation_template(seed);

  auto t0 = Clock::now();
  if (cfg.lambda) {
    ev.eval_set = bench;
  } else {
    auto [tune, rest] = split_for_tuning(bench, cfg.tune_fraction);
    if (tune.empty()) throw InvalidArgument("lambda is unset and tune_fraction is 0");
    ev.tuning_examples = tune.size();
    ev.lambda_search = tune_lambda(model, probers, mc, tune, cfg.lambda_grid, cfg.threads);
    mc.lambda = ev.lambda_search->lambda;
    ev.eval_set = std::move(rest);
  }
  ev.timing_ms["tune_lambda"] = ms_since(t0);

  t0 = Clock::now();
  ev.unmediated = run_benchmark(model, ev.eval_set, nullptr, nullptr, cfg.threads);
  ev.timing_ms["unmediated"] = ms_since(t0);

  t0 = Clock::now();
  ev.mediated = run_mediated(model, probers, mc, ev.eval_set, cfg.threads);
  ev.timing_ms["mediated"] = ms_since(t0);

  if (cfg.control_size > 0 && !model.planted.facts.empty()) {
    t0 = Clock::now();
    const auto control = generate_control_set(model.vocab, model.planted, cfg.control_size, seed);
    ev.control = control_agreement(model, probers, ev.mediated.config, control, cfg.threads);
    ev.timing_ms["control"] = ms_since(t0);
  }
  return ev;
}

std::vector<CorpusEntry> default_corpus(const ModelWeights& model, std::size_t sentences_per_concept,
                                        std::uint64_t seed) {
  std::vector<int> concepts;
  for (const PlantedAssociation& a : model.planted.associations) concepts.push_back(a.concept_token);
  if (concepts.empty()) concepts = model.vocab.concepts;
  return generate_corpus(AttributeSpec::from_vocabulary(model.vocab), model.vocab, concepts,
                         TemplateSet::make_default(model.vocab), sentences_per_concept, seed);
}

SeedArtifacts prepare_seed(const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeedArtifacts a;
  auto t0 = Clock::now();
  const Vocabulary vocab = Vocabulary::make_default(cfg.model.vocab_size);
  a.model = build_planted_model(cfg.model, vocab, cfg.planted_spec(vocab), seed);
  a.timing_ms["build_model"] = ms_since(t0);
  a.attribute = AttributeSpec::from_vocabulary(vocab);
  t0 = Clock::now();
  a.corpus = default_corpus(a.model, cfg.sentences_per_concept, seed);
  const CollectedActivations collected = collect_activations(a.model, a.corpus, a.attribute, cfg.threads);
  a.timing_ms["collect"] = ms_since(t0);
  t0 = Clock::now();
  a.probers = train_probers(collected, cfg.val_ratio, cfg.prober_hyper(seed), seed);
  a.timing_ms["train_probers"] = ms_since(t0);
  a.benchmark = generate_benchmark(a.attribute, vocab, a.model.planted, cfg.benchmark_size, seed);
  return a;
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const Metric& m) { return m.value ? json(*m.value) : json(nullptr); }

json to_json(const BiasScores& s) {
  json j = {{"acc", s.acc},
            {"acc_amb", s.acc_amb},
            {"acc_dis", s.acc_dis},
            {"s_dis", to_json(s.s_dis)},
            {"s_amb", to_json(s.s_amb)},
            {"n_amb", s.n_amb},
            {"n_dis", s.n_dis},
            {"biased_amb", s.biased_amb},
            {"non_unknown_amb", s.non_unknown_amb},
            {"biased_dis", s.biased_dis},
            {"non_unknown_dis", s.non_unknown_dis}};
  if (!s.s_dis.defined()) j["s_dis_reason"] = s.s_dis.reason;
  if (!s.s_amb.defined()) j["s_amb_reason"] = s.s_amb.reason;
  return j;
}

json report_json(const Evaluation& ev, const RunConfig& cfg) {
  json j;
  j["config"] = to_json(cfg);
  j["seed"] = ev.seed;
  j["f1_per_layer"] = ev.f1_per_layer;
  j["selected_layers"] = ev.mediated.config.selected_layers;
  j["mediation"] = to_json(ev.mediated.config);
  if (ev.lambda_search) {
    json grid = json::array();
    for (auto [l, o] : ev.lambda_search->objective_by_lambda) grid.push_back({{"lambda", l}, {"objective", o}});
    j["lambda_search"] = {{"chosen", ev.lambda_search->lambda}, {"tuning_examples", ev.tuning_examples}, {"grid", grid}};
  } else {
    j["lambda_search"] = nullptr;
  }
  j["eval_examples"] = ev.eval_set.size();
  j["unmediated"] = to_json(ev.unmediated.scores);
  j["mediated"] = to_json(ev.mediated.run.scores);
  j["telemetry"] = {{"calls", ev.mediated.telemetry.calls},
                    {"mean_iters", ev.mediated.telemetry.mean_iterations},
                    {"mean_final_kl", ev.mediated.telemetry.mean_final_kl}};
  j["control"] = {{"n", ev.control.n},
                  {"agreement", ev.control.rate()},
                  {"correct_unmediated", ev.control.correct_unmediated},
                  {"correct_mediated", ev.control.correct_mediated}};
  j["timing_ms"] = ev.timing_ms;
  json ex = json::array();
  for (std::size_t i = 0; i < ev.eval_set.size(); ++i) {
    const BenchmarkExample& e = ev.eval_set[i];
    ex.push_back({{"condition", to_string(e.condition)},
                  {"polarity", to_string(e.polarity)},
                  {"gold", e.gold},
                  {"stereotyped_option", e.stereotyped_option},
                  {"unmediated", ev.unmediated.choices[i]},
                  {"mediated", ev.mediated.run.choices[i]}});
  }
  j["examples"] = ex;
  return j;
}

namespace {

std::string pct(const Metric& m) {
  if (!m.value) return "";
  std::ostringstream os;
  os << std::setprecision(6) << 100.0 * *m.value;
  return os.str();
}

std::string fmt_pct(const Metric& m) {
  if (!m.value) return "undefined (" + m.reason + ")";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * *m.value << "%";
  return os.str();
}

}  // namespace

std::string csv_header() { return "attribute,method,lambda,k,seed,acc_pct,s_dis_pct,s_amb_pct"; }

std::string csv_row(const std::string& attribute, const std::string& method, double lambda, std::size_t k,
                    std::uint64_t seed, const BiasScores& s) {
  std::ostringstream os;
  os << attribute << ',' << method << ',' << lambda << ',' << k << ',' << seed << ','
     << std::setprecision(6) << 100.0 * s.acc << ',' << pct(s.s_dis) << ',' << pct(s.s_amb);
  return os.str();
}

std::string f1_chart_svg(const std::vector<double>& f1, const std::vector<std::size_t>& selected) {
  const int bar = 40, gap = 16, left = 50, top = 30, plot_h = 200;
  const int width = left + int(f1.size()) * (bar + gap) + 20;
  const int height = top + plot_h + 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">Prober F1 per layer</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h - plot_h * t / 4.0;
    os << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << std::fixed
       << std::setprecision(2) << t / 4.0 << "</text>\n";
  }
  for (std::size_t l = 0; l < f1.size(); ++l) {
    const bool sel = std::find(selected.begin(), selected.end(), l) != selected.end();
    const double v = std::clamp(f1[l], 0.0, 1.0);
    const double h = plot_h * v;
    const int x = left + gap / 2 + int(l) * (bar + gap);
    os << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar << "\" height=\"" << h
       << "\" fill=\"" << (sel ? "#c0392b" : "#7f8c8d") << "\"/>\n";
    os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + plot_h - h - 4 << "\" text-anchor=\"middle\">"
       << std::setprecision(2) << f1[l] << "</text>\n";
    os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">" << l
       << "</text>\n";
  }
  os << "<text x=\"" << left + (width - left) / 2 << "\" y=\"" << height - 10
     << "\" text-anchor=\"middle\">layer (selected layers in red)</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Rethrows with the stage name prefixed, keeping the exception category.
template <typename F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  const std::string p = std::string("stage '") + name + "': ";
  try {
    return fn();
  } catch (const FormatError& e) {
    throw FormatError(p + e.what(), e.offset());
  } catch (const ConstructionFailed& e) {
    throw ConstructionFailed(p + e.what());
  } catch (const NumericError& e) {
    throw NumericError(p + e.what());
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(p + e.what());
  } catch (const fs::filesystem_error& e) {
    throw FormatError(p + e.what());
  } catch (const json::exception& e) {
    throw FormatError(p + e.what());
  } catch (const std::exception& e) {
    throw NumericError(p + e.what());
  }
}

void need(const fs::path& p, const char* what) {
  if (p.empty()) throw InvalidArgument(std::string("missing required path: ") + what);
}

void need_existing(const fs::path& p, const char* what) {
  need(p, what);
  if (!fs::exists(p)) throw InvalidArgument(std::string(what) + " does not exist: " + p.string());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw InvalidArgument("cannot write " + path.string());
}

void print_margins(const ModelWeights& m, std::ostream& log) {
  log << "concept       group         required  gap       ok\n";
  for (const MarginCheck& c : verify_planted_margins(m)) {
    log << std::left << std::setw(14) << m.vocab.names[std::size_t(c.concept_token)] << std::setw(14)
        << m.vocab.names[std::size_t(c.group_token)] << std::fixed << std::setprecision(4) << std::setw(10)
        << c.required << std::setw(10) << c.gap << (c.ok() ? "yes" : "NO") << '\n';
  }
  log.unsetf(std::ios::fixed);
  log << std::right;
}

void print_f1(const ProberSet& ps, std::ostream& log) {
  log << "layer  f1      val_loss  std\n";
  for (std::size_t l = 0; l < ps.reports.size(); ++l)
    log << std::setw(5) << l << "  " << std::fixed << std::setprecision(4) << ps.reports[l].f1 << "  "
        << std::setw(8) << ps.reports[l].val_loss << "  " << ps.layer_std[l] << '\n';
  log.unsetf(std::ios::fixed);
}

std::vector<BenchmarkExample> benchmark_for(const RunConfig& cfg, const ModelWeights& model, std::uint64_t seed,
                                            std::ostream& log) {
  if (!cfg.benchmark.empty() && fs::exists(cfg.benchmark)) {
    log << "loading benchmark " << cfg.benchmark << '\n';
    return load_benchmark(cfg.benchmark, model.vocab.unknown);
  }
  log << "generating " << cfg.benchmark_size << " benchmark examples\n";
  return generate_benchmark(AttributeSpec::from_vocabulary(model.vocab), model.vocab, model.planted,
                            cfg.benchmark_size, seed);
}

void write_outputs(const Evaluation& ev, const RunConfig& cfg, const std::string& attribute, std::ostream& log) {
  fs::create_directories(cfg.out_dir);
  write_json_file(report_json(ev, cfg), cfg.out_dir / "report.json");
  std::ostringstream csv;
  csv << csv_header() << '\n'
      << csv_row(attribute, "unmediated", 0.0, 0, ev.seed, ev.unmediated.scores) << '\n'
      << csv_row(attribute, intervention_name(ev.mediated.config.intervention), ev.mediated.config.lambda,
                 ev.mediated.config.k, ev.seed, ev.mediated.run.scores)
      << '\n';
  write_text(cfg.out_dir / "results.csv", csv.str());
  write_text(cfg.out_dir / "f1_layers.svg", f1_chart_svg(ev.f1_per_layer, ev.mediated.config.selected_layers));

  const BiasScores& u = ev.unmediated.scores;
  const BiasScores& m = ev.mediated.run.scores;
  log << "selected layers:";
  for (std::size_t l : ev.mediated.config.selected_layers) log << ' ' << l;
  log << "  lambda " << ev.mediated.config.lambda << "  (" << intervention_name(ev.mediated.config.intervention)
      << ")\n";
  log << "unmediated  acc " << std::fixed << std::setprecision(2) << 100 * u.acc << "%  s_dis " << fmt_pct(u.s_dis)
      << "  s_amb " << fmt_pct(u.s_amb) << '\n';
  log << "mediated    acc " << 100 * m.acc << "%  s_dis " << fmt_pct(m.s_dis) << "  s_amb " << fmt_pct(m.s_amb)
      << '\n';
  log << "telemetry   calls " << ev.mediated.telemetry.calls << "  mean iterations " << std::setprecision(3)
      << ev.mediated.telemetry.mean_iterations << "  mean final KL " << std::setprecision(5)
      << ev.mediated.telemetry.mean_final_kl << '\n';
  if (ev.control.n > 0)
    log << "control     agreement " << std::setprecision(2) << 100 * ev.control.rate() << "% of " << ev.control.n
        << '\n';
  log.unsetf(std::ios::fixed);
  log << "wrote " << (cfg.out_dir / "report.json").string() << ", results.csv, f1_layers.svg\n";
}

}  // namespace

void cmd_build_model(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need(cfg.model_dir, "model_dir");
  const std::uint64_t seed = cfg.require_seed();
  auto t0 = Clock::now();
  const ModelWeights m = stage("build-model", [&] {
    const Vocabulary vocab = Vocabulary::make_default(cfg.model.vocab_size);
    return build_planted_model(cfg.model, vocab, cfg.planted_spec(vocab), seed);
  });
  stage("save-model", [&] { save_model(m, cfg.model_dir); });
  print_margins(m, log);
  log << "built model in " << std::llround(ms_since(t0)) << " ms -> " << cfg.model_dir.string() << '\n';
}

void cmd_gen_corpus(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.model_dir, "model_dir");
  need(cfg.corpus, "corpus");
  const std::uint64_t seed = cfg.require_seed();
  const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
  stage("gen-corpus", [&] {
    const auto corpus = default_corpus(m, cfg.sentences_per_concept, seed);
    save_corpus(corpus, cfg.corpus);
    log << "wrote " << corpus.size() << " corpus entries -> " << cfg.corpus.string() << '\n';
  });
  if (!cfg.benchmark.empty())
    stage("gen-benchmark", [&] {
      const auto bench = generate_benchmark(AttributeSpec::from_vocabulary(m.vocab), m.vocab, m.planted,
                                            cfg.benchmark_size, seed);
      save_benchmark(bench, cfg.benchmark);
      log << "wrote " << bench.size() << " benchmark examples -> " << cfg.benchmark.string() << '\n';
    });
}

void cmd_collect(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.model_dir, "model_dir");
  need_existing(cfg.corpus, "corpus");
  need(cfg.activations_dir, "activations_dir");
  const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
  const auto corpus = stage("load-corpus", [&] {
    auto c = load_corpus(cfg.corpus);
    validate_corpus(c, m.vocab);
    return c;
  });
  stage("collect", [&] {
    const auto collected = collect_activations(m, corpus, AttributeSpec::from_vocabulary(m.vocab), cfg.threads);
    save_collected(collected, cfg.activations_dir);
    log << "collected " << collected.labels.size() << " prompts x " << collected.layers.size() << " layers -> "
        << cfg.activations_dir.string() << '\n';
  });
}

void cmd_train_probers(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.activations_dir, "activations_dir");
  need(cfg.prober_dir, "prober_dir");
  const std::uint64_t seed = cfg.require_seed();
  const auto collected = stage("load-activations", [&] { return load_collected(cfg.activations_dir); });
  ProberSet ps = stage("train-probers", [&] { return train_probers(collected, cfg.val_ratio, cfg.prober_hyper(seed), seed); });
  if (!cfg.model_dir.empty() && fs::exists(cfg.model_dir)) {
    const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
    for (int g : m.vocab.groups) ps.group_names.push_back(m.vocab.names[std::size_t(g)]);
    if (ps.group_names.size() != ps.probers.front().n_groups()) ps.group_names.clear();
  }
  stage("save-probers", [&] { save_probers(ps, cfg.prober_dir); });
  print_f1(ps, log);
  log << "wrote probers -> " << cfg.prober_dir.string() << '\n';
}

void cmd_mediate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.model_dir, "model_dir");
  need_existing(cfg.prober_dir, "prober_dir");
  if (cfg.prompt.empty()) throw InvalidArgument("mediate needs --prompt (space-separated token names)");
  const std::uint64_t seed = cfg.require_seed();
  const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
  const ProberSet ps = stage("load-probers", [&] { return load_probers(cfg.prober_dir); });
  std::vector<int> tokens;
  std::istringstream words(cfg.prompt);
  for (std::string w; words >> w;) tokens.push_back(m.vocab.id(w));
  if (tokens.empty() || tokens.front() != m.vocab.bos) tokens.insert(tokens.begin(), m.vocab.bos);

  stage("mediate", [&] {
    MediationConfig mc = cfg.mediation_template(seed);
    mc.resolve(ps);
    Telemetry tel;
    const Vector before = group_probabilities(next_token_distribution(m, tokens), m.vocab.groups);
    const Vector after = group_probabilities(mediated_distribution(m, tokens, ps, mc, &tel), m.vocab.groups);
    json groups = json::array();
    log << "group         unmediated  mediated\n";
    for (std::size_t g = 0; g < m.vocab.groups.size(); ++g) {
      const std::string& name = m.vocab.names[std::size_t(m.vocab.groups[g])];
      log << std::left << std::setw(14) << name << std::right << std::fixed << std::setprecision(4) << std::setw(10)
          << before[g] << std::setw(10) << after[g] << '\n';
      groups.push_back({{"group", name}, {"unmediated", before[g]}, {"mediated", after[g]}});
    }
    log << "KL to uniform " << kl_to_uniform(before) << " -> " << kl_to_uniform(after) << "  mean iterations "
        << tel.mean_iterations() << '\n';
    log.unsetf(std::ios::fixed);
    json out = {{"config", to_json(cfg)},
                {"tokens", tokens},
                {"mediation", to_json(mc)},
                {"groups", groups},
                {"kl_unmediated", kl_to_uniform(before)},
                {"kl_mediated", kl_to_uniform(after)},
                {"telemetry", {{"calls", tel.calls()}, {"mean_iters", tel.mean_iterations()},
                               {"mean_final_kl", tel.mean_final_kl()}}}};
    write_json_file(out, cfg.out_dir / "mediate.json");
  });
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.model_dir, "model_dir");
  need_existing(cfg.prober_dir, "prober_dir");
  const std::uint64_t seed = cfg.require_seed();
  auto t0 = Clock::now();
  const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
  const ProberSet ps = stage("load-probers", [&] { return load_probers(cfg.prober_dir); });
  const auto bench = stage("benchmark", [&] { return benchmark_for(cfg, m, seed, log); });
  Evaluation ev = stage("evaluate", [&] { return evaluate(m, ps, bench, cfg, seed); });
  ev.timing_ms["total"] = ms_since(t0);
  stage("report", [&] { write_outputs(ev, cfg, m.vocab.attribute, log); });
}

void cmd_pipeline(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  need_existing(cfg.model_dir, "model_dir");
  need_existing(cfg.corpus, "corpus");
  const std::uint64_t seed = cfg.require_seed();
  const auto t_all = Clock::now();
  std::map<std::string, double> timing;
  auto t0 = Clock::now();
  const ModelWeights m = stage("load-model", [&] { return load_model(cfg.model_dir); });
  const auto corpus = stage("load-corpus", [&] {
    auto c = load_corpus(cfg.corpus);
    validate_corpus(c, m.vocab);
    return c;
  });
  timing["load"] = ms_since(t0);

  t0 = Clock::now();
  const auto collected = stage("collect", [&] {
    auto c = collect_activations(m, corpus, AttributeSpec::from_vocabulary(m.vocab), cfg.threads);
    if (!cfg.activations_dir.empty()) save_collected(c, cfg.activations_dir);
    return c;
  });
  timing["collect"] = ms_since(t0);
  log << "collected " << collected.labels.size() << " prompts x " << collected.layers.size() << " layers\n";

  t0 = Clock::now();
  ProberSet ps = stage("train-probers", [&] {
    return train_probers(collected, cfg.val_ratio, cfg.prober_hyper(seed), seed);
  });
  for (int g : m.vocab.groups) ps.group_names.push_back(m.vocab.names[std::size_t(g)]);
  if (!cfg.prober_dir.empty()) stage("save-probers", [&] { save_probers(ps, cfg.prober_dir); });
  timing["train_probers"] = ms_since(t0);
  print_f1(ps, log);

  const auto bench = stage("benchmark", [&] { return benchmark_for(cfg, m, seed, log); });
  Evaluation ev = stage("evaluate", [&] { return evaluate(m, ps, bench, cfg, seed); });
  ev.timing_ms.insert(timing.begin(), timing.end());
  ev.timing_ms["total"] = ms_since(t_all);
  stage("report", [&] { write_outputs(ev, cfg, m.vocab.attribute, log); });
}

void cmd_sweep(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::uint64_t base_seed = cfg.require_seed();
  const std::vector<std::size_t> ks = cfg.k_grid.empty() ? std::vector<std::size_t>{cfg.resolved_k()} : cfg.k_grid;
  struct Cell {
    std::vector<double> acc, s_dis, s_amb;
  };
  std::map<std::pair<double, std::size_t>, Cell> cells;
  std::ostringstream csv;
  csv << csv_header() << '\n';
  for (std::size_t i = 0; i < cfg.sweep_seeds; ++i) {
    const std::uint64_t seed = base_seed + i;
    const SeedArtifacts a = stage("prepare", [&] { return prepare_seed(cfg, seed); });
    const std::string& attr = a.attribute.name;
    const BenchmarkRun un = stage("unmediated", [&] { return run_benchmark(a.model, a.benchmark, nullptr, nullptr, cfg.threads); });
    csv << csv_row(attr, "unmediated", 0.0, 0, seed, un.scores) << '\n';
    for (double lambda : cfg.lambda_grid)
      for (std::size_t k : ks) {
        MediationConfig mc = cfg.mediation_template(seed);
        mc.lambda = lambda;
        mc.k = k;
        const MediatedRun r = stage("mediated", [&] { return run_mediated(a.model, a.probers, mc, a.benchmark, cfg.threads); });
        csv << csv_row(attr, intervention_name(mc.intervention), lambda, k, seed, r.run.scores) << '\n';
        Cell& c = cells[{lambda, k}];
        c.acc.push_back(100 * r.run.scores.acc);
        if (r.run.scores.s_dis.value) c.s_dis.push_back(100 * *r.run.scores.s_dis.value);
        if (r.run.scores.s_amb.value) c.s_amb.push_back(100 * *r.run.scores.s_amb.value);
      }
    log << "seed " << seed << " done\n";
  }

  // Sample standard deviation over seeds; empty when fewer than two values.
  auto stats = [](const std::vector<double>& v) {
    std::ostringstream os;
    if (v.empty()) return std::string(",");
    double mean = 0.0;
    for (double x : v) mean += x / double(v.size());
    os << std::setprecision(6) << mean << ',';
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      os << std::sqrt(ss / double(v.size() - 1));
    }
    return os.str();
  };
  std::ostringstream summary;
  summary << "lambda,k,seeds,acc_pct_mean,acc_pct_std,s_dis_pct_mean,s_dis_pct_std,s_amb_pct_mean,s_amb_pct_std\n";
  log << "lambda  k  s_dis% mean,std      s_amb% mean,std\n";
  for (const auto& [key, c] : cells) {
    summary << key.first << ',' << key.second << ',' << c.acc.size() << ',' << stats(c.acc) << ','
            << stats(c.s_dis) << ',' << stats(c.s_amb) << '\n';
    log << std::setw(6) << key.first << std::setw(3) << key.second << "  " << std::setw(18) << stats(c.s_dis)
        << "  " << stats(c.s_amb) << '\n';
  }
  stage("report", [&] {
    write_text(cfg.out_dir / "sweep.csv", csv.str());
    write_text(cfg.out_dir / "sweep_summary.csv", summary.str());
    write_json_file({{"config", to_json(cfg)}}, cfg.out_dir / "sweep_config.json");
  });
  log << "wrote " << (cfg.out_dir / "sweep.csv").string() << " and sweep_summary.csv\n";
}

}  // namespace fairmed

#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "fairmed/errors.hpp"
#include "fairmed/mediator.hpp"
#include "test_util.hpp"

using namespace fairmed;

namespace {

std::vector<ProberReport> reports_from(const std::vector<double>& f1) {
  std::vector<ProberReport> r;
  for (std::size_t l = 0; l < f1.size(); ++l) r.push_back({l, f1[l], 0.0});
  return r;
}

MediationConfig resolved(const ProberSet& probers, std::size_t k, double lambda, std::uint64_t seed = 0) {
  MediationConfig cfg;
  cfg.k = k;
  cfg.lambda = lambda;
  cfg.neutralizer.seed = seed;
  cfg.resolve(probers);
  return cfg;
}

// Prompt of the first corpus sentence for a planted concept.
std::vector<int> planted_prompt(const SeedArtifacts& art, std::size_t which = 0) {
  const int concept_token = art.model.planted.associations.at(which).concept_token;
  for (const CorpusEntry& e : art.corpus)
    if (art.model.vocab.id(e.concept_name) == concept_token) return e.sentence;
  FAIL("no corpus sentence for the planted concept");
  return {};
}

}  // namespace

TEST_CASE("default k") {
  CHECK(MediationConfig::default_k(8) == 2);
  CHECK(MediationConfig::default_k(12) == 3);
  CHECK(MediationConfig::default_k(2) == 1);
  CHECK(MediationConfig::default_k(1) == 0);
  CHECK(MediationConfig::default_k(32) == 9);
}

TEST_CASE("select_layers examples") {
  auto r = reports_from({0.1, 0.9, 0.5, 0.9});
  CHECK(select_layers(r, 2) == std::vector<std::size_t>{1, 3});
  CHECK(select_layers(r, 1) == std::vector<std::size_t>{1});
  CHECK(select_layers(r, 3) == std::vector<std::size_t>{1, 2, 3});
  CHECK(select_layers(r, 0).empty());
  CHECK_THROWS_AS(select_layers(r, 5), InvalidArgument);
  CHECK(select_layers(reports_from({0.4, 0.4, 0.4}), 2) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("select_layers ignores report order") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> level(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> f1(3 + trial % 10);
    for (double& v : f1) v = 0.25 * level(rng);  // coarse levels force ties
    auto r = reports_from(f1);
    const std::size_t k = std::size_t(trial) % (f1.size() + 1);
    auto expected = select_layers(r, k);
    std::shuffle(r.begin(), r.end(), rng);
    CHECK(select_layers(r, k) == expected);
    // Oracle: every chosen layer beats or ties every unchosen one, lower layer on ties.
    for (std::size_t a : expected)
      for (std::size_t b = 0; b < f1.size(); ++b)
        if (std::find(expected.begin(), expected.end(), b) == expected.end())
          CHECK((f1[a] > f1[b] || (f1[a] == f1[b] && a < b)));
  }
}

TEST_CASE("mediation config JSON round trip") {
  MediationConfig cfg;
  cfg.k = 2;
  cfg.lambda = 6.5;
  cfg.neutralizer.beta = 0.05;
  cfg.neutralizer.iters = 12;
  cfg.neutralizer.step_divisor = 10.0;
  cfg.neutralizer.seed = 77;
  cfg.selected_layers = {3, 4};
  cfg.per_layer_eps = {{3, 1.25}, {4, 2.5}};
  cfg.intervention = Intervention::fgsm;
  MediationConfig back = mediation_config_from_json(to_json(cfg));
  CHECK(back.k == 2);
  CHECK(back.lambda == 6.5);
  CHECK(back.neutralizer.beta == 0.05);
  CHECK(back.neutralizer.iters == 12);
  CHECK(back.neutralizer.step_divisor == 10.0);
  CHECK(back.neutralizer.seed == 77);
  CHECK(back.selected_layers == cfg.selected_layers);
  CHECK(back.per_layer_eps == cfg.per_layer_eps);
  CHECK(back.intervention == Intervention::fgsm);

  auto j = to_json(cfg);
  j.erase("lambda");
  CHECK_THROWS_AS(mediation_config_from_json(j), InvalidArgument);
  j = to_json(cfg);
  j["intervention"] = "dropout";
  CHECK_THROWS_AS(mediation_config_from_json(j), InvalidArgument);
  j = to_json(cfg);
  j["iters"] = 0;
  CHECK_THROWS_AS(mediation_config_from_json(j), InvalidArgument);
}

TEST_CASE("intervention names") {
  for (Intervention i : {Intervention::neutralize, Intervention::fgsm, Intervention::random})
    CHECK(parse_intervention(intervention_name(i)) == i);
  CHECK(parse_intervention("pgd") == Intervention::neutralize);
  CHECK_THROWS_AS(parse_intervention("PGD"), InvalidArgument);
}

TEST_CASE("telemetry") {
  Telemetry a, b;
  CHECK(a.mean_iterations() == 0.0);
  a.record(4, 0.5);
  a.record(2, 0.1);
  b.record(6, 0.0);
  CHECK(a.calls() == 2);
  CHECK(a.mean_iterations() == 3.0);
  CHECK(a.mean_final_kl() == doctest::Approx(0.3));
  a.merge(b);
  CHECK(a.calls() == 3);
  CHECK(a.mean_iterations() == 4.0);
  CHECK(a.mean_final_kl() == doctest::Approx(0.2));
  CHECK_THROWS_AS(a.merge(a), InvalidArgument);
}

TEST_CASE("k = 0 and eps = 0 leave the model untouched") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  const std::vector<int> prompt = planted_prompt(art);
  const Vector plain = next_token_distribution(art.model, prompt);

  MediationConfig none = resolved(art.probers, 0, 4.0);
  Telemetry t;
  CHECK(mediated_distribution(art.model, prompt, art.probers, none, &t) == plain);
  CHECK(t.calls() == 0);

  MediationConfig zero = resolved(art.probers, 2, 4.0);
  for (auto& [l, e] : zero.per_layer_eps) e = 0.0;
  CHECK(mediated_distribution(art.model, prompt, art.probers, zero) == plain);

  std::vector<BenchmarkExample> few(art.benchmark.begin(), art.benchmark.begin() + 8);
  BenchmarkRun base = run_benchmark(art.model, few, nullptr, nullptr, 1);
  CHECK(run_benchmark(art.model, few, &art.probers, &none, 1).choices == base.choices);
  CHECK(run_benchmark(art.model, few, &art.probers, &zero, 2).choices == base.choices);
}

TEST_CASE("mediation pulls planted group preferences toward uniform") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  const auto& groups = art.model.vocab.groups;
  MediationConfig cfg = resolved(art.probers, MediationConfig::default_k(art.model.config.n_layers), 4.0);
  CHECK(std::find(cfg.selected_layers.begin(), cfg.selected_layers.end(), art.model.planted.layer_to_plant) !=
        cfg.selected_layers.end());
  double before = 0.0, after = 0.0;
  const std::size_t n = art.model.planted.associations.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<int> prompt = planted_prompt(art, i);
    before += kl_to_uniform(group_probabilities(next_token_distribution(art.model, prompt), groups));
    Telemetry t;
    Vector med = mediated_distribution(art.model, prompt, art.probers, cfg, &t);
    CHECK(t.calls() == cfg.selected_layers.size());
    after += kl_to_uniform(group_probabilities(med, groups));
  }
  MESSAGE("mean group KL " << before / double(n) << " -> " << after / double(n));
  CHECK(after < 0.5 * before);
}

TEST_CASE("mediated outputs stay finite over the lambda grid") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  for (double lambda : default_lambda_grid())
    for (Intervention mode : {Intervention::neutralize, Intervention::fgsm, Intervention::random}) {
      MediationConfig cfg = resolved(art.probers, 2, lambda, 3);
      cfg.intervention = mode;
      for (std::size_t i = 0; i < 4; ++i) {
        Vector d = mediated_distribution(art.model, art.benchmark[i].prompt(), art.probers, cfg);
        double s = 0.0;
        for (float p : d) {
          CHECK(std::isfinite(p));
          s += p;
        }
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
    }
}

TEST_CASE("uniform probers leave nothing to remove") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  ProberSet flat = art.probers;
  for (Prober& p : flat.probers) p = Prober::zeros(p.input_dim(), 4, p.n_groups());
  MediationConfig cfg = resolved(flat, 2, 4.0);
  Telemetry t;
  Vector d = mediated_distribution(art.model, planted_prompt(art), flat, cfg, &t);
  CHECK(t.calls() == 2);
  CHECK(t.mean_iterations() == 0.0);
  CHECK(t.mean_final_kl() < 1e-12);
  for (float p : d) CHECK(std::isfinite(p));
}

TEST_CASE("hooks reject unknown layers") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  MediationConfig cfg = resolved(art.probers, 2, 4.0);
  cfg.selected_layers.push_back(99);
  CHECK_THROWS_AS(make_mediation_hooks(art.probers, cfg), InvalidArgument);
  cfg = resolved(art.probers, 2, 4.0);
  cfg.per_layer_eps.clear();
  CHECK_THROWS_AS(make_mediation_hooks(art.probers, cfg), InvalidArgument);
}

TEST_CASE("tune_lambda matches an exhaustive search") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  std::vector<BenchmarkExample> tuning(art.benchmark.begin(), art.benchmark.begin() + 24);
  MediationConfig tmpl;
  tmpl.k = 2;
  const std::vector<double> grid{9, 3, 6};

  LambdaSearch s = tune_lambda(art.model, art.probers, tmpl, tuning, grid, 2);
  REQUIRE(s.objective_by_lambda.size() == 3);
  double best = INFINITY, best_lambda = 0.0;
  for (double lambda : grid) {
    MediationConfig cfg = resolved(art.probers, 2, lambda);
    const BiasScores sc = run_benchmark(art.model, tuning, &art.probers, &cfg, 1).scores;
    const double obj = std::abs(sc.s_dis.value.value_or(0.0)) + std::abs(sc.s_amb.value.value_or(0.0));
    if (obj < best || (obj == best && lambda < best_lambda)) {
      best = obj;
      best_lambda = lambda;
    }
  }
  CHECK(s.lambda == best_lambda);

  CHECK(tune_lambda(art.model, art.probers, tmpl, tuning, {7}).lambda == 7);
  // With k = 0 every lambda ties and the smallest wins, whatever the grid order.
  tmpl.k = 0;
  CHECK(tune_lambda(art.model, art.probers, tmpl, tuning, {7, 3, 5}).lambda == 3);
  CHECK_THROWS_AS(tune_lambda(art.model, art.probers, tmpl, tuning, {}), InvalidArgument);
  CHECK_THROWS_AS(tune_lambda(art.model, art.probers, tmpl, {}, grid), InvalidArgument);
}

TEST_CASE("tuning objective treats undefined scores as zero") {
  BiasScores s;
  s.s_dis = Metric::of(-0.25);
  s.s_amb = Metric::undefined("no answers");
  CHECK(tuning_objective(s) == 0.25);
  s.s_amb = Metric::of(0.5);
  CHECK(tuning_objective(s) == 0.75);
}

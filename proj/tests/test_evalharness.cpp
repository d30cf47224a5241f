#include <fstream>
#include <map>

#include "doctest.h"
#include "fairmed/errors.hpp"
#include "fairmed/evalharness.hpp"
#include "fairmed/mediator.hpp"
#include "test_util.hpp"

using namespace fairmed;

namespace {

// Option 0 stereotyped, 1 the other group, 2 UNKNOWN.
EvalRecord rec(Condition c, std::size_t chosen, std::size_t gold) {
  return {chosen, gold, c, Polarity::negative, 0, 2};
}

const Condition A = Condition::ambiguous;
const Condition D = Condition::disambiguated;

}  // namespace

TEST_CASE("bias scores on a hand-worked fixture") {
  std::vector<EvalRecord> r;
  // Disambiguated: 4 non-UNKNOWN answers, 3 stereotyped -> 2 * 3/4 - 1 = 0.5.
  r.push_back(rec(D, 0, 0));
  r.push_back(rec(D, 0, 1));
  r.push_back(rec(D, 0, 0));
  r.push_back(rec(D, 1, 1));
  // Ambiguous: 10 items, 5 answered UNKNOWN (ACC_amb 0.5), 3 of the other
  // 5 stereotyped -> (1 - 0.5)(2 * 3/5 - 1) = 0.1.
  for (int i = 0; i < 5; ++i) r.push_back(rec(A, 2, 2));
  for (int i = 0; i < 3; ++i) r.push_back(rec(A, 0, 2));
  for (int i = 0; i < 2; ++i) r.push_back(rec(A, 1, 2));
  BiasScores s = bias_scores(r);
  CHECK(*s.s_dis.value == 0.5);  // exact, not approximate
  CHECK(*s.s_amb.value == 0.1);
  CHECK(s.acc_amb == 0.5);
  CHECK(s.acc_dis == 0.75);
  CHECK(s.acc == doctest::Approx(8.0 / 14.0));
  CHECK(s.n_amb == 10);
  CHECK(s.n_dis == 4);
  CHECK(s.biased_amb == 3);
  CHECK(s.non_unknown_amb == 5);
}

TEST_CASE("anti-stereotyped answers give negative scores") {
  std::vector<EvalRecord> r = {rec(D, 1, 1), rec(D, 1, 0), rec(A, 1, 2), rec(A, 1, 2)};
  BiasScores s = bias_scores(r);
  CHECK(*s.s_dis.value == -1.0);
  CHECK(*s.s_amb.value == -1.0);
}

TEST_CASE("all-UNKNOWN answers") {
  std::vector<EvalRecord> r = {rec(D, 2, 0), rec(D, 2, 1), rec(A, 2, 2), rec(A, 2, 2)};
  BiasScores s = bias_scores(r);
  CHECK_FALSE(s.s_dis.defined());
  CHECK(s.s_dis.reason.find("non-UNKNOWN") != std::string::npos);
  CHECK(*s.s_amb.value == 0.0);
  CHECK(s.acc_amb == 1.0);
  CHECK(s.acc_dis == 0.0);
  BiasScores empty = bias_scores({});
  CHECK_FALSE(empty.s_dis.defined());
  CHECK_FALSE(empty.s_amb.defined());
  CHECK_FALSE(empty.s_amb.magnitude().has_value());
}

TEST_CASE("bias scores stay in [-1, 1]") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> opt(0, 2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<EvalRecord> r;
    for (int i = 0; i < 1 + trial % 30; ++i) {
      const Condition c = opt(rng) == 0 ? D : A;
      r.push_back(rec(c, opt(rng), c == A ? 2 : opt(rng) % 2));
    }
    BiasScores s = bias_scores(r);
    for (const Metric* m : {&s.s_dis, &s.s_amb})
      if (m->defined()) {
        CHECK(*m->value >= -1.0);
        CHECK(*m->value <= 1.0);
      }
    if (s.s_amb.defined()) CHECK(std::abs(*s.s_amb.value) <= 1.0 - s.acc_amb + 1e-12);
  }
}

TEST_CASE("equalized odds examples") {
  std::vector<ClassificationRecord> r;
  auto add = [&](int group, int actual, int predicted, int count) {
    for (int i = 0; i < count; ++i) r.push_back({predicted, actual, group});
  };
  // group a: TPR 4/5, FPR 1/5; group b: TPR 3/5, FPR 1/5
  add(0, 1, 1, 4);
  add(0, 1, 0, 1);
  add(0, 0, 1, 1);
  add(0, 0, 0, 4);
  add(1, 1, 1, 3);
  add(1, 1, 0, 2);
  add(1, 0, 1, 1);
  add(1, 0, 0, 4);
  OddsMetrics o = eod_aod(r);
  CHECK(*o.eod.value == 0.2);
  CHECK(*o.aod.value == 0.1);

  std::vector<ClassificationRecord> no_pos = {{0, 0, 0}, {1, 0, 1}, {1, 1, 1}};
  OddsMetrics u = eod_aod(no_pos);
  CHECK_FALSE(u.eod.defined());
  CHECK(u.eod.reason.find("group a lacks positive") != std::string::npos);
  CHECK_THROWS_AS(eod_aod({{2, 0, 0}}), InvalidArgument);
}

TEST_CASE("choose_option: argmax with ties to the lowest index") {
  BenchmarkExample e;
  e.options = {{10}, {11}, {12}};
  std::map<int, double> score = {{10, -3.0}, {11, -1.0}, {12, -2.0}};
  auto scorer = [&](std::span<const int>, std::span<const int> o) { return score[o[0]]; };
  CHECK(choose_option(scorer, e) == 1);
  score[12] = -1.0;
  CHECK(choose_option(scorer, e) == 1);
  score = {{10, 0.0}, {11, 0.0}, {12, 0.0}};
  CHECK(choose_option(scorer, e) == 0);

  // Permuting the options permutes the choice.
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 100; ++trial) {
    score = {{10, n01(rng)}, {11, n01(rng)}, {12, n01(rng)}};
    const int picked = e.options[choose_option(scorer, e)][0];
    BenchmarkExample p = e;
    std::shuffle(p.options.begin(), p.options.end(), rng);
    CHECK(p.options[choose_option(scorer, p)][0] == picked);
  }
  e.options.pop_back();
  CHECK_THROWS_AS(choose_option(scorer, e), InvalidArgument);
}

TEST_CASE("benchmark structure") {
  const ModelWeights& m = testutil::planted_model();
  AttributeSpec a = AttributeSpec::from_vocabulary(m.vocab);
  auto b = generate_benchmark(a, m.vocab, m.planted, 8, 3);
  REQUIRE(b.size() == 8);
  CHECK(b == generate_benchmark(a, m.vocab, m.planted, 8, 3));
  for (std::size_t q = 0; q < 2; ++q) {
    const BenchmarkExample* quad = &b[4 * q];
    CHECK(quad[0].condition == Condition::ambiguous);
    CHECK(quad[0].polarity == Polarity::negative);
    CHECK(quad[1].polarity == Polarity::non_negative);
    CHECK(quad[2].condition == Condition::disambiguated);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK_NOTHROW(quad[i].validate(m.vocab.unknown));
      CHECK(quad[i].options == quad[0].options);
    }
    // The negative question targets the stereotyped group of its concept.
    const int neg_concept = quad[0].question[4];
    bool found = false;
    for (const auto& pa : m.planted.associations)
      if (pa.concept_token == neg_concept) {
        found = true;
        CHECK(quad[0].options[quad[0].stereotyped_option][0] == pa.group_token);
      }
    CHECK(found);
    // Disambiguated golds for the two polarities are the two different groups.
    CHECK(quad[2].gold != quad[3].gold);
    CHECK(quad[2].context.size() > quad[0].context.size());
  }
  CHECK(generate_benchmark(a, m.vocab, m.planted, 0, 3).empty());
  CHECK_THROWS_AS(generate_benchmark(a, m.vocab, m.planted, 6, 3), InvalidArgument);
}

TEST_CASE("validate catches malformed examples") {
  const Vocabulary& v = testutil::planted_model().vocab;
  BenchmarkExample e;
  e.context = {v.bos};
  e.options = {{v.groups[0]}, {v.groups[1]}, {v.unknown}};
  e.gold = 2;
  CHECK_NOTHROW(e.validate(v.unknown));
  BenchmarkExample bad = e;
  bad.gold = 0;
  CHECK_THROWS_AS(bad.validate(v.unknown), InvalidArgument);
  bad = e;
  bad.unknown_option = 1;
  CHECK_THROWS_AS(bad.validate(v.unknown), InvalidArgument);
  bad = e;
  bad.stereotyped_option = 2;
  CHECK_THROWS_AS(bad.validate(v.unknown), InvalidArgument);
  bad = e;
  bad.condition = Condition::disambiguated;
  CHECK_THROWS_AS(bad.validate(v.unknown), InvalidArgument);
  bad = e;
  bad.options.pop_back();
  CHECK_THROWS_AS(bad.validate(v.unknown), InvalidArgument);
}

TEST_CASE("benchmark JSONL round trip and errors") {
  testutil::TempDir dir;
  const ModelWeights& m = testutil::planted_model();
  auto b = generate_benchmark(AttributeSpec::from_vocabulary(m.vocab), m.vocab, m.planted, 16, 1);
  save_benchmark(b, dir / "b.jsonl");
  CHECK(load_benchmark(dir / "b.jsonl", m.vocab.unknown) == b);
  CHECK_THROWS_AS(load_benchmark(dir / "b.jsonl", m.vocab.bos), FormatError);
  {
    std::ofstream out(dir / "bad.jsonl");
    std::ifstream in(dir / "b.jsonl");
    std::string line;
    std::getline(in, line);
    out << line << '\n' << line << '\n';
    out << R"({"context_tokens":[0],"question_tokens":[],"options":[[4],[5],[3]],"gold":2,"condition":"vague","polarity":"negative","stereotyped_option":0})" << '\n';
  }
  try {
    load_benchmark(dir / "bad.jsonl", m.vocab.unknown);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 3);
    CHECK(std::string(e.what()).find("vague") != std::string::npos);
  }
  CHECK_THROWS_AS(load_benchmark(dir / "missing.jsonl", m.vocab.unknown), FormatError);
}

TEST_CASE("planted model is biased before mediation") {
  const SeedArtifacts& art = testutil::seed0_artifacts();
  std::vector<BenchmarkExample> part(art.benchmark.begin(), art.benchmark.begin() + 40);
  BenchmarkRun run = run_benchmark(art.model, part, nullptr, nullptr, 2);
  REQUIRE(run.scores.s_amb.defined());
  REQUIRE(run.scores.s_dis.defined());
  CHECK(*run.scores.s_amb.value > 0.0);
  CHECK(*run.scores.s_dis.value > 0.0);
  // Thread count does not change choices.
  CHECK(run_benchmark(art.model, part, nullptr, nullptr, 1).choices == run.choices);
}

TEST_CASE("control set") {
  const ModelWeights& m = testutil::planted_model();
  auto c = generate_control_set(m.vocab, m.planted, 30, 4);
  REQUIRE(c.size() == 30);
  const OptionScorer scorer = log_likelihood_scorer(m);
  std::size_t correct = 0;
  for (const ControlExample& e : c) {
    CHECK(e.options.size() == 3);
    CHECK(e.gold < 3);
    const int cue = e.prompt.back();
    bool gold_matches = false;
    for (const auto& f : m.planted.facts)
      if (f.cue == cue) gold_matches = e.options[e.gold][0] == f.answer;
    CHECK(gold_matches);
    correct += choose_control_option(scorer, e) == e.gold;
  }
  CHECK(correct == c.size());
  PlantedAssociationSpec few = m.planted;
  few.facts.resize(2);
  CHECK_THROWS_AS(generate_control_set(m.vocab, few, 5, 0), InvalidArgument);
}

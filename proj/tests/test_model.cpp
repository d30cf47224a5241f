#include <cmath>
#include <fstream>

#include "doctest.h"
#include "fairmed/errors.hpp"
#include "fairmed/io.hpp"
#include "fairmed/model.hpp"
#include "test_util.hpp"

using namespace fairmed;
using testutil::planted_model;

namespace {

ModelWeights small_random(std::uint64_t seed = 1) {
  ModelConfig cfg;
  return init_random_model(cfg, Vocabulary::make_default(cfg.vocab_size), seed);
}

double gap_for(const ModelWeights& m, int concept_token, int group_token) {
  const int prompt[] = {m.vocab.bos, concept_token};
  Vector dist = next_token_distribution(m, prompt);
  double other = 0.0;
  for (int g : m.vocab.groups)
    if (g != group_token) other = std::max(other, double(dist[g]));
  return dist[group_token] - other;
}

}  // namespace

TEST_CASE("vocabulary layout and lookup") {
  Vocabulary v = Vocabulary::make_default(128);
  CHECK(v.size() == 128);
  CHECK(v.names[v.bos] == "<bos>");
  CHECK(v.groups.size() == 4);
  CHECK(v.concepts.size() == 20);
  CHECK(v.is_group(v.groups[2]));
  CHECK_FALSE(v.is_group(v.concepts[0]));
  CHECK(v.id("the") == *v.find("the"));
  CHECK_THROWS_AS(v.id("no-such-token"), InvalidArgument);
  CHECK_THROWS_AS(Vocabulary::make_default(20), InvalidArgument);
}

TEST_CASE("model config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = ModelConfig{};
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("forward shape contract") {
  const ModelWeights m = small_random();
  const int tok[] = {m.vocab.bos};
  ForwardTrace tr = forward(m, tok);
  CHECK(tr.logits.size() == m.config.vocab_size);
  REQUIRE(tr.mlp_activations.size() == m.config.n_layers);
  for (const Vector& a : tr.mlp_activations) CHECK(a.size() == m.config.d_model);
}

TEST_CASE("forward rejects bad tokens and lengths") {
  const ModelWeights m = small_random();
  const int bad[] = {0, int(m.config.vocab_size)};
  CHECK_THROWS_AS(forward(m, bad), InvalidArgument);
  const int neg[] = {-1};
  CHECK_THROWS_AS(forward(m, neg), InvalidArgument);
  std::vector<int> long_seq(m.config.max_seq + 1, 0);
  CHECK_THROWS_AS(forward(m, long_seq), InvalidArgument);
  CHECK_THROWS_AS(forward(m, std::vector<int>{}), InvalidArgument);
}

TEST_CASE("identity hooks leave logits bit-identical") {
  const ModelWeights& m = planted_model();
  InterventionHooks hooks;
  for (std::size_t l = 0; l < m.config.n_layers; ++l)
    hooks.by_layer[l] = [](std::size_t, std::span<const float> a) { return Vector(a.begin(), a.end()); };
  const std::vector<int> prompts[] = {{m.vocab.bos},
                                      {m.vocab.bos, m.vocab.concepts[3]},
                                      {m.vocab.bos, m.vocab.id("the"), m.vocab.groups[1], m.vocab.id("person")}};
  for (const auto& p : prompts) {
    ForwardTrace a = forward(m, p);
    ForwardTrace b = forward(m, p, &hooks);
    CHECK(a.logits == b.logits);
    CHECK(a.mlp_activations == b.mlp_activations);
  }
}

TEST_CASE("hooks replace the last-token activation before the residual add") {
  const ModelWeights& m = planted_model();
  const std::vector<int> p = {m.vocab.bos, m.vocab.concepts[0]};
  InterventionHooks hooks;
  hooks.by_layer[4] = [](std::size_t, std::span<const float> a) { return Vector(a.size(), 0.0f); };
  ForwardTrace a = forward(m, p);
  ForwardTrace b = forward(m, p, &hooks);
  CHECK(b.mlp_activations[4] == Vector(m.config.d_model, 0.0f));
  for (std::size_t l = 0; l < 4; ++l) CHECK(a.mlp_activations[l] == b.mlp_activations[l]);
  CHECK(a.logits != b.logits);
  // Zeroing the planted value removes the concept's push toward its group.
  CHECK(gap_for(m, p[1], m.planted.associations[0].group_token) > 0.3);
  Vector d = group_probabilities(softmax(b.logits), m.vocab.groups);
  CHECK(*std::max_element(d.begin(), d.end()) < 0.9f);

  InterventionHooks wrong;
  wrong.by_layer[0] = [](std::size_t, std::span<const float>) { return Vector(3, 0.0f); };
  CHECK_THROWS_AS(forward(m, p, &wrong), InvalidArgument);
}

TEST_CASE("forward is deterministic and reads only its own prefix") {
  const ModelWeights& m = planted_model();
  std::vector<int> a = {m.vocab.bos, m.vocab.id("the"), m.vocab.concepts[5], m.vocab.id("was"), m.vocab.groups[0]};
  std::vector<int> b = a;
  b[3] = m.vocab.id("by");
  b[4] = m.vocab.groups[3];
  for (std::size_t t = 1; t <= 3; ++t) {
    ForwardTrace x = forward(m, std::span<const int>(a).first(t));
    ForwardTrace y = forward(m, std::span<const int>(b).first(t));
    CHECK(x.logits == y.logits);
    CHECK(x.mlp_activations == y.mlp_activations);
  }
  CHECK(forward(m, a).logits == forward(m, a).logits);
  CHECK(forward(m, a).logits != forward(m, b).logits);
}

TEST_CASE("next_token_distribution is softmax of logits") {
  const ModelWeights& m = planted_model();
  const int p[] = {m.vocab.bos, m.vocab.concepts[1]};
  Vector d = next_token_distribution(m, p);
  CHECK(d == softmax(forward(m, p).logits));
  double s = 0.0;
  for (float v : d) s += v;
  CHECK(std::abs(s - 1.0) <= 1e-6);
}

TEST_CASE("uniform-logit weights give a uniform distribution") {
  ModelWeights m = small_random();
  m.w_end = Matrix(m.config.vocab_size, m.config.d_model, 0.0f);
  const int p[] = {0, 5, 9};
  Vector d = next_token_distribution(m, p);
  for (float v : d) CHECK(v == doctest::Approx(1.0 / double(m.config.vocab_size)));
}

TEST_CASE("group_probabilities examples") {
  Vector dist{0.1f, 0.2f, 0.1f, 0.6f};
  const int g2[] = {1, 3};
  Vector r = group_probabilities(dist, g2);
  CHECK(r[0] == doctest::Approx(0.25));
  CHECK(r[1] == doctest::Approx(0.75));
  const int eq[] = {0, 2};
  CHECK(group_probabilities(dist, eq) == Vector{0.5f, 0.5f});
  const int one[] = {2};
  CHECK(group_probabilities(dist, one) == Vector{1.0f});
  CHECK_THROWS_AS(group_probabilities(dist, std::span<const int>{}), InvalidArgument);
  const int dup[] = {1, 1};
  CHECK_THROWS_AS(group_probabilities(dist, dup), InvalidArgument);
  const int out[] = {7};
  CHECK_THROWS_AS(group_probabilities(dist, out), InvalidArgument);
}

TEST_CASE("sequence_log_likelihood follows the chain rule") {
  const ModelWeights& m = planted_model();
  const std::vector<int> prefix = {m.vocab.bos, m.vocab.id("the")};
  const int c1 = m.vocab.concepts[2], c2 = m.vocab.id("was");
  const int one[] = {c1};
  CHECK(sequence_log_likelihood(m, prefix, one) ==
        doctest::Approx(std::log(double(next_token_distribution(m, prefix)[c1]))).epsilon(1e-5));
  const int both[] = {c1, c2};
  std::vector<int> longer = prefix;
  longer.push_back(c1);
  const int second[] = {c2};
  CHECK(sequence_log_likelihood(m, prefix, both) ==
        doctest::Approx(sequence_log_likelihood(m, prefix, one) + sequence_log_likelihood(m, longer, second)));
  CHECK_THROWS_AS(sequence_log_likelihood(m, std::vector<int>{}, one), InvalidArgument);
  CHECK_THROWS_AS(sequence_log_likelihood(m, prefix, std::vector<int>{}), InvalidArgument);
}

TEST_CASE("planted model: every association meets its margin") {
  const ModelWeights& m = planted_model();
  REQUIRE(m.planted.associations.size() == 20);
  for (const MarginCheck& c : verify_planted_margins(m)) {
    CHECK(c.ok());
    CHECK(c.gap == doctest::Approx(gap_for(m, c.concept_token, c.group_token)));
    const int p[] = {m.vocab.bos, c.concept_token};
    Vector g = group_probabilities(next_token_distribution(m, p), m.vocab.groups);
    CHECK(m.vocab.groups[argmax(g)] == c.group_token);
  }
}

TEST_CASE("planted model: biased option is more likely after a concept") {
  const ModelWeights& m = planted_model();
  for (const PlantedAssociation& a : m.planted.associations) {
    const std::vector<int> prefix = {m.vocab.bos, a.concept_token};
    for (int g : m.vocab.groups) {
      if (g == a.group_token) continue;
      const int biased[] = {a.group_token}, other[] = {g};
      CHECK(sequence_log_likelihood(m, prefix, biased) > sequence_log_likelihood(m, prefix, other));
    }
  }
}

TEST_CASE("planted model: one and two associations") {
  ModelConfig cfg;
  Vocabulary v = Vocabulary::make_default(cfg.vocab_size);
  PlantedAssociationSpec one;
  one.layer_to_plant = 3;
  one.associations = {{v.concepts[0], v.groups[2], 0.3}};
  ModelWeights a = build_planted_model(cfg, v, one, 9);
  CHECK(gap_for(a, v.concepts[0], v.groups[2]) >= 0.3);

  PlantedAssociationSpec two = one;
  two.associations.push_back({v.concepts[1], v.groups[0], 0.5});
  ModelWeights b = build_planted_model(cfg, v, two, 9);
  CHECK(gap_for(b, v.concepts[0], v.groups[2]) >= 0.3);
  CHECK(gap_for(b, v.concepts[1], v.groups[0]) >= 0.5);
}

TEST_CASE("planted model: empty spec is the seeded random init") {
  ModelConfig cfg;
  Vocabulary v = Vocabulary::make_default(cfg.vocab_size);
  PlantedAssociationSpec empty;
  ModelWeights a = build_planted_model(cfg, v, empty, 4);
  ModelWeights b = init_random_model(cfg, v, 4);
  b.planted = empty;
  CHECK(a == b);
  CHECK(build_planted_model(cfg, v, PlantedAssociationSpec::make_default(v, 4), 4) ==
        build_planted_model(cfg, v, PlantedAssociationSpec::make_default(v, 4), 4));
}

TEST_CASE("planted spec validation") {
  ModelConfig cfg;
  Vocabulary v = Vocabulary::make_default(cfg.vocab_size);
  PlantedAssociationSpec s;
  s.associations = {{v.concepts[0], v.groups[0], 0.3}};
  s.layer_to_plant = 8;
  CHECK_THROWS_AS(s.validate(cfg, v), InvalidArgument);
  s.layer_to_plant = 2;
  s.associations[0].margin = 1.0;
  CHECK_THROWS_AS(s.validate(cfg, v), InvalidArgument);
  s.associations[0].margin = 0.3;
  s.associations[0].group_token = v.concepts[1];
  CHECK_THROWS_AS(s.validate(cfg, v), InvalidArgument);
  s.associations[0].group_token = 500;
  CHECK_THROWS_AS(build_planted_model(cfg, v, s, 0), InvalidArgument);
  s.associations = {{v.concepts[0], v.groups[0], 0.3}, {v.concepts[0], v.groups[1], 0.3}};
  CHECK_THROWS_AS(s.validate(cfg, v), InvalidArgument);
}

TEST_CASE("model save/load round trip is bit-exact") {
  testutil::TempDir dir;
  const ModelWeights& m = planted_model();
  save_model(m, dir / "m");
  ModelWeights back = load_model(dir / "m");
  CHECK(back == m);
  save_model(back, dir / "m2");
  std::ifstream a(dir / "m" / "weights.bin", std::ios::binary), b(dir / "m2" / "weights.bin", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
  auto cfg = read_json_file(dir / "m" / "config.json");
  CHECK(cfg["format"] == "fairmed-model/1");
  CHECK(cfg["tensors"][0]["name"] == "token_embedding");
  CHECK(cfg["tensors"][0]["offset"] == 0);
}

TEST_CASE("model load errors") {
  testutil::TempDir dir;
  const ModelWeights& m = planted_model();
  save_model(m, dir / "m");
  const auto weights = dir / "m" / "weights.bin";
  const auto size = std::filesystem::file_size(weights);

  SUBCASE("truncated blob") {
    std::filesystem::resize_file(weights, size - 10);
    try {
      load_model(dir / "m");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("w_end") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    std::filesystem::resize_file(weights, size + 4);
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
  SUBCASE("manifest shape mismatch names the tensor") {
    auto cfg = read_json_file(dir / "m" / "config.json");
    cfg["tensors"][5]["shape"] = {1, 2};
    const std::string name = cfg["tensors"][5]["name"];
    write_json_file(cfg, dir / "m" / "config.json");
    try {
      load_model(dir / "m");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(name) != std::string::npos);
      CHECK(e.offset() == cfg["tensors"][5]["offset"].get<std::size_t>());
    }
  }
  SUBCASE("config and blob disagree on size") {
    auto cfg = read_json_file(dir / "m" / "config.json");
    cfg["d_ff"] = 128;
    write_json_file(cfg, dir / "m" / "config.json");
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
  SUBCASE("missing format tag") {
    auto cfg = read_json_file(dir / "m" / "config.json");
    cfg.erase("format");
    write_json_file(cfg, dir / "m" / "config.json");
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
  SUBCASE("malformed json") {
    std::ofstream(dir / "m" / "config.json") << "{ not json";
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
  SUBCASE("planted margin re-checked after load") {
    ModelWeights broken = m;
    for (float& v : broken.layers[4].w_value.data) v = 0.0f;
    save_model(broken, dir / "b");
    try {
      load_model(dir / "b");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("margin") != std::string::npos);
    }
  }
}

#include "fairmed/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "fairmed/errors.hpp"
#include "fairmed/rng.hpp"

namespace fairmed {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr int kMaxDoublings = 32;

Vector layer_norm(std::span<const float> x, const NormWeights& w) {
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>((x[i] - mean) * inv) * w.gain[i] + w.bias[i];
  return out;
}

NormWeights unit_norm(std::size_t d) { return {Vector(d, 1.0f), Vector(d, 0.0f)}; }

void fill_normal(std::span<float> out, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (float& v : out) v = static_cast<float>(dist(rng));
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double stddev) {
  Matrix m(r, c);
  fill_normal(m.data, rng, stddev);
  return m;
}

void check_tokens(const ModelWeights& model, std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (tokens.size() > model.config.max_seq)
    throw InvalidArgument("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq " + std::to_string(model.config.max_seq));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= model.config.vocab_size)
      throw InvalidArgument("forward: token id " + std::to_string(t) + " out of range");
}

// Causal multi-head self-attention over normalized inputs.
std::vector<Vector> attention(const LayerWeights& lw, const ModelConfig& cfg,
                              const std::vector<Vector>& normed) {
  const std::size_t seq = normed.size();
  const std::size_t dh = cfg.head_dim();
  std::vector<Vector> q(seq), k(seq), v(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    q[t] = matvec_bias(lw.attn_query, normed[t], lw.query_bias);
    k[t] = matvec_bias(lw.attn_key, normed[t], lw.key_bias);
    v[t] = matvec_bias(lw.attn_value, normed[t], lw.value_bias);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Vector> out(seq);
  std::vector<double> scores(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    Vector ctx(cfg.d_model, 0.0f);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = h * dh;
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < dh; ++i) acc += static_cast<double>(q[t][off + i]) * k[s][off + i];
        scores[s] = acc * scale;
        mx = std::max(mx, scores[s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        scores[s] = std::exp(scores[s] - mx);
        z += scores[s];
      }
      for (std::size_t i = 0; i < dh; ++i) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += scores[s] * v[s][off + i];
        ctx[off + i] = static_cast<float>(acc / z);
      }
    }
    out[t] = matvec_bias(lw.attn_output, ctx, lw.output_bias);
  }
  return out;
}

Vector mlp(const LayerWeights& lw, std::span<const float> normed) {
  Vector hidden = matvec(lw.w_key, normed);
  for (float& x : hidden) x = gelu(x);
  return matvec(lw.w_value, hidden);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 ||
      max_seq == 0)
    throw InvalidArgument("model config: all counts must be >= 1");
  if (d_model % n_heads != 0) throw InvalidArgument("model config: d_model not divisible by n_heads");
}

ForwardTrace forward(const ModelWeights& model, std::span<const int> tokens,
                     const InterventionHooks* hooks) {
  check_tokens(model, tokens);
  const ModelConfig& cfg = model.config;
  const std::size_t seq = tokens.size();
  std::vector<Vector> h(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    auto e = model.token_embedding.row(static_cast<std::size_t>(tokens[t]));
    auto p = model.position_embedding.row(t);
    h[t].resize(cfg.d_model);
    for (std::size_t i = 0; i < cfg.d_model; ++i) h[t][i] = e[i] + p[i];
  }

  ForwardTrace trace;
  trace.mlp_activations.reserve(cfg.n_layers);
  trace.mlp_inputs.reserve(cfg.n_layers);
  std::vector<Vector> normed(seq);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = model.layers[l];
    for (std::size_t t = 0; t < seq; ++t) normed[t] = layer_norm(h[t], lw.attn_norm);
    std::vector<Vector> a = attention(lw, cfg, normed);
    for (std::size_t t = 0; t < seq; ++t) {
      Vector pre = a[t];
      add_inplace(pre, h[t]);
      Vector z = layer_norm(pre, lw.mlp_norm);
      Vector m = mlp(lw, z);
      if (t + 1 == seq) {
        if (hooks) {
          auto it = hooks->by_layer.find(l);
          if (it != hooks->by_layer.end()) {
            Vector replaced = it->second(l, m);
            if (replaced.size() != m.size())
              throw InvalidArgument("intervention hook changed activation length");
            m = std::move(replaced);
          }
        }
        trace.mlp_activations.push_back(m);
        trace.mlp_inputs.push_back(std::move(z));
      }
      add_inplace(h[t], a[t]);
      add_inplace(h[t], m);
    }
  }
  trace.logits = matvec(model.w_end, layer_norm(h[seq - 1], model.final_norm));
  require_finite(trace.logits, "forward logits");
  return trace;
}

Vector next_token_distribution(const ModelWeights& model, std::span<const int> tokens,
                               const InterventionHooks* hooks) {
  return softmax(forward(model, tokens, hooks).logits);
}

Vector group_probabilities(std::span<const float> dist, std::span<const int> groups) {
  if (groups.empty()) throw InvalidArgument("group_probabilities: empty group list");
  std::set<int> seen;
  double total = 0.0;
  for (int g : groups) {
    if (g < 0 || static_cast<std::size_t>(g) >= dist.size())
      throw InvalidArgument("group_probabilities: group id out of range");
    if (!seen.insert(g).second) throw InvalidArgument("group_probabilities: duplicate group id");
    total += dist[static_cast<std::size_t>(g)];
  }
  Vector out(groups.size());
  if (total <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0f / static_cast<float>(groups.size()));
    return out;
  }
  for (std::size_t i = 0; i < groups.size(); ++i)
    out[i] = static_cast<float>(dist[static_cast<std::size_t>(groups[i])] / total);
  return out;
}

double sequence_log_likelihood(const ModelWeights& model, std::span<const int> prefix,
                               std::span<const int> continuation,
                               const InterventionHooks* hooks) {
  if (prefix.empty()) throw InvalidArgument("sequence_log_likelihood: empty prefix");
  if (continuation.empty()) throw InvalidArgument("sequence_log_likelihood: empty continuation");
  if (prefix.size() + continuation.size() > model.config.max_seq + 1)
    throw InvalidArgument("sequence_log_likelihood: prefix + continuation exceeds max_seq");
  std::vector<int> context(prefix.begin(), prefix.end());
  double total = 0.0;
  for (int next : continuation) {
    if (next < 0 || static_cast<std::size_t>(next) >= model.config.vocab_size)
      throw InvalidArgument("sequence_log_likelihood: continuation token out of range");
    ForwardTrace tr = forward(model, context, hooks);
    total += log_softmax_at(tr.logits, static_cast<std::size_t>(next));
    context.push_back(next);
  }
  return total;
}

ModelWeights init_random_model(const ModelConfig& config, const Vocabulary& vocab,
                               std::uint64_t seed) {
  config.validate();
  if (vocab.size() != config.vocab_size)
    throw InvalidArgument("vocabulary size " + std::to_string(vocab.size()) +
                          " does not match vocab_size " + std::to_string(config.vocab_size));
  const std::size_t d = config.d_model;
  const double init_std = 0.02;
  Rng rng(seed);
  ModelWeights m;
  m.config = config;
  m.vocab = vocab;
  m.token_embedding = random_matrix(config.vocab_size, d, rng, 1.0 / std::sqrt(double(d)));
  m.position_embedding = random_matrix(config.max_seq, d, rng, init_std);
  m.layers.resize(config.n_layers);
  for (LayerWeights& lw : m.layers) {
    lw.attn_norm = unit_norm(d);
    lw.attn_query = random_matrix(d, d, rng, init_std);
    lw.attn_key = random_matrix(d, d, rng, init_std);
    lw.attn_value = random_matrix(d, d, rng, init_std);
    lw.attn_output = random_matrix(d, d, rng, init_std);
    lw.query_bias = lw.key_bias = lw.value_bias = lw.output_bias = Vector(d, 0.0f);
    lw.mlp_norm = unit_norm(d);
    lw.w_key = random_matrix(config.d_ff, d, rng, init_std);
    lw.w_value = random_matrix(d, config.d_ff, rng, init_std);
  }
  m.final_norm = unit_norm(d);
  m.w_end = random_matrix(config.vocab_size, d, rng, 2.0 / std::sqrt(double(d)));
  return m;
}

// ---------------------------------------------------------------------------
// Planted construction

void PlantedAssociationSpec::validate(const ModelConfig& config, const Vocabulary& vocab) const {
  if (layer_to_plant >= config.n_layers) throw InvalidArgument("planted layer out of range");
  if (associations.size() > config.d_ff) throw InvalidArgument("more associations than d_ff rows");
  std::set<int> concepts;
  auto valid = [&](int t) { return t >= 0 && static_cast<std::size_t>(t) < config.vocab_size; };
  for (const auto& a : associations) {
    if (!valid(a.concept_token) || !valid(a.group_token))
      throw InvalidArgument("planted association token id out of range");
    if (a.concept_token == a.group_token) throw InvalidArgument("planted concept and group ids must differ");
    if (!vocab.is_group(a.group_token))
      throw InvalidArgument("planted target " + std::to_string(a.group_token) + " is not a group token");
    if (vocab.is_group(a.concept_token) || a.concept_token == vocab.bos)
      throw InvalidArgument("planted concept " + std::to_string(a.concept_token) + " is reserved");
    if (!(a.margin > 0.0 && a.margin < 1.0)) throw InvalidArgument("planted margin must be in (0,1)");
    if (!concepts.insert(a.concept_token).second)
      throw InvalidArgument("planted concept " + std::to_string(a.concept_token) + " listed twice");
  }
  std::set<int> cues;
  for (const auto& f : facts) {
    if (!valid(f.cue) || !valid(f.answer)) throw InvalidArgument("planted fact token id out of range");
    if (concepts.count(f.cue) || vocab.is_group(f.cue) || f.cue == f.answer)
      throw InvalidArgument("planted fact cue overlaps another role");
    if (!cues.insert(f.cue).second) throw InvalidArgument("planted fact cue listed twice");
  }
  if (!(fact_strength > 0.0)) throw InvalidArgument("fact_strength must be positive");
  if (!(context_copy >= 0.0) || !std::isfinite(context_copy))
    throw InvalidArgument("context_copy must be finite and non-negative");
  if (uses_copy_head(config) && config.n_layers < 2)
    throw InvalidArgument("the group-copy head needs at least 2 layers");
  const std::size_t copy_dirs = uses_copy_head(config) ? 2 + vocab.groups.size() : 0;
  const std::size_t needed = 1 + associations.size() + facts.size() + copy_dirs + 4;
  if (!associations.empty() || !facts.empty())
    if (config.d_model < needed)
      throw InvalidArgument("d_model " + std::to_string(config.d_model) + " too small; need " +
                            std::to_string(needed));
}

PlantedAssociationSpec PlantedAssociationSpec::make_default(const Vocabulary& vocab,
                                                            std::size_t layer, double margin) {
  PlantedAssociationSpec spec;
  spec.layer_to_plant = layer;
  for (std::size_t i = 0; i < vocab.concepts.size(); ++i)
    spec.associations.push_back({vocab.concepts[i], vocab.groups[i % vocab.groups.size()], margin});
  for (std::size_t i = 0; i < std::min(vocab.cues.size(), vocab.answers.size()); ++i)
    spec.facts.push_back({vocab.cues[i], vocab.answers[i]});
  return spec;
}

namespace {

using DVec = std::vector<double>;

// Orthonormal directions, all orthogonal to the all-ones vector so that
// layer normalization's mean subtraction leaves them intact.
std::vector<DVec> orthonormal_directions(std::size_t d, std::size_t count, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<DVec> basis;
  basis.push_back(DVec(d, 1.0 / std::sqrt(double(d))));
  while (basis.size() < count + 1) {
    DVec v(d);
    for (double& x : v) x = n01(rng);
    for (int pass = 0; pass < 2; ++pass)
      for (const DVec& b : basis) {
        double p = 0.0;
        for (std::size_t i = 0; i < d; ++i) p += v[i] * b[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= p * b[i];
      }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  basis.erase(basis.begin());
  return basis;
}

void remove_components(std::span<float> row, const std::vector<DVec>& dirs) {
  for (const DVec& b : dirs) {
    double p = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) p += row[i] * b[i];
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(row[i] - p * b[i]);
  }
}

void add_scaled(std::span<float> row, const DVec& dir, double scale) {
  for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(row[i] + scale * dir[i]);
}

double group_gap(const ModelWeights& model, int concept_token, int group_token) {
  const int prompt[] = {model.vocab.bos, concept_token};
  Vector dist = next_token_distribution(model, prompt);
  double best_other = 0.0;
  for (int g : model.vocab.groups)
    if (g != group_token) best_other = std::max(best_other, static_cast<double>(dist[g]));
  return dist[group_token] - best_other;
}

double answer_gap(const ModelWeights& model, const PlantedFact& fact) {
  const int prompt[] = {model.vocab.bos, fact.cue};
  Vector dist = next_token_distribution(model, prompt);
  double best_other = 0.0;
  for (const PlantedFact& other : model.planted.facts)
    if (other.answer != fact.answer) best_other = std::max(best_other, double(dist[other.answer]));
  return dist[fact.answer] - best_other;
}

constexpr double kConceptMarker = 2.0;    // shared "is a concept" component
constexpr double kConceptIdentity = 2.0;  // per-concept identity component
constexpr double kAttnQuery = 5.0;
constexpr double kAttnKey = 5.0;
constexpr double kCopyGain = 2.0;
constexpr double kAnswerReadout = 2.0;
constexpr double kGroupMarker = 2.0;      // shared "is a group" component
constexpr double kGroupIdentity = 2.0;
constexpr double kRecencyStep = 0.03;     // per-position growth of the recency component
constexpr double kCopyQuery = 5.0;
constexpr double kCopyMarkerKey = 40.0;   // must dominate recency so only group slots win
constexpr double kCopyRecencyKey = 20.0;
constexpr double kFactMargin = 0.5;

}  // namespace

ModelWeights build_planted_model(const ModelConfig& config, const Vocabulary& vocab,
                                 const PlantedAssociationSpec& spec, std::uint64_t seed) {
  ModelWeights model = init_random_model(config, vocab, seed);
  spec.validate(config, vocab);
  model.planted = spec;
  if (spec.associations.empty() && spec.facts.empty()) return model;

  const std::size_t d = config.d_model;
  const std::size_t n_assoc = spec.associations.size();
  const std::size_t n_fact = spec.facts.size();
  Rng rng(derive_seed(seed, 0x706c616e74ULL));
  const std::size_t n_groups = vocab.groups.size();
  const bool copy = spec.uses_copy_head(config);
  const std::size_t n_copy = copy ? 2 + n_groups : 0;
  std::vector<DVec> dirs = orthonormal_directions(d, 1 + n_assoc + n_fact + n_copy, rng);
  const DVec marker = dirs[0];
  std::vector<DVec> identity(dirs.begin() + 1, dirs.begin() + 1 + long(n_assoc));
  std::vector<DVec> fact_dirs(dirs.begin() + 1 + long(n_assoc), dirs.begin() + 1 + long(n_assoc + n_fact));
  std::vector<DVec> copy_dirs(dirs.end() - long(n_copy), dirs.end());

  // Reserve the planted subspace: only planted tokens write into it and only
  // group/answer tokens read out of it.
  for (std::size_t t = 0; t < config.vocab_size; ++t) {
    remove_components(model.token_embedding.row(t), dirs);
    remove_components(model.w_end.row(t), dirs);
  }
  for (std::size_t p = 0; p < config.max_seq; ++p) remove_components(model.position_embedding.row(p), dirs);
  for (std::size_t i = 0; i < n_assoc; ++i) {
    auto row = model.token_embedding.row(std::size_t(spec.associations[i].concept_token));
    add_scaled(row, marker, kConceptMarker);
    add_scaled(row, identity[i], kConceptIdentity);
  }
  for (std::size_t j = 0; j < n_fact; ++j)
    add_scaled(model.w_end.row(std::size_t(spec.facts[j].answer)), fact_dirs[j], kAnswerReadout);

  if (copy) {
    // Every head attends to group mentions, later positions winning, and
    // copies that group's identity toward its own unembedding.
    const DVec& gmark = copy_dirs[0];
    const DVec& recency = copy_dirs[1];
    for (std::size_t g = 0; g < n_groups; ++g) {
      auto row = model.token_embedding.row(std::size_t(vocab.groups[g]));
      add_scaled(row, gmark, kGroupMarker);
      add_scaled(row, copy_dirs[2 + g], kGroupIdentity);
      add_scaled(model.w_end.row(std::size_t(vocab.groups[g])), copy_dirs[2 + g], spec.context_copy);
    }
    for (std::size_t p = 0; p < config.max_seq; ++p)
      add_scaled(model.position_embedding.row(p), recency, kRecencyStep * double(p));
    LayerWeights& cw = model.layers[spec.copy_layer()];
    const std::size_t dh = config.head_dim();
    cw.attn_query = Matrix(d, d);
    cw.attn_key = Matrix(d, d);
    cw.query_bias.assign(d, 0.0f);
    cw.key_bias.assign(d, 0.0f);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      cw.query_bias[h * dh] = static_cast<float>(kCopyQuery);
      for (std::size_t i = 0; i < d; ++i)
        cw.attn_key(h * dh, i) = static_cast<float>(kCopyMarkerKey * gmark[i] + kCopyRecencyKey * recency[i]);
    }
    cw.attn_value = Matrix(d, d);
    for (std::size_t g = 0; g < n_groups; ++g)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
          cw.attn_value(i, j) += static_cast<float>(copy_dirs[2 + g][i] * copy_dirs[2 + g][j]);
    cw.value_bias.assign(d, 0.0f);
    cw.attn_output = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) cw.attn_output(i, i) = 1.0f;
    cw.output_bias.assign(d, 0.0f);
  }

  LayerWeights& lw = model.layers[spec.layer_to_plant];
  if (n_assoc > 0) {
    // Every head attends to concept positions and copies their identity
    // component into the attending position.
    const std::size_t dh = config.head_dim();
    lw.attn_query = Matrix(d, d);
    lw.attn_key = Matrix(d, d);
    lw.query_bias.assign(d, 0.0f);
    lw.key_bias.assign(d, 0.0f);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      lw.query_bias[h * dh] = static_cast<float>(kAttnQuery);
      for (std::size_t i = 0; i < d; ++i) lw.attn_key(h * dh, i) = static_cast<float>(kAttnKey * marker[i]);
    }
    lw.attn_value = Matrix(d, d);
    for (const DVec& r : identity)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) lw.attn_value(i, j) += static_cast<float>(r[i] * r[j]);
    lw.value_bias.assign(d, 0.0f);
    lw.attn_output = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) lw.attn_output(i, i) = static_cast<float>(kCopyGain);
    lw.output_bias.assign(d, 0.0f);

    // Keys: the concept's normalized MLP input restricted to the identity
    // subspace. Values: the target group's unembedding, centred on the group mean.
    DVec group_mean(d, 0.0);
    for (int g : vocab.groups)
      for (std::size_t i = 0; i < d; ++i) group_mean[i] += model.w_end(std::size_t(g), i) / double(vocab.groups.size());
    for (std::size_t a = 0; a < n_assoc; ++a) {
      const PlantedAssociation& assoc = spec.associations[a];
      const int prompt[] = {vocab.bos, assoc.concept_token};
      ForwardTrace tr = forward(model, prompt);
      const Vector& z = tr.mlp_inputs[spec.layer_to_plant];
      DVec key(d, 0.0);
      for (const DVec& r : identity) {
        double p = 0.0;
        for (std::size_t i = 0; i < d; ++i) p += z[i] * r[i];
        for (std::size_t i = 0; i < d; ++i) key[i] += p * r[i];
      }
      double kn = 0.0;
      for (double x : key) kn += x * x;
      kn = std::sqrt(kn);
      if (kn < 1e-6) throw ConstructionFailed("planted concept has no identity component at the planted layer");
      for (std::size_t i = 0; i < d; ++i) lw.w_key(a, i) = static_cast<float>(key[i] / kn);

      DVec value(d);
      double vn = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        value[i] = model.w_end(std::size_t(assoc.group_token), i) - group_mean[i];
        vn += value[i] * value[i];
      }
      vn = std::sqrt(vn);
      if (vn < 1e-9) throw ConstructionFailed("target group unembedding equals the group mean");
      for (std::size_t i = 0; i < d; ++i) lw.w_value(i, a) = static_cast<float>(value[i] / vn);
    }

    std::vector<int> doublings(n_assoc, 0);
    for (int round = 0;; ++round) {
      std::vector<std::size_t> failing;
      for (std::size_t a = 0; a < n_assoc; ++a) {
        const auto& assoc = spec.associations[a];
        if (group_gap(model, assoc.concept_token, assoc.group_token) < assoc.margin) failing.push_back(a);
      }
      if (failing.empty()) break;
      if (round == kMaxDoublings) {
        std::ostringstream msg;
        msg << "planted calibration failed after " << kMaxDoublings << " doublings:";
        for (std::size_t a : failing) {
          const auto& assoc = spec.associations[a];
          msg << " concept " << assoc.concept_token << "->group " << assoc.group_token
              << " gap=" << group_gap(model, assoc.concept_token, assoc.group_token);
        }
        throw ConstructionFailed(msg.str());
      }
      for (std::size_t a : failing) {
        for (std::size_t i = 0; i < d; ++i) lw.w_value(i, a) *= 2.0f;
        ++doublings[a];
      }
    }
  }

  if (n_fact > 0) {
    // Cue strength tracks the planted layer's activation scale so that
    // bounded edits of that layer cannot overturn the control answers.
    double scale = 1.0;
    if (n_assoc > 0) {
      scale = 0.0;
      for (const auto& assoc : spec.associations) {
        const int prompt[] = {vocab.bos, assoc.concept_token};
        scale = std::max(scale, l2_norm(forward(model, prompt).mlp_activations[spec.layer_to_plant]));
      }
    }
    for (std::size_t j = 0; j < n_fact; ++j) {
      auto row = model.token_embedding.row(std::size_t(spec.facts[j].cue));
      add_scaled(row, fact_dirs[j], spec.fact_strength * scale);
    }
    for (std::size_t j = 0; j < n_fact; ++j) {
      for (int round = 0; answer_gap(model, spec.facts[j]) < kFactMargin; ++round) {
        if (round == kMaxDoublings)
          throw ConstructionFailed("fact calibration failed for cue " + std::to_string(spec.facts[j].cue));
        add_scaled(model.w_end.row(std::size_t(spec.facts[j].answer)), fact_dirs[j], std::ldexp(kAnswerReadout, round));
      }
    }
  }

  for (const MarginCheck& c : verify_planted_margins(model))
    if (!c.ok())
      throw ConstructionFailed("planted margin lost after fact construction for concept " +
                               std::to_string(c.concept_token));
  return model;
}

std::vector<MarginCheck> verify_planted_margins(const ModelWeights& model) {
  std::vector<MarginCheck> out;
  for (const auto& a : model.planted.associations)
    out.push_back({a.concept_token, a.group_token, a.margin, group_gap(model, a.concept_token, a.group_token)});
  return out;
}

}  // namespace fairmed

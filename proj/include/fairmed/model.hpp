#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "fairmed/numerics.hpp"
#include "fairmed/vocab.hpp"

namespace fairmed {

struct ModelConfig {
  std::size_t vocab_size = 128;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq = 32;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct NormWeights {
  Vector gain;
  Vector bias;
  bool operator==(const NormWeights&) const = default;
};

struct LayerWeights {
  NormWeights attn_norm;
  Matrix attn_query, attn_key, attn_value, attn_output;  // d_model x d_model
  Vector query_bias, key_bias, value_bias, output_bias;
  NormWeights mlp_norm;  // gamma applied to (attention output + residual)
  Matrix w_key;          // d_ff x d_model
  Matrix w_value;        // d_model x d_ff
  bool operator==(const LayerWeights&) const = default;
};

struct PlantedAssociation {
  int concept_token = 0;
  int group_token = 0;
  double margin = 0.3;
  bool operator==(const PlantedAssociation&) const = default;
};

/// Control-set knowledge: prompts ending in `cue` should answer `answer`.
struct PlantedFact {
  int cue = 0;
  int answer = 0;
  bool operator==(const PlantedFact&) const = default;
};

struct PlantedAssociationSpec {
  std::vector<PlantedAssociation> associations;
  std::size_t layer_to_plant = 4;  // 0-based
  std::vector<PlantedFact> facts;
  /// Fact cue strength relative to the planted layer's activation norm.
  double fact_strength = 8.0;
  /// Readout gain of the group-copy head: an attention head in an early
  /// layer that favours the group most recently mentioned in the prompt.
  /// Without it group preferences ignore context entirely. 0 disables.
  double context_copy = 0.8;

  void validate(const ModelConfig& config, const Vocabulary& vocab) const;
  bool operator==(const PlantedAssociationSpec&) const = default;

  bool uses_copy_head(const ModelConfig&) const { return context_copy > 0.0 && !associations.empty(); }
  std::size_t copy_layer() const { return layer_to_plant == 1 ? 0 : 1; }

  /// Concept i -> groups[i % n], margin 0.3, plus one fact per cue/answer pair.
  static PlantedAssociationSpec make_default(const Vocabulary& vocab, std::size_t layer,
                                             double margin = 0.3);
};

struct ModelWeights {
  ModelConfig config;
  Vocabulary vocab;
  PlantedAssociationSpec planted;  // metadata; empty for random models
  Matrix token_embedding;          // vocab x d_model
  Matrix position_embedding;       // max_seq x d_model
  std::vector<LayerWeights> layers;
  NormWeights final_norm;
  Matrix w_end;  // vocab x d_model

  bool operator==(const ModelWeights&) const = default;
};

struct ForwardTrace {
  Vector logits;                        // at the last position
  std::vector<Vector> mlp_activations;  // m^l at the last position, post-hook
  std::vector<Vector> mlp_inputs;       // normalized MLP input at the last position
};

/// Replaces the last-token MLP output of a layer before the residual add.
using ActivationTransform = std::function<Vector(std::size_t layer, std::span<const float>)>;

struct InterventionHooks {
  std::map<std::size_t, ActivationTransform> by_layer;
  bool empty() const { return by_layer.empty(); }
};

ForwardTrace forward(const ModelWeights& model, std::span<const int> tokens,
                     const InterventionHooks* hooks = nullptr);

Vector next_token_distribution(const ModelWeights& model, std::span<const int> tokens,
                               const InterventionHooks* hooks = nullptr);

/// P(g_i | x) renormalized over the group set.
Vector group_probabilities(std::span<const float> dist, std::span<const int> groups);

/// Teacher-forced sum of log P(continuation_j | prefix, continuation_<j). Hooks
/// fire at the last position of every step.
double sequence_log_likelihood(const ModelWeights& model, std::span<const int> prefix,
                               std::span<const int> continuation,
                               const InterventionHooks* hooks = nullptr);

/// Seeded small-scale random initialization.
ModelWeights init_random_model(const ModelConfig& config, const Vocabulary& vocab,
                               std::uint64_t seed);

/// Random init plus planted concept -> group associations and control facts.
/// Throws ConstructionFailed if calibration does not reach every margin within
/// 32 doublings.
ModelWeights build_planted_model(const ModelConfig& config, const Vocabulary& vocab,
                                 const PlantedAssociationSpec& spec, std::uint64_t seed);

/// Raw group-probability gap (target minus best other group) for the prompt
/// [<bos>, concept]; used by calibration and post-load verification.
struct MarginCheck {
  int concept_token = 0;
  int group_token = 0;
  double required = 0.0;
  double gap = 0.0;
  bool ok() const { return gap >= required; }
};
std::vector<MarginCheck> verify_planted_margins(const ModelWeights& model);

}  // namespace fairmed

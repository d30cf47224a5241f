#pragma once

#include <filesystem>

#include "fairmed/model.hpp"
#include "fairmed/prober.hpp"
#include "json.hpp"

namespace fairmed {

inline constexpr const char* kModelFormat = "fairmed-model/1";

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PlantedAssociationSpec& s);
PlantedAssociationSpec planted_spec_from_json(const nlohmann::json& j);

/// Writes `config.json` and `weights.bin` into `dir` (created if missing).
void save_model(const ModelWeights& model, const std::filesystem::path& dir);
/// Throws FormatError for a bad header, manifest/shape mismatch, truncated or
/// oversized blob, or a planted margin that no longer holds.
ModelWeights load_model(const std::filesystem::path& dir);

/// Same tensor container with "kind": "prober"; stores every layer's prober
/// plus F1 reports, layer stds and group names.
void save_probers(const ProberSet& set, const std::filesystem::path& dir);
ProberSet load_probers(const std::filesystem::path& dir);

/// `meta.json`, `activations.bin`, `labels.bin` for one layer.
void save_activation_dataset(const ActivationDataset& ds, const std::filesystem::path& dir);
ActivationDataset load_activation_dataset(const std::filesystem::path& dir);

/// One `layer_<l>` subdirectory per layer.
void save_collected(const CollectedActivations& c, const std::filesystem::path& dir);
CollectedActivations load_collected(const std::filesystem::path& dir);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace fairmed

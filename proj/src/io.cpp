#include "fairmed/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fairmed/errors.hpp"

namespace fairmed {

static_assert(std::endian::native == std::endian::little, "weights.bin is little-endian");

namespace fs = std::filesystem;
using nlohmann::json;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), e.byte);
  }
}

void write_json_file(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw InvalidArgument("write failed for " + path.string());
}

namespace {

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad field '") + key + "': " + e.what());
  }
}

// Tensor views shared by save and load so the manifest order has one source.
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float>* data;
  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
  }
};

void add_matrix(std::vector<TensorRef>& out, std::string name, Matrix& m, std::size_t rows, std::size_t cols) {
  m.rows = rows;
  m.cols = cols;
  out.push_back({std::move(name), {rows, cols}, &m.data});
}

void add_vector(std::vector<TensorRef>& out, std::string name, Vector& v, std::size_t n) {
  out.push_back({std::move(name), {n}, &v});
}

std::vector<TensorRef> model_tensors(ModelWeights& m) {
  const ModelConfig& c = m.config;
  const std::size_t d = c.d_model;
  std::vector<TensorRef> t;
  add_matrix(t, "token_embedding", m.token_embedding, c.vocab_size, d);
  add_matrix(t, "position_embedding", m.position_embedding, c.max_seq, d);
  m.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights& lw = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add_vector(t, p + "attn_norm.gain", lw.attn_norm.gain, d);
    add_vector(t, p + "attn_norm.bias", lw.attn_norm.bias, d);
    add_matrix(t, p + "attn_query", lw.attn_query, d, d);
    add_matrix(t, p + "attn_key", lw.attn_key, d, d);
    add_matrix(t, p + "attn_value", lw.attn_value, d, d);
    add_matrix(t, p + "attn_output", lw.attn_output, d, d);
    add_vector(t, p + "query_bias", lw.query_bias, d);
    add_vector(t, p + "key_bias", lw.key_bias, d);
    add_vector(t, p + "value_bias", lw.value_bias, d);
    add_vector(t, p + "output_bias", lw.output_bias, d);
    add_vector(t, p + "mlp_norm.gain", lw.mlp_norm.gain, d);
    add_vector(t, p + "mlp_norm.bias", lw.mlp_norm.bias, d);
    add_matrix(t, p + "w_key", lw.w_key, c.d_ff, d);
    add_matrix(t, p + "w_value", lw.w_value, d, c.d_ff);
  }
  add_vector(t, "final_norm.gain", m.final_norm.gain, d);
  add_vector(t, "final_norm.bias", m.final_norm.bias, d);
  add_matrix(t, "w_end", m.w_end, c.vocab_size, d);
  return t;
}

std::vector<TensorRef> prober_tensors(std::vector<Prober>& probers, std::size_t d, std::size_t hidden,
                                      std::size_t n_groups) {
  std::vector<TensorRef> t;
  for (std::size_t l = 0; l < probers.size(); ++l) {
    Prober& p = probers[l];
    const std::string pre = "probers." + std::to_string(l) + ".";
    add_matrix(t, pre + "w1", p.w1, hidden, d);
    add_vector(t, pre + "b1", p.b1, hidden);
    add_matrix(t, pre + "w2", p.w2, n_groups, hidden);
    add_vector(t, pre + "b2", p.b2, n_groups);
  }
  return t;
}

// Checks sizes before touching the blob, then writes manifest order.
json write_tensors(const std::vector<TensorRef>& tensors, const fs::path& blob_path) {
  json manifest = json::array();
  std::ofstream out(blob_path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + blob_path.string());
  std::size_t offset = 0;
  for (const TensorRef& t : tensors) {
    if (t.data->size() != t.numel())
      throw InvalidArgument("tensor " + t.name + " has " + std::to_string(t.data->size()) +
                            " values, shape needs " + std::to_string(t.numel()));
    const std::size_t bytes = t.numel() * sizeof(float);
    out.write(reinterpret_cast<const char*>(t.data->data()), static_cast<std::streamsize>(bytes));
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"length", bytes}});
    offset += bytes;
  }
  if (!out) throw InvalidArgument("write failed for " + blob_path.string());
  return manifest;
}

std::vector<char> read_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void read_tensors(const json& manifest, const std::vector<TensorRef>& tensors, const fs::path& blob_path) {
  if (!manifest.is_array()) throw FormatError("tensor manifest is not an array");
  if (manifest.size() != tensors.size())
    throw FormatError("manifest lists " + std::to_string(manifest.size()) + " tensors, config needs " +
                      std::to_string(tensors.size()));
  const std::vector<char> blob = read_blob(blob_path);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const TensorRef& t = tensors[i];
    const json& e = manifest[i];
    const auto name = field<std::string>(e, "name");
    const auto shape = field<std::vector<std::size_t>>(e, "shape");
    const auto offset = field<std::size_t>(e, "offset");
    const auto length = field<std::size_t>(e, "length");
    if (name != t.name) throw FormatError("manifest entry " + std::to_string(i) + " is '" + name + "', expected '" + t.name + "'", offset);
    if (shape != t.shape) throw FormatError("tensor " + t.name + ": shape does not match config", offset);
    if (length != t.numel() * sizeof(float))
      throw FormatError("tensor " + t.name + ": byte length " + std::to_string(length) + " does not match shape", offset);
    if (offset != expected) throw FormatError("tensor " + t.name + ": offset out of manifest order", offset);
    if (offset + length > blob.size())
      throw FormatError("tensor " + t.name + ": weights.bin truncated (" + std::to_string(blob.size()) + " bytes)", blob.size());
    expected += length;
  }
  if (blob.size() != expected)
    throw FormatError("weights.bin has " + std::to_string(blob.size() - expected) + " trailing bytes", expected);
  std::size_t offset = 0;
  for (const TensorRef& t : tensors) {
    t.data->resize(t.numel());
    std::memcpy(t.data->data(), blob.data() + offset, t.numel() * sizeof(float));
    for (std::size_t k = 0; k < t.numel(); ++k)
      if (!std::isfinite((*t.data)[k]))
        throw FormatError("tensor " + t.name + ": non-finite value", offset + k * sizeof(float));
    offset += t.numel() * sizeof(float);
  }
}

json read_header(const fs::path& dir, const char* kind) {
  json j = read_json_file(dir / "config.json");
  if (!j.is_object()) throw FormatError("config.json is not an object");
  if (j.value("format", "") != kModelFormat)
    throw FormatError(std::string("config.json: format must be \"") + kModelFormat + "\"");
  if (j.value("kind", "") != kind) throw FormatError(std::string("config.json: kind must be \"") + kind + "\"");
  return j;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_seq", c.max_seq}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = field<std::size_t>(j, "vocab_size");
  c.d_model = field<std::size_t>(j, "d_model");
  c.n_layers = field<std::size_t>(j, "n_layers");
  c.n_heads = field<std::size_t>(j, "n_heads");
  c.d_ff = field<std::size_t>(j, "d_ff");
  c.max_seq = field<std::size_t>(j, "max_seq");
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

json to_json(const Vocabulary& v) {
  return {{"names", v.names},     {"bos", v.bos},         {"unknown", v.unknown},
          {"attribute", v.attribute}, {"groups", v.groups}, {"concepts", v.concepts},
          {"cues", v.cues},       {"answers", v.answers}, {"fillers", v.fillers}};
}

Vocabulary vocabulary_from_json(const json& j) {
  Vocabulary v;
  v.names = field<std::vector<std::string>>(j, "names");
  v.bos = field<int>(j, "bos");
  v.unknown = field<int>(j, "unknown");
  v.attribute = field<std::string>(j, "attribute");
  v.groups = field<std::vector<int>>(j, "groups");
  v.concepts = field<std::vector<int>>(j, "concepts");
  v.cues = field<std::vector<int>>(j, "cues");
  v.answers = field<std::vector<int>>(j, "answers");
  v.fillers = field<std::vector<int>>(j, "fillers");
  auto check = [&](int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= v.size())
      throw FormatError("vocabulary id " + std::to_string(id) + " out of range");
  };
  check(v.bos);
  check(v.unknown);
  for (const auto* list : {&v.groups, &v.concepts, &v.cues, &v.answers, &v.fillers})
    for (int id : *list) check(id);
  if (v.cues.size() != v.answers.size()) throw FormatError("vocabulary: cues and answers differ in length");
  return v;
}

json to_json(const PlantedAssociationSpec& s) {
  json assoc = json::array();
  for (const auto& a : s.associations)
    assoc.push_back({{"concept_token", a.concept_token}, {"group_token", a.group_token}, {"margin", a.margin}});
  json facts = json::array();
  for (const auto& f : s.facts) facts.push_back({{"cue", f.cue}, {"answer", f.answer}});
  return {{"associations", assoc},          {"layer_to_plant", s.layer_to_plant},
          {"facts", facts},                 {"fact_strength", s.fact_strength},
          {"context_copy", s.context_copy}};
}

PlantedAssociationSpec planted_spec_from_json(const json& j) {
  PlantedAssociationSpec s;
  s.layer_to_plant = field<std::size_t>(j, "layer_to_plant");
  s.fact_strength = j.contains("fact_strength") ? field<double>(j, "fact_strength") : s.fact_strength;
  s.context_copy = j.contains("context_copy") ? field<double>(j, "context_copy") : s.context_copy;
  const json assoc = j.contains("associations") ? j.at("associations") : json::array();
  for (const json& a : assoc)
    s.associations.push_back({field<int>(a, "concept_token"), field<int>(a, "group_token"),
                              a.contains("margin") ? field<double>(a, "margin") : 0.3});
  const json facts = j.contains("facts") ? j.at("facts") : json::array();
  for (const json& f : facts) s.facts.push_back({field<int>(f, "cue"), field<int>(f, "answer")});
  return s;
}

void save_model(const ModelWeights& model, const fs::path& dir) {
  model.config.validate();
  fs::create_directories(dir);
  ModelWeights copy = model;  // tensor views need mutable storage
  json j = to_json(model.config);
  j["format"] = kModelFormat;
  j["kind"] = "model";
  j["vocab"] = to_json(model.vocab);
  j["planted"] = to_json(model.planted);
  j["tensors"] = write_tensors(model_tensors(copy), dir / "weights.bin");
  write_json_file(j, dir / "config.json");
}

ModelWeights load_model(const fs::path& dir) {
  const json j = read_header(dir, "model");
  ModelWeights m;
  m.config = model_config_from_json(j);
  m.vocab = vocabulary_from_json(field<json>(j, "vocab"));
  if (m.vocab.size() != m.config.vocab_size) throw FormatError("vocabulary size does not match vocab_size");
  m.planted = planted_spec_from_json(field<json>(j, "planted"));
  try {
    m.planted.validate(m.config, m.vocab);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("planted spec: ") + e.what());
  }
  read_tensors(field<json>(j, "tensors"), model_tensors(m), dir / "weights.bin");
  for (const MarginCheck& c : verify_planted_margins(m))
    if (!c.ok()) {
      std::ostringstream msg;
      msg << "planted margin violated after load: concept " << c.concept_token << " gap " << c.gap
          << " < " << c.required;
      throw FormatError(msg.str());
    }
  return m;
}

void save_probers(const ProberSet& set, const fs::path& dir) {
  if (set.probers.empty()) throw InvalidArgument("save_probers: empty prober set");
  const Prober& first = set.probers.front();
  for (const Prober& p : set.probers) {
    p.validate();
    if (p.input_dim() != first.input_dim() || p.hidden() != first.hidden() || p.n_groups() != first.n_groups())
      throw InvalidArgument("save_probers: probers differ in shape");
  }
  fs::create_directories(dir);
  std::vector<Prober> copy = set.probers;
  json reports = json::array();
  for (const auto& r : set.reports) reports.push_back({{"layer", r.layer}, {"f1", r.f1}, {"val_loss", r.val_loss}});
  json j = {{"format", kModelFormat},
            {"kind", "prober"},
            {"layers", set.probers.size()},
            {"d_model", first.input_dim()},
            {"hidden", first.hidden()},
            {"n_groups", first.n_groups()},
            {"group_names", set.group_names},
            {"layer_std", set.layer_std},
            {"reports", reports}};
  j["tensors"] = write_tensors(prober_tensors(copy, first.input_dim(), first.hidden(), first.n_groups()),
                               dir / "weights.bin");
  write_json_file(j, dir / "config.json");
}

ProberSet load_probers(const fs::path& dir) {
  const json j = read_header(dir, "prober");
  const auto layers = field<std::size_t>(j, "layers");
  const auto d = field<std::size_t>(j, "d_model");
  const auto hidden = field<std::size_t>(j, "hidden");
  const auto n_groups = field<std::size_t>(j, "n_groups");
  if (layers == 0 || d == 0 || hidden == 0 || n_groups < 2) throw FormatError("prober header has empty dimensions");
  ProberSet set;
  set.group_names = field<std::vector<std::string>>(j, "group_names");
  set.layer_std = field<std::vector<double>>(j, "layer_std");
  if (set.layer_std.size() != layers) throw FormatError("layer_std length does not match layers");
  for (const json& r : field<json>(j, "reports"))
    set.reports.push_back({field<std::size_t>(r, "layer"), field<double>(r, "f1"), field<double>(r, "val_loss")});
  if (set.reports.size() != layers) throw FormatError("reports length does not match layers");
  set.probers.resize(layers);
  read_tensors(field<json>(j, "tensors"), prober_tensors(set.probers, d, hidden, n_groups), dir / "weights.bin");
  return set;
}

void save_activation_dataset(const ActivationDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t d = ds.dim();
  const std::size_t n = ds.n_groups();
  std::ofstream act(dir / "activations.bin", std::ios::binary);
  std::ofstream lab(dir / "labels.bin", std::ios::binary);
  if (!act || !lab) throw InvalidArgument("cannot write activation dataset in " + dir.string());
  for (const ActivationRecord& r : ds.records()) {
    act.write(reinterpret_cast<const char*>(r.activation.data()), static_cast<std::streamsize>(d * sizeof(float)));
    lab.write(reinterpret_cast<const char*>(r.label.data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!act || !lab) throw InvalidArgument("write failed in " + dir.string());
  write_json_file({{"layer", ds.layer()}, {"records", ds.size()}, {"d_model", d}, {"n", n}, {"std", ds.stddev()}},
                  dir / "meta.json");
}

ActivationDataset load_activation_dataset(const fs::path& dir) {
  const json meta = read_json_file(dir / "meta.json");
  const auto layer = field<std::size_t>(meta, "layer");
  const auto count = field<std::size_t>(meta, "records");
  const auto d = field<std::size_t>(meta, "d_model");
  const auto n = field<std::size_t>(meta, "n");
  const std::vector<char> act = read_blob(dir / "activations.bin");
  const std::vector<char> lab = read_blob(dir / "labels.bin");
  if (act.size() != count * d * sizeof(float))
    throw FormatError("activations.bin: expected " + std::to_string(count * d * sizeof(float)) + " bytes",
                      std::min(act.size(), count * d * sizeof(float)));
  if (lab.size() != count * n * sizeof(float))
    throw FormatError("labels.bin: expected " + std::to_string(count * n * sizeof(float)) + " bytes",
                      std::min(lab.size(), count * n * sizeof(float)));
  std::vector<ActivationRecord> records(count);
  for (std::size_t i = 0; i < count; ++i) {
    records[i].activation.resize(d);
    records[i].label.resize(n);
    std::memcpy(records[i].activation.data(), act.data() + i * d * sizeof(float), d * sizeof(float));
    std::memcpy(records[i].label.data(), lab.data() + i * n * sizeof(float), n * sizeof(float));
  }
  try {
    return ActivationDataset(layer, std::move(records));
  } catch (const std::exception& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
}

void save_collected(const CollectedActivations& c, const fs::path& dir) {
  for (const ActivationDataset& ds : c.layers)
    save_activation_dataset(ds, dir / ("layer_" + std::to_string(ds.layer())));
}

CollectedActivations load_collected(const fs::path& dir) {
  CollectedActivations c;
  for (std::size_t l = 0; fs::exists(dir / ("layer_" + std::to_string(l))); ++l) {
    c.layers.push_back(load_activation_dataset(dir / ("layer_" + std::to_string(l))));
    if (c.layers.back().layer() != l) throw FormatError("layer_" + std::to_string(l) + "/meta.json names another layer");
  }
  if (c.layers.empty()) throw FormatError("no layer_0 directory in " + dir.string());
  for (const ActivationRecord& r : c.layers.front().records()) c.labels.push_back(r.label);
  for (const ActivationDataset& ds : c.layers)
    if (ds.size() != c.labels.size()) throw FormatError("layers hold different record counts");
  return c;
}

}  // namespace fairmed

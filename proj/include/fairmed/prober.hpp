#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "fairmed/corpus.hpp"
#include "fairmed/model.hpp"
#include "fairmed/numerics.hpp"

namespace fairmed {

struct ActivationRecord {
  Vector activation;  // m^l at the last prompt token
  Vector label;       // renormalized group distribution
  bool operator==(const ActivationRecord&) const = default;
};

/// Per-layer (activation, soft label) records. `stddev()` is the population
/// standard deviation over every entry of every activation and is kept in sync
/// with the records.
class ActivationDataset {
 public:
  explicit ActivationDataset(std::size_t layer = 0) : layer_(layer) {}
  ActivationDataset(std::size_t layer, std::vector<ActivationRecord> records);

  void add(ActivationRecord record);
  void clear();

  std::size_t layer() const { return layer_; }
  const std::vector<ActivationRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t dim() const { return records_.empty() ? 0 : records_.front().activation.size(); }
  std::size_t n_groups() const { return records_.empty() ? 0 : records_.front().label.size(); }
  double stddev() const { return stddev_; }

 private:
  void check(const ActivationRecord& r) const;
  void recompute();

  std::size_t layer_;
  std::vector<ActivationRecord> records_;
  double sum_ = 0.0;
  double sum_sq_ = 0.0;
  std::size_t count_ = 0;
  double stddev_ = 0.0;
};

struct CollectedActivations {
  std::vector<ActivationDataset> layers;  // one per model layer
  std::vector<Vector> labels;             // one per prompt, shared by all layers
};

/// One forward pass per prompt; results ordered by prompt index for any
/// thread count.
CollectedActivations collect_activations(const ModelWeights& model,
                                         const std::vector<CorpusEntry>& corpus,
                                         const AttributeSpec& attribute, std::size_t threads = 1,
                                         const InterventionHooks* hooks = nullptr);

/// Seeded shuffle, then |val| = round(ratio * N).
std::pair<ActivationDataset, ActivationDataset> train_val_split(const ActivationDataset& dataset,
                                                                double ratio, std::uint64_t seed);

/// softmax(w2 relu(w1 m + b1) + b2)
struct Prober {
  Matrix w1;  // hidden x d_model
  Vector b1;
  Matrix w2;  // n_groups x hidden
  Vector b2;

  std::size_t hidden() const { return w1.rows; }
  std::size_t input_dim() const { return w1.cols; }
  std::size_t n_groups() const { return w2.rows; }
  void validate() const;
  bool operator==(const Prober&) const = default;

  static Prober zeros(std::size_t d_model, std::size_t hidden, std::size_t n_groups);
};

Vector prober_forward(const Prober& p, std::span<const float> m);

/// Either KL(f(m) || U) or soft-label cross-entropy -sum y log f(m).
struct ProberObjective {
  enum class Kind { kl_to_uniform, soft_cross_entropy };
  Kind kind = Kind::kl_to_uniform;
  Vector target;

  static ProberObjective uniform() { return {}; }
  static ProberObjective soft_label(Vector y) { return {Kind::soft_cross_entropy, std::move(y)}; }
};

struct LossAndGradient {
  double loss = 0.0;
  Vector grad;  // d loss / d m
};

LossAndGradient prober_loss_and_input_gradient(const Prober& p, std::span<const float> m,
                                               const ProberObjective& objective);

struct ProberHyper {
  std::size_t hidden = 1024;
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
  /// Toy models use min(1024, 8 * d_model) hidden units.
  static std::size_t hidden_for(std::size_t d_model) { return std::min<std::size_t>(1024, 8 * d_model); }
};

/// Mini-batch Adam on soft-label cross-entropy. If `epoch_losses` is given it
/// receives the full-dataset mean loss after every epoch.
Prober train_prober(const ActivationDataset& train, const ProberHyper& hyper,
                    std::vector<double>* epoch_losses = nullptr);

double mean_cross_entropy(const Prober& p, const ActivationDataset& data);

/// Macro F1 over `n_groups` classes comparing argmax(prober) with argmax(label);
/// classes with no support and no predictions score 0.
double evaluate_f1(const Prober& p, const ActivationDataset& val, std::size_t n_groups);

/// Macro F1 from raw class indices.
double macro_f1(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& actual,
                std::size_t n_classes);

struct ProberReport {
  std::size_t layer = 0;
  double f1 = 0.0;
  double val_loss = 0.0;
};

/// Probers for every layer, plus the per-layer activation std used for epsilon.
struct ProberSet {
  std::vector<Prober> probers;
  std::vector<ProberReport> reports;
  std::vector<double> layer_std;
  std::vector<std::string> group_names;
};

/// Algorithm: split each layer's dataset, train, score F1 on the held-out part.
ProberSet train_probers(const CollectedActivations& collected, double val_ratio,
                        const ProberHyper& hyper, std::uint64_t split_seed);

}  // namespace fairmed

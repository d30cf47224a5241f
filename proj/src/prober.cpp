#include "fairmed/prober.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairmed/errors.hpp"
#include "fairmed/parallel.hpp"
#include "fairmed/rng.hpp"

namespace fairmed {

// ---------------------------------------------------------------------------
// ActivationDataset

ActivationDataset::ActivationDataset(std::size_t layer, std::vector<ActivationRecord> records)
    : layer_(layer) {
  for (auto& r : records) check(r);
  records_ = std::move(records);
  recompute();
}

void ActivationDataset::check(const ActivationRecord& r) const {
  if (r.activation.empty()) throw InvalidArgument("activation record is empty");
  if (!records_.empty() && (r.activation.size() != dim() || r.label.size() != n_groups()))
    throw InvalidArgument("activation record shape differs from the dataset");
  require_finite(r.activation, "activation record");
  double s = 0.0;
  for (float v : r.label) {
    if (!(v >= 0.0f)) throw InvalidArgument("label entries must be non-negative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-4) throw InvalidArgument("label does not sum to 1");
}

void ActivationDataset::add(ActivationRecord record) {
  check(record);
  for (float v : record.activation) {
    sum_ += v;
    sum_sq_ += static_cast<double>(v) * v;
  }
  count_ += record.activation.size();
  records_.push_back(std::move(record));
  const double mean = sum_ / double(count_);
  stddev_ = std::sqrt(std::max(0.0, sum_sq_ / double(count_) - mean * mean));
}

void ActivationDataset::clear() {
  records_.clear();
  recompute();
}

void ActivationDataset::recompute() {
  // Two-pass for accuracy; the incremental sums only serve add().
  sum_ = sum_sq_ = 0.0;
  count_ = 0;
  for (const auto& r : records_)
    for (float v : r.activation) {
      sum_ += v;
      sum_sq_ += static_cast<double>(v) * v;
      ++count_;
    }
  if (count_ == 0) {
    stddev_ = 0.0;
    return;
  }
  const double mean = sum_ / double(count_);
  double acc = 0.0;
  for (const auto& r : records_)
    for (float v : r.activation) acc += (v - mean) * (v - mean);
  stddev_ = std::sqrt(acc / double(count_));
}

// ---------------------------------------------------------------------------
// Collection and splitting

CollectedActivations collect_activations(const ModelWeights& model,
                                         const std::vector<CorpusEntry>& corpus,
                                         const AttributeSpec& attribute, std::size_t threads,
                                         const InterventionHooks* hooks) {
  if (corpus.empty()) throw InvalidArgument("collect_activations: empty corpus");
  attribute.validate();
  const std::vector<int> groups = attribute.group_tokens();
  for (int g : groups)
    if (g < 0 || std::size_t(g) >= model.config.vocab_size)
      throw InvalidArgument("collect_activations: group token out of range");

  std::vector<ForwardTrace> traces(corpus.size());
  parallel_for(corpus.size(), threads,
               [&](std::size_t i) { traces[i] = forward(model, corpus[i].sentence, hooks); });

  CollectedActivations out;
  for (std::size_t l = 0; l < model.config.n_layers; ++l) out.layers.emplace_back(l);
  for (auto& tr : traces) {
    Vector label = group_probabilities(softmax(tr.logits), groups);
    for (std::size_t l = 0; l < model.config.n_layers; ++l)
      out.layers[l].add({std::move(tr.mlp_activations[l]), label});
    out.labels.push_back(std::move(label));
  }
  return out;
}

std::pair<ActivationDataset, ActivationDataset> train_val_split(const ActivationDataset& dataset,
                                                                double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("train_val_split: ratio must be in (0,1)");
  if (dataset.size() < 2) throw InvalidArgument("train_val_split: need at least two records");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(ratio * double(dataset.size())));
  std::vector<ActivationRecord> train, val;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val : train).push_back(dataset.records()[order[i]]);
  return {ActivationDataset(dataset.layer(), std::move(train)),
          ActivationDataset(dataset.layer(), std::move(val))};
}

// ---------------------------------------------------------------------------
// Prober network

void Prober::validate() const {
  if (w1.rows == 0 || w1.cols == 0) throw InvalidArgument("prober: empty first layer");
  if (b1.size() != w1.rows || w2.cols != w1.rows || b2.size() != w2.rows)
    throw InvalidArgument("prober: inconsistent shapes");
  if (w2.rows < 2) throw InvalidArgument("prober: needs at least two groups");
}

Prober Prober::zeros(std::size_t d_model, std::size_t hidden, std::size_t n_groups) {
  return {Matrix(hidden, d_model), Vector(hidden, 0.0f), Matrix(n_groups, hidden), Vector(n_groups, 0.0f)};
}

namespace {

struct Activations {
  std::vector<double> pre;     // w1 m + b1
  std::vector<double> hidden;  // relu(pre)
  std::vector<double> probs;   // softmax(w2 hidden + b2)
};

Activations run(const Prober& p, std::span<const float> m) {
  if (m.size() != p.input_dim())
    throw InvalidArgument("prober: activation length " + std::to_string(m.size()) +
                          " does not match input dim " + std::to_string(p.input_dim()));
  Activations a;
  a.pre.resize(p.hidden());
  a.hidden.resize(p.hidden());
  for (std::size_t j = 0; j < p.hidden(); ++j) {
    a.pre[j] = dot(p.w1.row(j), m) + p.b1[j];
    a.hidden[j] = a.pre[j] > 0.0 ? a.pre[j] : 0.0;
  }
  std::vector<double> logits(p.n_groups());
  for (std::size_t k = 0; k < p.n_groups(); ++k) {
    auto row = p.w2.row(k);
    double s = p.b2[k];
    for (std::size_t j = 0; j < p.hidden(); ++j) s += row[j] * a.hidden[j];
    logits[k] = s;
  }
  a.probs = softmax(std::span<const double>(logits));
  return a;
}

// d loss / d logits
std::vector<double> logit_gradient(const std::vector<double>& probs, const ProberObjective& obj,
                                   double& loss) {
  const std::size_t n = probs.size();
  std::vector<double> g(n);
  if (obj.kind == ProberObjective::Kind::kl_to_uniform) {
    // KL = sum p log p + log n; dKL/dz_j = p_j (log p_j + H) with H = -sum p log p.
    double neg_entropy = 0.0;
    for (double p : probs) neg_entropy += p * std::log(std::max(p, 1e-300));
    loss = std::max(0.0, neg_entropy + std::log(double(n)));
    for (std::size_t j = 0; j < n; ++j) g[j] = probs[j] * (std::log(std::max(probs[j], 1e-300)) - neg_entropy);
  } else {
    if (obj.target.size() != n) throw InvalidArgument("prober: target length mismatch");
    double target_mass = 0.0;
    loss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      loss -= obj.target[j] * std::log(std::max(probs[j], 1e-300));
      target_mass += obj.target[j];
    }
    for (std::size_t j = 0; j < n; ++j) g[j] = target_mass * probs[j] - obj.target[j];
  }
  return g;
}

}  // namespace

Vector prober_forward(const Prober& p, std::span<const float> m) {
  Activations a = run(p, m);
  return Vector(a.probs.begin(), a.probs.end());
}

LossAndGradient prober_loss_and_input_gradient(const Prober& p, std::span<const float> m,
                                               const ProberObjective& objective) {
  Activations a = run(p, m);
  LossAndGradient out;
  std::vector<double> dz = logit_gradient(a.probs, objective, out.loss);
  std::vector<double> dhidden(p.hidden(), 0.0);
  for (std::size_t k = 0; k < p.n_groups(); ++k) {
    auto row = p.w2.row(k);
    for (std::size_t j = 0; j < p.hidden(); ++j) dhidden[j] += dz[k] * row[j];
  }
  std::vector<double> dm(p.input_dim(), 0.0);
  for (std::size_t j = 0; j < p.hidden(); ++j) {
    if (a.pre[j] <= 0.0 || dhidden[j] == 0.0) continue;
    auto row = p.w1.row(j);
    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] += dhidden[j] * row[i];
  }
  out.grad.assign(dm.begin(), dm.end());
  return out;
}

// ---------------------------------------------------------------------------
// Training

void ProberHyper::validate() const {
  if (hidden == 0 || epochs == 0 || batch == 0) throw InvalidArgument("prober hyper: counts must be >= 1");
  if (!(lr > 0.0)) throw InvalidArgument("prober hyper: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw InvalidArgument("prober hyper: Adam betas must be in [0,1)");
}

namespace {

struct AdamState {
  std::vector<double> m, v;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  void step(std::span<float> params, std::span<const double> grad, const ProberHyper& h, std::size_t t) {
    const double c1 = 1.0 - std::pow(h.beta1, double(t));
    const double c2 = 1.0 - std::pow(h.beta2, double(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      params[i] = static_cast<float>(params[i] - h.lr * mhat / (std::sqrt(vhat) + h.adam_eps));
    }
  }
};

void uniform_fill(std::span<float> out, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (float& x : out) x = static_cast<float>(u(rng));
}

}  // namespace

Prober train_prober(const ActivationDataset& train, const ProberHyper& hyper,
                    std::vector<double>* epoch_losses) {
  hyper.validate();
  if (train.empty()) throw InvalidArgument("train_prober: empty training set");
  const std::size_t d = train.dim();
  const std::size_t n = train.n_groups();
  const std::size_t hid = hyper.hidden;
  if (n < 2) throw InvalidArgument("train_prober: labels need at least two groups");

  // Init and shuffle draw from independent streams so the initial weights do
  // not depend on the dataset size.
  Rng init_rng(derive_seed(hyper.seed, 1));
  Rng shuffle_rng(derive_seed(hyper.seed, 2));
  Prober p = Prober::zeros(d, hid, n);
  uniform_fill(p.w1.data, 1.0 / std::sqrt(double(d)), init_rng);
  uniform_fill(p.b1, 1.0 / std::sqrt(double(d)), init_rng);
  uniform_fill(p.w2.data, 1.0 / std::sqrt(double(hid)), init_rng);
  uniform_fill(p.b2, 1.0 / std::sqrt(double(hid)), init_rng);

  AdamState s_w1(p.w1.data.size()), s_b1(hid), s_w2(p.w2.data.size()), s_b2(n);
  std::vector<double> g_w1(p.w1.data.size()), g_b1(hid), g_w2(p.w2.data.size()), g_b2(n);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  std::vector<double> dhidden(hid);
  ProberObjective objective{ProberObjective::Kind::soft_cross_entropy, {}};

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      const std::size_t stop = std::min(order.size(), start + hyper.batch);
      std::fill(g_w1.begin(), g_w1.end(), 0.0);
      std::fill(g_b1.begin(), g_b1.end(), 0.0);
      std::fill(g_w2.begin(), g_w2.end(), 0.0);
      std::fill(g_b2.begin(), g_b2.end(), 0.0);
      const double inv_batch = 1.0 / double(stop - start);
      for (std::size_t b = start; b < stop; ++b) {
        const ActivationRecord& rec = train.records()[order[b]];
        Activations a = run(p, rec.activation);
        objective.target = rec.label;
        double loss = 0.0;
        std::vector<double> dz = logit_gradient(a.probs, objective, loss);
        std::fill(dhidden.begin(), dhidden.end(), 0.0);
        for (std::size_t k = 0; k < n; ++k) {
          const double gk = dz[k] * inv_batch;
          g_b2[k] += gk;
          auto row = p.w2.row(k);
          double* gw = g_w2.data() + k * hid;
          for (std::size_t j = 0; j < hid; ++j) {
            gw[j] += gk * a.hidden[j];
            dhidden[j] += gk * row[j];
          }
        }
        for (std::size_t j = 0; j < hid; ++j) {
          if (a.pre[j] <= 0.0) continue;
          const double gj = dhidden[j];
          g_b1[j] += gj;
          double* gw = g_w1.data() + j * d;
          for (std::size_t i = 0; i < d; ++i) gw[i] += gj * rec.activation[i];
        }
      }
      ++step;
      s_w1.step(p.w1.data, g_w1, hyper, step);
      s_b1.step(p.b1, g_b1, hyper, step);
      s_w2.step(p.w2.data, g_w2, hyper, step);
      s_b2.step(p.b2, g_b2, hyper, step);
    }
    if (epoch_losses) epoch_losses->push_back(mean_cross_entropy(p, train));
  }
  require_finite(p.w1.data, "prober weights");
  require_finite(p.w2.data, "prober weights");
  return p;
}

double mean_cross_entropy(const Prober& p, const ActivationDataset& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : data.records()) {
    Activations a = run(p, r.activation);
    for (std::size_t k = 0; k < a.probs.size(); ++k)
      total -= r.label[k] * std::log(std::max(a.probs[k], 1e-300));
  }
  return total / double(data.size());
}

double macro_f1(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& actual,
                std::size_t n_classes) {
  if (predicted.size() != actual.size()) throw InvalidArgument("macro_f1: length mismatch");
  if (predicted.empty() || n_classes == 0) return 0.0;
  std::vector<double> tp(n_classes, 0.0), fp(n_classes, 0.0), fn(n_classes, 0.0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= n_classes || actual[i] >= n_classes) throw InvalidArgument("macro_f1: class out of range");
    if (predicted[i] == actual[i]) {
      tp[predicted[i]] += 1;
    } else {
      fp[predicted[i]] += 1;
      fn[actual[i]] += 1;
    }
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    sum += denom > 0 ? 2 * tp[c] / denom : 0.0;
  }
  return sum / double(n_classes);
}

double evaluate_f1(const Prober& p, const ActivationDataset& val, std::size_t n_groups) {
  if (val.empty()) throw InvalidArgument("evaluate_f1: empty validation set");
  std::vector<std::size_t> predicted, actual;
  for (const auto& r : val.records()) {
    predicted.push_back(argmax(prober_forward(p, r.activation)));
    actual.push_back(argmax(r.label));
  }
  return macro_f1(predicted, actual, n_groups);
}

ProberSet train_probers(const CollectedActivations& collected, double val_ratio,
                        const ProberHyper& hyper, std::uint64_t split_seed) {
  ProberSet set;
  for (const ActivationDataset& layer : collected.layers) {
    auto [train, val] = train_val_split(layer, val_ratio, split_seed);
    ProberHyper h = hyper;
    h.seed = derive_seed(hyper.seed, layer.layer());
    Prober p = train_prober(train, h);
    set.reports.push_back({layer.layer(), evaluate_f1(p, val, layer.n_groups()), mean_cross_entropy(p, val)});
    set.probers.push_back(std::move(p));
    set.layer_std.push_back(layer.stddev());
  }
  return set;
}

}  // namespace fairmed

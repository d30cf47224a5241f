#include "fairmed/neutralizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fairmed/errors.hpp"
#include "fairmed/rng.hpp"

namespace fairmed {

void NeutralizerConfig::validate() const {
  if (!(beta > 0.0)) throw InvalidArgument("neutralizer: beta must be positive");
  if (iters < 1) throw InvalidArgument("neutralizer: iters must be >= 1");
  if (!(step_divisor > 0.0)) throw InvalidArgument("neutralizer: step_divisor must be positive");
}

double compute_epsilon(double layer_std, double lambda) {
  if (!(lambda > 0.0)) throw InvalidArgument("compute_epsilon: lambda must be positive");
  if (!(layer_std >= 0.0)) throw InvalidArgument("compute_epsilon: std must be non-negative");
  return lambda * layer_std;
}

double compute_epsilon(const ActivationDataset& dataset, double lambda) {
  if (dataset.empty()) throw InvalidArgument("compute_epsilon: empty dataset");
  return compute_epsilon(dataset.stddev(), lambda);
}

namespace {

double kl_of(const Prober& p, std::span<const float> m) { return kl_to_uniform(prober_forward(p, m)); }

void check_inputs(std::span<const float> m, const Prober& p, float eps) {
  if (m.size() != p.input_dim())
    throw InvalidArgument("neutralize: activation length " + std::to_string(m.size()) +
                          " does not match prober input " + std::to_string(p.input_dim()));
  if (!(eps >= 0.0f) || !std::isfinite(eps)) throw InvalidArgument("neutralize: eps must be finite and >= 0");
}

}  // namespace

NeutralizeResult neutralize(std::span<const float> m, const Prober& p, float eps,
                            const NeutralizerConfig& cfg) {
  cfg.validate();
  check_inputs(m, p, eps);
  NeutralizeResult out;
  if (eps == 0.0f) {
    out.activation.assign(m.begin(), m.end());
    out.final_loss = kl_of(p, m);
    out.losses.push_back(out.final_loss);
    return out;
  }

  Rng rng(cfg.seed);
  // eps_start ~ U(0, eps) on the open interval.
  std::uniform_real_distribution<double> unit(std::nextafter(0.0, 1.0), 1.0);
  double start_radius = 0.0;
  do {
    start_radius = unit(rng) * eps;
  } while (!(start_radius > 0.0 && start_radius < eps));
  std::normal_distribution<double> noise(0.0, start_radius / 2.0);
  Vector current(m.begin(), m.end());
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double delta = std::clamp(noise(rng), -start_radius, start_radius);
    current[i] = static_cast<float>(m[i] + delta);
  }
  current = project_linf(current, m, eps);

  const float step = static_cast<float>(eps / cfg.step_divisor);
  const ProberObjective objective = ProberObjective::uniform();
  bool converged = false;
  for (std::size_t i = 0; i < cfg.iters; ++i) {
    LossAndGradient lg = prober_loss_and_input_gradient(p, current, objective);
    out.losses.push_back(lg.loss);
    if (lg.loss < cfg.beta) {
      converged = true;
      break;
    }
    Vector dir = sign(lg.grad);
    for (std::size_t k = 0; k < current.size(); ++k) current[k] -= step * dir[k];
    current = project_linf(current, m, eps);
    ++out.iterations_used;
  }
  if (!converged) out.losses.push_back(kl_of(p, current));
  out.final_loss = out.losses.back();
  require_finite(current, "neutralized activation");
  out.activation = std::move(current);
  return out;
}

Vector neutralize_fgsm(std::span<const float> m, const Prober& p, float eps) {
  check_inputs(m, p, eps);
  LossAndGradient lg = prober_loss_and_input_gradient(p, m, ProberObjective::uniform());
  Vector dir = sign(lg.grad);
  Vector out(m.begin(), m.end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= eps * dir[k];
  return project_linf(out, m, eps);
}

Vector random_perturb(std::span<const float> m, float eps, std::uint64_t seed) {
  if (!(eps >= 0.0f) || !std::isfinite(eps)) throw InvalidArgument("random_perturb: eps must be finite and >= 0");
  Vector out(m.begin(), m.end());
  if (eps == 0.0f) return out;
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-double(eps), double(eps));
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<float>(m[k] + u(rng));
  return project_linf(out, m, eps);
}

}  // namespace fairmed

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fairmed/numerics.hpp"
#include "fairmed/prober.hpp"

namespace fairmed {

struct NeutralizerConfig {
  double beta = 0.03;          // stop once KL(f(m*) || U) < beta
  std::size_t iters = 20;      // N
  double step_divisor = 15.0;  // alpha = eps / step_divisor
  std::uint64_t seed = 0;

  void validate() const;
};

/// eps^l = lambda * std^l
double compute_epsilon(const ActivationDataset& dataset, double lambda);
double compute_epsilon(double layer_std, double lambda);

struct NeutralizeResult {
  Vector activation;               // m*
  std::size_t iterations_used = 0;  // signed-gradient steps taken
  double final_loss = 0.0;          // KL at the returned m*
  std::vector<double> losses;       // every KL evaluation, in order
};

/// Random start inside a sampled eps_start cube, then up to N projected
/// signed-gradient steps on KL-to-uniform with early stopping.
/// |m* - m|_inf <= eps always; eps == 0 returns m unchanged.
NeutralizeResult neutralize(std::span<const float> m, const Prober& p, float eps,
                            const NeutralizerConfig& cfg);

/// Single signed step of size eps descending KL-to-uniform, then projection.
Vector neutralize_fgsm(std::span<const float> m, const Prober& p, float eps);

/// Uniform noise in the eps-cube around m.
Vector random_perturb(std::span<const float> m, float eps, std::uint64_t seed);

}  // namespace fairmed

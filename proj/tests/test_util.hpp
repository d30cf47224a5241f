#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "fairmed/model.hpp"
#include "fairmed/pipeline.hpp"
#include "fairmed/prober.hpp"

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fairmed_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Default 8-layer planted model (seed 0), built once per process.
inline const fairmed::ModelWeights& planted_model() {
  static const fairmed::ModelWeights m = [] {
    fairmed::ModelConfig cfg;
    auto vocab = fairmed::Vocabulary::make_default(cfg.vocab_size);
    return fairmed::build_planted_model(cfg, vocab, fairmed::PlantedAssociationSpec::make_default(vocab, 4), 0);
  }();
  return m;
}

/// Default seed-0 run through prober training and benchmark generation.
inline const fairmed::SeedArtifacts& seed0_artifacts() {
  static const fairmed::SeedArtifacts a = fairmed::prepare_seed(fairmed::RunConfig{}, 0);
  return a;
}

inline fairmed::Prober random_prober(std::size_t d, std::size_t hidden, std::size_t n, std::mt19937_64& rng,
                                     float scale = 0.5f) {
  std::normal_distribution<float> n01(0.0f, 1.0f);
  fairmed::Prober p = fairmed::Prober::zeros(d, hidden, n);
  for (float& v : p.w1.data) v = scale * n01(rng);
  for (float& v : p.b1) v = 0.1f * n01(rng);
  for (float& v : p.w2.data) v = scale * n01(rng);
  for (float& v : p.b2) v = 0.1f * n01(rng);
  return p;
}

inline fairmed::Vector random_vector(std::size_t d, std::mt19937_64& rng, float scale = 1.0f) {
  std::normal_distribution<float> n01(0.0f, scale);
  fairmed::Vector v(d);
  for (float& x : v) x = n01(rng);
  return v;
}

/// Double-precision reference of the prober loss, written independently of
/// the library so finite differences are not limited by float inputs.
inline double reference_loss(const fairmed::Prober& p, std::span<const double> m,
                             const fairmed::ProberObjective& obj) {
  const std::size_t h = p.hidden(), n = p.n_groups();
  std::vector<double> hid(h);
  for (std::size_t j = 0; j < h; ++j) {
    double s = p.b1[j];
    for (std::size_t i = 0; i < m.size(); ++i) s += double(p.w1(j, i)) * m[i];
    hid[j] = s > 0.0 ? s : 0.0;
  }
  std::vector<double> z(n);
  double zmax = -1e300;
  for (std::size_t k = 0; k < n; ++k) {
    double s = p.b2[k];
    for (std::size_t j = 0; j < h; ++j) s += double(p.w2(k, j)) * hid[j];
    z[k] = s;
    zmax = std::max(zmax, s);
  }
  double lse = 0.0;
  for (double v : z) lse += std::exp(v - zmax);
  lse = zmax + std::log(lse);
  double loss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double logp = z[k] - lse;
    if (obj.kind == fairmed::ProberObjective::Kind::kl_to_uniform)
      loss += std::exp(logp) * (logp + std::log(double(n)));
    else
      loss -= obj.target[k] * logp;
  }
  return loss;
}

/// Smallest |w1_j . m + b1_j| / ||w1_j||_1 over hidden units: how far m is
/// from the nearest rectifier kink in the l-inf sense.
inline double kink_distance(const fairmed::Prober& p, std::span<const float> m) {
  double best = 1e300;
  for (std::size_t j = 0; j < p.hidden(); ++j) {
    double s = p.b1[j], norm = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      s += double(p.w1(j, i)) * m[i];
      norm += std::abs(double(p.w1(j, i)));
    }
    if (norm > 0.0) best = std::min(best, std::abs(s) / norm);
  }
  return best;
}

}  // namespace testutil

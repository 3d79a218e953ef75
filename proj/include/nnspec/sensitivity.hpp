#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nnspec/inference.hpp"
#include "nnspec/metrics.hpp"
#include "nnspec/model_io.hpp"
#include "nnspec/random.hpp"

namespace nnspec {

inline constexpr double kDefaultNoiseNorm = 0.1;

struct SensitivityReport {
  std::string inject_tap, observe_tap;
  std::vector<double> per_sample_psi;
  std::vector<std::size_t> sample_ids;  // aligned with per_sample_psi
  double median = 0.0, q25 = 0.0, q75 = 0.0;
  double noise_norm = kDefaultNoiseNorm;
  std::uint64_t seed = 0;
  std::size_t excluded = 0;  // samples with ||M(x)|| = 0
};

// Elementwise standard Gaussian rescaled to the exact norm `noise_norm`.
Eigen::VectorXd sphere_noise(Eigen::Index dim, double noise_norm, Rng& rng);

// psi = ||M(x + eta ||x||) - M(x)||^2 / ||M(x)||^2 for one draw of eta.
// Returns NaN when ||M(x)|| = 0.
double noise_sensitivity_psi(const Eigen::VectorXd& x,
                             const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& map,
                             double noise_norm, Rng& rng);

// One draw per sample, seeded from (seed, sample index). Observing at the
// injection tap measures the identity map.
SensitivityReport noise_sensitivity(const ModelGraph& model, const DatasetBlob& dataset,
                                    const TapPoint& inject, const TapPoint& observe,
                                    double noise_norm, std::uint64_t seed,
                                    const ForwardOptions& options = {});

// Several observation taps sharing one noisy pass per sample; reports follow
// the order of `observe`.
std::vector<SensitivityReport> noise_sensitivity(const ModelGraph& model,
                                                 const DatasetBlob& dataset,
                                                 const TapPoint& inject,
                                                 std::span<const TapPoint> observe,
                                                 double noise_norm, std::uint64_t seed,
                                                 const ForwardOptions& options = {});

ScoreSet sensitivity_scores(const SensitivityReport& report);

// AUROC of psi with higher_is_ood.
double sensitivity_auroc(const SensitivityReport& id, const SensitivityReport& ood);

}  // namespace nnspec

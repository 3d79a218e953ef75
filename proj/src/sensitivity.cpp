#include "nnspec/sensitivity.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "nnspec/error.hpp"

namespace nnspec {

namespace {

double squared_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return s;
}

void summarize(SensitivityReport& r) {
  if (r.per_sample_psi.empty()) return;
  const QuantileSummary q = quantile_summary(r.per_sample_psi);
  r.median = q.median;
  r.q25 = q.q25;
  r.q75 = q.q75;
}

}  // namespace

Eigen::VectorXd sphere_noise(Eigen::Index dim, double noise_norm, Rng& rng) {
  Eigen::VectorXd eta(dim);
  for (Eigen::Index i = 0; i < dim; ++i) eta(i) = rng.normal();
  const double n = eta.norm();
  if (n > 0.0) eta *= noise_norm / n;
  return eta;
}

double noise_sensitivity_psi(const Eigen::VectorXd& x,
                             const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& map,
                             double noise_norm, Rng& rng) {
  const Eigen::VectorXd eta = sphere_noise(x.size(), noise_norm, rng);
  const Eigen::VectorXd clean = map(x);
  const double denom = clean.squaredNorm();
  if (!(denom > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::VectorXd noisy = map(x + eta * x.norm());
  return (noisy - clean).squaredNorm() / denom;
}

std::vector<SensitivityReport> noise_sensitivity(const ModelGraph& model,
                                                 const DatasetBlob& dataset,
                                                 const TapPoint& inject,
                                                 std::span<const TapPoint> observe,
                                                 double noise_norm, std::uint64_t seed,
                                                 const ForwardOptions& options) {
  if (!(noise_norm >= 0.0) || !std::isfinite(noise_norm))
    throw DomainError("noise norm must be finite and nonnegative");
  const std::size_t inject_node = model.node_of(inject.layer_id);
  std::size_t last = inject_node;
  for (const TapPoint& o : observe) {
    const std::size_t node = model.node_of(o.layer_id);
    if (node < inject_node)
      throw ValidationError("observe tap '" + o.layer_id + "' precedes inject tap '" +
                            inject.layer_id + "'");
    last = std::max(last, node);
  }
  if (!is_valid_start(model, inject_node, last)) {
    throw TopologyError("inject tap '" + inject.layer_id +
                        "' lies inside a residual skip span; choose a block-boundary tap");
  }

  std::vector<std::size_t> all;
  std::span<const std::size_t> indices = options.indices;
  if (indices.empty()) {
    all.resize(dataset.count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    indices = all;
  }

  std::vector<SensitivityReport> reports(observe.size());
  for (std::size_t o = 0; o < observe.size(); ++o) {
    reports[o].inject_tap = inject.layer_id;
    reports[o].observe_tap = observe[o].layer_id;
    reports[o].noise_norm = noise_norm;
    reports[o].seed = seed;
  }

  // Clean pass captures the injection tap and every observation tap.
  std::vector<TapPoint> clean_taps{inject};
  clean_taps.insert(clean_taps.end(), observe.begin(), observe.end());
  const std::size_t batch_size = std::max<std::size_t>(1, options.batch_size);

  for (std::size_t begin = 0; begin < indices.size(); begin += batch_size) {
    const auto chunk = indices.subspan(begin, std::min(batch_size, indices.size() - begin));
    const ForwardResult clean =
        forward_tensor(model, normalize_images(model, dataset, chunk), clean_taps);
    const Tensor& x = clean.features[0].activations;
    const std::size_t dim = x.size() / x.dim(0);

    Tensor noisy(x.dims());
    std::vector<Eigen::VectorXd> deltas(chunk.size());
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      Rng rng(derive_seed(seed, chunk[b]));
      const auto xb = x.data().subspan(b * dim, dim);
      const double xnorm = std::sqrt(squared_norm(xb));
      deltas[b] = sphere_noise(static_cast<Eigen::Index>(dim), noise_norm, rng) * xnorm;
      for (std::size_t i = 0; i < dim; ++i)
        noisy.data()[b * dim + i] = static_cast<float>(xb[i] + deltas[b](static_cast<Eigen::Index>(i)));
    }
    const std::vector<Tensor> perturbed = forward_from(model, inject, noisy, observe);

    for (std::size_t o = 0; o < observe.size(); ++o) {
      const Tensor& ref = clean.features[o + 1].activations;
      const std::size_t out_dim = ref.size() / ref.dim(0);
      const bool identity = model.node_of(observe[o].layer_id) == inject_node;
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        const auto clean_b = ref.data().subspan(b * out_dim, out_dim);
        const double denom = squared_norm(clean_b);
        if (!(denom > 0.0)) {
          ++reports[o].excluded;
          continue;
        }
        double num = 0.0;
        if (identity) {
          // M is the identity: the difference is the perturbation itself.
          num = deltas[b].squaredNorm();
        } else {
          const auto noisy_b = perturbed[o].data().subspan(b * out_dim, out_dim);
          for (std::size_t i = 0; i < out_dim; ++i) {
            const double d = static_cast<double>(noisy_b[i]) - clean_b[i];
            num += d * d;
          }
        }
        reports[o].per_sample_psi.push_back(num / denom);
        reports[o].sample_ids.push_back(chunk[b]);
      }
    }
  }
  for (auto& r : reports) summarize(r);
  return reports;
}

SensitivityReport noise_sensitivity(const ModelGraph& model, const DatasetBlob& dataset,
                                    const TapPoint& inject, const TapPoint& observe,
                                    double noise_norm, std::uint64_t seed,
                                    const ForwardOptions& options) {
  const TapPoint taps[] = {observe};
  return std::move(noise_sensitivity(model, dataset, inject, taps, noise_norm, seed, options).front());
}

ScoreSet sensitivity_scores(const SensitivityReport& report) {
  ScoreSet s{"sensitivity", Orientation::higher_is_ood, report.per_sample_psi, report.excluded};
  return s;
}

double sensitivity_auroc(const SensitivityReport& id, const SensitivityReport& ood) {
  if (id.inject_tap != ood.inject_tap || id.observe_tap != ood.observe_tap) {
    throw ValidationError("sensitivity_auroc: reports use different tap pairs (" + id.inject_tap +
                          "->" + id.observe_tap + " vs " + ood.inject_tap + "->" +
                          ood.observe_tap + ")");
  }
  if (id.per_sample_psi.empty() || ood.per_sample_psi.empty())
    throw ValidationError("sensitivity_auroc: empty score list");
  return auroc(sensitivity_scores(id), sensitivity_scores(ood));
}

}  // namespace nnspec

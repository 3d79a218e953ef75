#include "nnspec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "nnspec/error.hpp"

namespace nnspec {

std::string_view to_string(Orientation o) {
  return o == Orientation::higher_is_id ? "higher_is_id" : "higher_is_ood";
}

void ScoreSet::push(double score) {
  if (std::isfinite(score)) {
    scores.push_back(score);
  } else {
    ++excluded_count;
  }
}

double auroc(std::span<const double> id, std::span<const double> ood, Orientation orientation) {
  if (id.empty() || ood.empty()) throw ValidationError("auroc: score lists must be nonempty");
  std::vector<double> sorted_id(id.begin(), id.end());
  std::sort(sorted_id.begin(), sorted_id.end());
  // Twice the Mann-Whitney U: 2 per OOD-favoured pair, 1 per tie.
  std::uint64_t doubled = 0;
  for (double s : ood) {
    const auto lo = std::lower_bound(sorted_id.begin(), sorted_id.end(), s);
    const auto hi = std::upper_bound(lo, sorted_id.end(), s);
    const auto below = static_cast<std::uint64_t>(lo - sorted_id.begin());
    const auto ties = static_cast<std::uint64_t>(hi - lo);
    const auto above = static_cast<std::uint64_t>(sorted_id.end() - hi);
    doubled += 2 * (orientation == Orientation::higher_is_ood ? below : above) + ties;
  }
  const double pairs = static_cast<double>(id.size()) * static_cast<double>(ood.size());
  return static_cast<double>(doubled) / (2.0 * pairs);
}

double auroc(const ScoreSet& id, const ScoreSet& ood) {
  if (id.orientation != ood.orientation) {
    throw ValidationError("auroc: orientation mismatch between '" + id.name + "' (" +
                          std::string(to_string(id.orientation)) + ") and '" + ood.name + "' (" +
                          std::string(to_string(ood.orientation)) + ")");
  }
  return auroc(id.scores, ood.scores, id.orientation);
}

ScoreSet max_softmax(const Tensor& logits) {
  if (logits.rank() != 2 || logits.cols() < 2) {
    throw ValidationError("max_softmax expects [B, K] logits with K >= 2, got " +
                          format_dims(logits.dims()));
  }
  ScoreSet out{"probability", Orientation::higher_is_id, {}, 0};
  out.scores.reserve(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    double top = logits(b, 0);
    for (std::size_t k = 1; k < logits.cols(); ++k) top = std::max(top, static_cast<double>(logits(b, k)));
    double denom = 0.0;
    for (std::size_t k = 0; k < logits.cols(); ++k) denom += std::exp(logits(b, k) - top);
    out.push(1.0 / denom);
  }
  return out;
}

std::vector<std::size_t> predictions(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predictions expects [B, K] logits");
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols(); ++k)
      if (logits(b, k) > logits(b, best)) best = k;
    out[b] = best;
  }
  return out;
}

std::vector<double> prediction_rates(const Tensor& logits) {
  const auto pred = predictions(logits);
  if (pred.empty()) throw ValidationError("prediction_rates: no samples");
  std::vector<std::size_t> counts(logits.cols(), 0);
  for (std::size_t p : pred) ++counts[p];
  std::vector<double> rates(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k)
    rates[k] = static_cast<double>(counts[k]) / static_cast<double>(pred.size());
  return rates;
}

double coefficient_of_variation(std::span<const double> rates) {
  if (rates.size() < 2) throw ValidationError("coefficient_of_variation needs K >= 2");
  double mean = 0.0;
  for (double r : rates) mean += r;
  mean /= static_cast<double>(rates.size());
  if (mean == 0.0) throw DomainError("coefficient_of_variation: rates have zero mean");
  double var = 0.0;
  for (double r : rates) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rates.size());
  return std::sqrt(var) / mean;
}

double QuantileSummary::error_bar() const {
  return 0.5 * (std::abs(median - q25) + std::abs(q75 - median));
}

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty list");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

QuantileSummary quantile_summary(std::span<const double> values) {
  return {quantile(values, 0.5), quantile(values, 0.25), quantile(values, 0.75)};
}

}  // namespace nnspec

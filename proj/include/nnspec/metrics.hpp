#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nnspec/tensor.hpp"

namespace nnspec {

enum class Orientation { higher_is_id, higher_is_ood };

std::string_view to_string(Orientation o);

// Per-sample detector output. Only finite scores are stored; samples whose
// score was undefined are counted in `excluded_count`.
struct ScoreSet {
  std::string name;
  Orientation orientation = Orientation::higher_is_ood;
  std::vector<double> scores;
  std::size_t excluded_count = 0;

  // Appends a score, counting non-finite values as excluded.
  void push(double score);
};

// Probability that a random OOD sample scores more OOD-like than a random ID
// sample, ties counted half (Mann-Whitney). Exact: computed from integer pair
// counts.
double auroc(const ScoreSet& id, const ScoreSet& ood);

// Raw variant on plain score lists.
double auroc(std::span<const double> id, std::span<const double> ood, Orientation orientation);

// Max softmax probability per row of [B, K] logits; higher_is_id.
ScoreSet max_softmax(const Tensor& logits);

// argmax per row, ties to the lowest index.
std::vector<std::size_t> predictions(const Tensor& logits);

// Fraction of rows whose argmax is each class.
std::vector<double> prediction_rates(const Tensor& logits);

// Population standard deviation of the rates over their mean.
double coefficient_of_variation(std::span<const double> rates);

struct QuantileSummary {
  double median = 0.0, q25 = 0.0, q75 = 0.0;
  // Mean distance from the median to the two quartiles.
  double error_bar() const;
};

// Linear-interpolation quantile (position q * (n - 1) in sorted order).
double quantile(std::span<const double> values, double q);
QuantileSummary quantile_summary(std::span<const double> values);

}  // namespace nnspec

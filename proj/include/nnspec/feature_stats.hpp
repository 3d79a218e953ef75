#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nnspec/inference.hpp"
#include "nnspec/linalg.hpp"
#include "nnspec/metrics.hpp"
#include "nnspec/model_io.hpp"

namespace nnspec {

inline constexpr double kPseudoinverseCut = 1e-6;

// Class means and the tied covariance of pixel-averaged features at one tap,
// with the eigendecomposition used for the Moore-Penrose inverse.
struct CovarianceBundle {
  TapPoint tap;
  Eigen::MatrixXd class_means;  // [K, C]
  Eigen::MatrixXd tied_cov;     // [C, C]
  SymEig eig;
  double cut = kPseudoinverseCut;
  std::size_t kept_dims = 0;    // eigenvalues with lambda_k / lambda_0 >= cut
  std::vector<double> inv_eigenvalues;
  std::vector<std::size_t> class_counts;

  bool degenerate() const noexcept { return kept_dims == 0; }
};

// Sigma = (1/K) sum_c (1/N_c) sum_i (x_ic - mu_c)(x_ic - mu_c)^T over the rows
// of `features` ([N, C]). Every class in [0, class_count) needs at least two
// samples.
CovarianceBundle fit_covariance(const Eigen::MatrixXd& features, std::span<const int> labels,
                                std::size_t class_count, const TapPoint& tap = {},
                                double cut = kPseudoinverseCut);

// Runs the model over the labelled training set and fits at `tap`.
CovarianceBundle fit_covariance(const ModelGraph& model, const DatasetBlob& train,
                                const TapPoint& tap, const ForwardOptions& options = {});

// min_c sqrt((x - mu_c)^T Sigma^+ (x - mu_c)) per row; higher_is_ood. Throws
// NumericError when the covariance is degenerate.
ScoreSet mahalanobis(const CovarianceBundle& bundle, const Eigen::MatrixXd& features);
ScoreSet mahalanobis(const CovarianceBundle& bundle, const FeatureBatch& features);

// Pixel-averaged features of a batch in double precision.
Eigen::MatrixXd feature_matrix(const Tensor& features);

// Tensor blobs plus a JSON sidecar (bundle.json) in `dir`.
void save_covariance(const CovarianceBundle& bundle, const std::filesystem::path& dir);
CovarianceBundle load_covariance(const std::filesystem::path& dir);

}  // namespace nnspec

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nnspec/inference.hpp"
#include "nnspec/linalg.hpp"
#include "nnspec/metrics.hpp"
#include "nnspec/model_io.hpp"

namespace nnspec {

inline constexpr double kDefaultProjectionEpsilon = 1e-2;

// ||A||_F^2 / ||A||_2^2. DomainError for the zero matrix.
double stable_rank(const Eigen::MatrixXd& a);
double stable_rank(const Tensor& a);

// The weight of a conv2d/linear layer seen as a map on local input vectors.
// For conv2d the input vector is one receptive-field patch, laid out as
// c * kh * kw + i * kw + j, and `conv` carries the patch geometry.
struct LocalLinearOp {
  std::string layer_id;
  Tensor matrix;
  std::optional<Conv2dParams> conv;
};

LocalLinearOp conv_local_operator(const ModelGraph& model, const std::string& layer_id);

// Right singular vectors whose singular values survive the relative cut.
struct ProjectionBasis {
  std::string layer_id;
  double epsilon = 0.0;
  Eigen::MatrixXd v_eps;  // [in_dim, r], orthonormal columns
  std::vector<double> kept_singular_values;
  std::optional<Conv2dParams> conv;

  std::size_t rank() const noexcept { return kept_singular_values.size(); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(v_eps.rows()); }
};

ProjectionBasis projection_basis(const LocalLinearOp& op, double epsilon);
// Reuses a factorization of op.matrix, for epsilon sweeps.
ProjectionBasis projection_basis(const LocalLinearOp& op, const Svd& factors, double epsilon);

struct ProjectionScores {
  ScoreSet norm;   // ||V^T x||
  ScoreSet ratio;  // ||V^T x|| / ||x||
};

// Scores the features that enter the layer. [B, D] features are projected
// directly. [B, C, H, W] features are cut into patches with the layer's conv
// geometry; each sample's score is the mean over its patches (the ratio
// averages only patches with nonzero norm, and a sample with none is
// excluded). Both sets are higher_is_id.
ProjectionScores projection_scores(const ProjectionBasis& basis, const Tensor& features);
ProjectionScores projection_scores(const ProjectionBasis& basis, const FeatureBatch& features);

struct LayerSpectrum {
  std::string layer_id;
  std::size_t rows = 0, cols = 0;
  Eigen::VectorXd singular_values;
};

std::vector<LayerSpectrum> weight_spectra(const ModelGraph& model);

struct ParameterCensus {
  std::uint64_t kept = 0;
  std::uint64_t total = 0;
  double ratio() const noexcept {
    return total ? static_cast<double>(kept) / static_cast<double>(total) : 0.0;
  }
};

// Per layer, a rank-r truncation is stored as r * (rows + cols) numbers when
// that is smaller than rows * cols.
ParameterCensus parameter_census(const ModelGraph& model, double epsilon);
ParameterCensus parameter_census(const std::vector<LayerSpectrum>& spectra, double epsilon);

}  // namespace nnspec

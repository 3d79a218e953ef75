#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nnspec/inference.hpp"
#include "nnspec/model_io.hpp"

namespace nnspec {

inline constexpr double kGramCut = 1e-6;
inline constexpr double kSimilarityCut = 1e-6;
inline constexpr std::size_t kDefaultGramSamples = 10000;

// Eigenbasis of a centered Gram matrix K = H K0 H after the relative cut.
struct GramEig {
  TapPoint tap;
  std::vector<std::size_t> sample_ids;
  std::uint64_t seed = 0;
  double cut = kGramCut;
  Eigen::VectorXd eigenvalues;  // kept, descending, positive
  Eigen::MatrixXd eigenvectors; // [N, d]

  std::size_t kept_dims() const noexcept { return static_cast<std::size_t>(eigenvalues.size()); }
  bool degenerate() const noexcept { return eigenvalues.size() == 0; }
};

struct SimilarityReport {
  std::string tap_a, tap_b;
  double cka = 0.0;
  double lr = 0.0;
  double cca = 0.0;
  double cka_matrix_stable_rank = 0.0;
  std::size_t gram_dims_a = 0, gram_dims_b = 0;
  std::size_t cka_dims = 0;
};

// Centered Gram matrix of the rows of `features` ([N, D]).
Eigen::MatrixXd centered_gram(const Eigen::MatrixXd& features);

GramEig gram_from_features(const Eigen::MatrixXd& features, const TapPoint& tap,
                           std::vector<std::size_t> sample_ids, double cut = kGramCut);

// Features are flattened per sample ([C*H*W] at conv taps). Samples are drawn
// uniformly without replacement from `seed`.
GramEig gram(const ModelGraph& model, const DatasetBlob& dataset, const TapPoint& tap,
             std::size_t n_samples, std::uint64_t seed, const ForwardOptions& options = {});

// Gram eigenbases for several taps from one forward pass over the same samples.
std::vector<GramEig> grams(const ModelGraph& model, const DatasetBlob& dataset,
                           std::span<const TapPoint> taps, std::size_t n_samples,
                           std::uint64_t seed, const ForwardOptions& options = {});

// Truncated CKA plus the LR and CCA scores and the CKA-matrix stable rank.
SimilarityReport cka(const GramEig& a, const GramEig& b, double eps_sim = kSimilarityCut);

struct CkaGrid {
  std::vector<std::string> taps;
  std::vector<std::vector<SimilarityReport>> cells;  // cells[i][j] = cka(tap_i, tap_j)
  std::vector<std::size_t> sample_ids;
  std::uint64_t seed = 0;
};

CkaGrid cka_grid(const ModelGraph& model, const DatasetBlob& dataset,
                 std::span<const TapPoint> taps, std::size_t n_samples, std::uint64_t seed,
                 const ForwardOptions& options = {});
CkaGrid cka_grid(const std::vector<GramEig>& grams);

// Heatmap CSV: header row and first column hold tap ids, cells hold CKA with
// six decimals.
std::string grid_csv(const CkaGrid& grid);

}  // namespace nnspec

#include "nnspec/similarity.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "nnspec/error.hpp"
#include "nnspec/linalg.hpp"
#include "nnspec/random.hpp"

namespace nnspec {

namespace {

constexpr Eigen::Index kGramBlock = 512;

// K0 = X X^T accumulated over column blocks of the flattened features, so the
// double-precision working copy stays bounded.
Eigen::MatrixXd gram_blocked(const Tensor& flat) {
  const Eigen::Index n = static_cast<Eigen::Index>(flat.dim(0));
  const Eigen::Index d = static_cast<Eigen::Index>(flat.size() / flat.dim(0));
  using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajorF> x(flat.data().data(), n, d);
  Eigen::MatrixXd k0 = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index start = 0; start < d; start += kGramBlock) {
    const Eigen::Index width = std::min(kGramBlock, d - start);
    const Eigen::MatrixXd block = x.middleCols(start, width).cast<double>();
    k0.selfadjointView<Eigen::Lower>().rankUpdate(block);
  }
  return k0.selfadjointView<Eigen::Lower>();
}

Eigen::MatrixXd center(const Eigen::MatrixXd& k0) {
  const Eigen::Index n = k0.rows();
  const Eigen::VectorXd row_mean = k0.rowwise().mean();
  const double grand = row_mean.mean();
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      k(i, j) = ((k0(i, j) - row_mean(i)) - row_mean(j)) + grand;
  return k;
}

GramEig eig_of_gram(const Eigen::MatrixXd& k, const TapPoint& tap,
                    std::vector<std::size_t> sample_ids, double cut) {
  const SymEig e = sym_eig(k);
  const std::size_t kept = relative_cut_rank(e.values, cut);
  GramEig g;
  g.tap = tap;
  g.sample_ids = std::move(sample_ids);
  g.cut = cut;
  g.eigenvalues = e.values.head(static_cast<Eigen::Index>(kept));
  g.eigenvectors = e.vectors.leftCols(static_cast<Eigen::Index>(kept));
  return g;
}

std::vector<std::size_t> choose_samples(const DatasetBlob& dataset, std::size_t n_samples,
                                        std::uint64_t seed) {
  if (n_samples < 2) throw ValidationError("gram needs at least 2 samples");
  if (n_samples > dataset.count) {
    throw ValidationError("gram: requested " + std::to_string(n_samples) +
                          " samples but dataset '" + dataset.name + "' has " +
                          std::to_string(dataset.count));
  }
  return sample_without_replacement(dataset.count, n_samples, seed);
}

Tensor flatten_batch(const Tensor& t) { return t.reshaped({t.dim(0), t.size() / t.dim(0)}); }

}  // namespace

Eigen::MatrixXd centered_gram(const Eigen::MatrixXd& features) {
  return center(features * features.transpose());
}

GramEig gram_from_features(const Eigen::MatrixXd& features, const TapPoint& tap,
                           std::vector<std::size_t> sample_ids, double cut) {
  if (features.rows() < 2) throw ValidationError("gram needs at least 2 samples");
  if (sample_ids.empty()) {
    sample_ids.resize(static_cast<std::size_t>(features.rows()));
    for (std::size_t i = 0; i < sample_ids.size(); ++i) sample_ids[i] = i;
  }
  return eig_of_gram(centered_gram(features), tap, std::move(sample_ids), cut);
}

std::vector<GramEig> grams(const ModelGraph& model, const DatasetBlob& dataset,
                           std::span<const TapPoint> taps, std::size_t n_samples,
                           std::uint64_t seed, const ForwardOptions& options) {
  const std::vector<std::size_t> ids = choose_samples(dataset, n_samples, seed);
  ForwardOptions opts = options;
  opts.indices = ids;
  const ForwardResult r = forward(model, dataset, taps, opts);
  std::vector<GramEig> out;
  for (std::size_t t = 0; t < taps.size(); ++t) {
    GramEig g = eig_of_gram(center(gram_blocked(flatten_batch(r.features[t].activations))),
                            taps[t], ids, kGramCut);
    g.seed = seed;
    out.push_back(std::move(g));
  }
  return out;
}

GramEig gram(const ModelGraph& model, const DatasetBlob& dataset, const TapPoint& tap,
             std::size_t n_samples, std::uint64_t seed, const ForwardOptions& options) {
  const TapPoint taps[] = {tap};
  return std::move(grams(model, dataset, taps, n_samples, seed, options).front());
}

SimilarityReport cka(const GramEig& a, const GramEig& b, double eps_sim) {
  if (a.sample_ids != b.sample_ids) {
    throw ValidationError("cka: grams for '" + a.tap.layer_id + "' and '" + b.tap.layer_id +
                          "' were built from different samples");
  }
  if (a.degenerate() || b.degenerate()) {
    throw NumericError("cka: gram at '" + (a.degenerate() ? a.tap.layer_id : b.tap.layer_id) +
                       "' has no eigenvalue above the cut");
  }
  SimilarityReport r;
  r.tap_a = a.tap.layer_id;
  r.tap_b = b.tap.layer_id;
  r.gram_dims_a = a.kept_dims();
  r.gram_dims_b = b.kept_dims();

  const Eigen::MatrixXd d = a.eigenvectors.transpose() * b.eigenvectors;
  const Eigen::VectorXd sqrt_a = a.eigenvalues.cwiseSqrt();
  Eigen::MatrixXd m = sqrt_a.asDiagonal() * d * b.eigenvalues.asDiagonal() * d.transpose() *
                      sqrt_a.asDiagonal();
  m = 0.5 * (m + m.transpose());
  const SymEig e = sym_eig(m);
  r.cka_dims = relative_cut_rank(e.values, eps_sim);
  const Eigen::VectorXd kept = e.values.head(static_cast<Eigen::Index>(r.cka_dims));

  const double norm = std::sqrt(a.eigenvalues.squaredNorm() * b.eigenvalues.squaredNorm());
  r.cka = kept.sum() / norm;
  r.lr = (d.cwiseAbs2() * b.eigenvalues).sum() / b.eigenvalues.sum();
  r.cca = d.squaredNorm() / static_cast<double>(std::min(d.rows(), d.cols()));
  r.cka_matrix_stable_rank = r.cka_dims ? kept.squaredNorm() / (kept(0) * kept(0)) : 0.0;
  return r;
}

CkaGrid cka_grid(const std::vector<GramEig>& grams) {
  if (grams.size() < 2) throw ValidationError("cka_grid needs at least 2 taps");
  CkaGrid grid;
  grid.sample_ids = grams.front().sample_ids;
  grid.seed = grams.front().seed;
  for (const GramEig& g : grams) grid.taps.push_back(g.tap.layer_id);
  grid.cells.resize(grams.size());
  for (std::size_t i = 0; i < grams.size(); ++i)
    for (std::size_t j = 0; j < grams.size(); ++j) grid.cells[i].push_back(cka(grams[i], grams[j]));
  return grid;
}

CkaGrid cka_grid(const ModelGraph& model, const DatasetBlob& dataset,
                 std::span<const TapPoint> taps, std::size_t n_samples, std::uint64_t seed,
                 const ForwardOptions& options) {
  if (taps.size() < 2) throw ValidationError("cka_grid needs at least 2 taps");
  return cka_grid(grams(model, dataset, taps, n_samples, seed, options));
}

std::string grid_csv(const CkaGrid& grid) {
  std::ostringstream os;
  os << "tap";
  for (const auto& t : grid.taps) os << ',' << t;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < grid.taps.size(); ++i) {
    os << grid.taps[i];
    for (const auto& cell : grid.cells[i]) {
      std::snprintf(buf, sizeof buf, "%.6f", cell.cka);
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace nnspec

#include "nnspec/feature_stats.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "nnspec/error.hpp"

namespace nnspec {

namespace fs = std::filesystem;

namespace {

void attach_pseudoinverse(CovarianceBundle& b) {
  b.eig = sym_eig(b.tied_cov);
  b.kept_dims = relative_cut_rank(b.eig.values, b.cut);
  b.inv_eigenvalues.clear();
  for (std::size_t k = 0; k < b.kept_dims; ++k)
    b.inv_eigenvalues.push_back(1.0 / b.eig.values(static_cast<Eigen::Index>(k)));
}

}  // namespace

Eigen::MatrixXd feature_matrix(const Tensor& features) {
  return to_matrix(pixel_average(features));
}

CovarianceBundle fit_covariance(const Eigen::MatrixXd& features, std::span<const int> labels,
                                std::size_t class_count, const TapPoint& tap, double cut) {
  const Eigen::Index n = features.rows();
  const Eigen::Index c = features.cols();
  if (static_cast<std::size_t>(n) != labels.size())
    throw ValidationError("fit_covariance: " + std::to_string(n) + " feature rows but " +
                          std::to_string(labels.size()) + " labels");
  if (class_count == 0) throw ValidationError("fit_covariance: class_count must be positive");

  CovarianceBundle b;
  b.tap = tap;
  b.cut = cut;
  b.class_counts.assign(class_count, 0);
  b.class_means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(class_count), c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || static_cast<std::size_t>(y) >= class_count)
      throw ValidationError("fit_covariance: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(class_count) + ")");
    ++b.class_counts[static_cast<std::size_t>(y)];
    b.class_means.row(y) += features.row(i);
  }
  for (std::size_t k = 0; k < class_count; ++k) {
    if (b.class_counts[k] < 2)
      throw ValidationError("fit_covariance: class " + std::to_string(k) + " has " +
                            std::to_string(b.class_counts[k]) + " samples, needs at least 2");
    b.class_means.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(b.class_counts[k]);
  }

  // Second pass: per-class scatter, each normalized by its own count.
  std::vector<Eigen::MatrixXd> scatter(class_count, Eigen::MatrixXd::Zero(c, c));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const Eigen::VectorXd d = (features.row(i) - b.class_means.row(y)).transpose();
    scatter[static_cast<std::size_t>(y)].selfadjointView<Eigen::Lower>().rankUpdate(d);
  }
  b.tied_cov = Eigen::MatrixXd::Zero(c, c);
  for (std::size_t k = 0; k < class_count; ++k) {
    Eigen::MatrixXd full = scatter[k].selfadjointView<Eigen::Lower>();
    b.tied_cov += full / static_cast<double>(b.class_counts[k]);
  }
  b.tied_cov /= static_cast<double>(class_count);
  attach_pseudoinverse(b);
  return b;
}

CovarianceBundle fit_covariance(const ModelGraph& model, const DatasetBlob& train,
                                const TapPoint& tap, const ForwardOptions& options) {
  if (!train.labels)
    throw ValidationError("fit_covariance: dataset '" + train.name + "' has no labels");
  train.check_labels(model.class_count());
  const TapPoint taps[] = {tap};
  const ForwardResult r = forward(model, train, taps, options);
  std::vector<int> labels;
  if (options.indices.empty()) {
    labels = *train.labels;
  } else {
    for (std::size_t i : options.indices) labels.push_back((*train.labels)[i]);
  }
  return fit_covariance(to_matrix(r.features[0].pixel_avg), labels, model.class_count(), tap);
}

ScoreSet mahalanobis(const CovarianceBundle& bundle, const Eigen::MatrixXd& features) {
  if (bundle.degenerate())
    throw NumericError("mahalanobis: covariance at tap '" + bundle.tap.layer_id +
                       "' is degenerate (no eigenvalue above the cut)");
  if (features.cols() != bundle.tied_cov.cols())
    throw ShapeError("mahalanobis: feature dimension " + std::to_string(features.cols()) +
                     " differs from covariance dimension " + std::to_string(bundle.tied_cov.cols()));
  const Eigen::Index d = static_cast<Eigen::Index>(bundle.kept_dims);
  const Eigen::MatrixXd basis = bundle.eig.vectors.leftCols(d);
  Eigen::VectorXd inv(d);
  for (Eigen::Index k = 0; k < d; ++k) inv(k) = bundle.inv_eigenvalues[static_cast<std::size_t>(k)];
  // Whitened coordinates: z = V_d^T x scaled by lambda^-1/2.
  const Eigen::MatrixXd zx = (features * basis) * inv.cwiseSqrt().asDiagonal();
  const Eigen::MatrixXd zm = (bundle.class_means * basis) * inv.cwiseSqrt().asDiagonal();

  ScoreSet out{"feature", Orientation::higher_is_ood, {}, 0};
  out.scores.reserve(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < zx.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < zm.rows(); ++c) best = std::min(best, (zx.row(i) - zm.row(c)).squaredNorm());
    out.push(std::sqrt(best));
  }
  return out;
}

ScoreSet mahalanobis(const CovarianceBundle& bundle, const FeatureBatch& features) {
  return mahalanobis(bundle, to_matrix(features.pixel_avg));
}

void save_covariance(const CovarianceBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  write_tensor(dir / "class_means.spt", from_matrix(b.class_means));
  write_tensor(dir / "tied_cov.spt", from_matrix(b.tied_cov));
  write_tensor(dir / "eigenvalues.spt", from_matrix(b.eig.values));
  write_tensor(dir / "eigenvectors.spt", from_matrix(b.eig.vectors));
  nlohmann::json side{{"format", "nnspec-covariance"},
                      {"version", 1},
                      {"tap", b.tap.layer_id},
                      {"tap_position", std::string(kTapPosition)},
                      {"cut", b.cut},
                      {"kept_dims", b.kept_dims},
                      {"class_counts", b.class_counts}};
  std::ofstream out(dir / "bundle.json", std::ios::trunc);
  if (!out) throw IoError("cannot write '" + (dir / "bundle.json").string() + "'");
  out << side.dump(2) << '\n';
}

CovarianceBundle load_covariance(const fs::path& dir) {
  std::ifstream in(dir / "bundle.json");
  if (!in) throw IoError("cannot open '" + (dir / "bundle.json").string() + "'");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("covariance sidecar: ") + e.what());
  }
  if (side.value("format", std::string()) != "nnspec-covariance" || side.value("version", 0) != 1)
    throw FormatError("covariance sidecar has wrong format tag or version");
  CovarianceBundle b;
  try {
    b.tap.layer_id = side.at("tap").get<std::string>();
    b.cut = side.at("cut").get<double>();
    b.class_counts = side.at("class_counts").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("covariance sidecar: ") + e.what());
  }
  b.class_means = to_matrix(read_tensor(dir / "class_means.spt"));
  b.tied_cov = to_matrix(read_tensor(dir / "tied_cov.spt"));
  b.eig.values = to_matrix(read_tensor(dir / "eigenvalues.spt"));
  b.eig.vectors = to_matrix(read_tensor(dir / "eigenvectors.spt"));
  if (b.tied_cov.rows() != b.tied_cov.cols() || b.eig.vectors.rows() != b.tied_cov.rows() ||
      b.eig.values.size() != b.tied_cov.rows() || b.class_means.cols() != b.tied_cov.cols())
    throw ValidationError("covariance bundle tensors have inconsistent shapes");
  b.kept_dims = relative_cut_rank(b.eig.values, b.cut);
  for (std::size_t k = 0; k < b.kept_dims; ++k)
    b.inv_eigenvalues.push_back(1.0 / b.eig.values(static_cast<Eigen::Index>(k)));
  return b;
}

}  // namespace nnspec

#include "nnspec/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nnspec/error.hpp"

namespace nnspec {

double stable_rank(const Eigen::MatrixXd& a) {
  const double fro2 = a.squaredNorm();
  if (!(fro2 > 0.0)) throw DomainError("stable_rank of a zero matrix is undefined");
  const Svd f = svd(a);
  const double s0 = f.s(0);
  return fro2 / (s0 * s0);
}

double stable_rank(const Tensor& a) { return stable_rank(to_matrix(a)); }

LocalLinearOp conv_local_operator(const ModelGraph& model, const std::string& layer_id) {
  const LayerSpec& layer = model.layer(layer_id);
  LocalLinearOp op{layer_id, weight_matrix(model, layer_id), std::nullopt};
  if (layer.kind == LayerKind::conv2d) op.conv = std::get<Conv2dParams>(layer.params);
  return op;
}

ProjectionBasis projection_basis(const LocalLinearOp& op, const Svd& factors, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw DomainError("projection epsilon must lie in [0, 1)");
  const std::size_t r = std::max<std::size_t>(1, relative_cut_rank(factors.s, epsilon));
  ProjectionBasis basis;
  basis.layer_id = op.layer_id;
  basis.epsilon = epsilon;
  basis.conv = op.conv;
  basis.v_eps = factors.vt.topRows(static_cast<Eigen::Index>(r)).transpose();
  basis.kept_singular_values.assign(factors.s.data(), factors.s.data() + r);
  return basis;
}

ProjectionBasis projection_basis(const LocalLinearOp& op, double epsilon) {
  return projection_basis(op, svd(op.matrix), epsilon);
}

ProjectionScores projection_scores(const ProjectionBasis& basis, const Tensor& features) {
  ProjectionScores out{{"projection_norm", Orientation::higher_is_id, {}, 0},
                       {"projection_ratio", Orientation::higher_is_id, {}, 0}};
  const Eigen::Index dim = basis.v_eps.rows();

  Tensor rows;  // [B, P, D]
  if (basis.conv && features.rank() == 4) {
    rows = extract_patches(features, *basis.conv);
  } else if (features.rank() == 2) {
    rows = features.reshaped({features.dim(0), 1, features.dim(1)});
  } else {
    throw ShapeError("projection_scores: features " + format_dims(features.dims()) +
                     " do not match layer '" + basis.layer_id + "'");
  }
  if (rows.dim(2) != static_cast<std::size_t>(dim)) {
    throw ShapeError("projection_scores: feature dimension " + std::to_string(rows.dim(2)) +
                     " differs from basis input dimension " + std::to_string(dim) +
                     " of layer '" + basis.layer_id + "'");
  }

  const std::size_t batch = rows.dim(0), positions = rows.dim(1);
  using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (std::size_t b = 0; b < batch; ++b) {
    Eigen::Map<const RowMajorF> patch(rows.data().data() + b * positions * dim,
                                      static_cast<Eigen::Index>(positions), dim);
    const Eigen::MatrixXd x = patch.cast<double>();
    const Eigen::MatrixXd projected = x * basis.v_eps;
    double norm_sum = 0.0, ratio_sum = 0.0;
    std::size_t ratio_count = 0;
    for (Eigen::Index p = 0; p < x.rows(); ++p) {
      const double xp = projected.row(p).norm();
      const double xn = x.row(p).norm();
      norm_sum += xp;
      if (xn > 0.0) {
        ratio_sum += xp / xn;
        ++ratio_count;
      }
    }
    out.norm.push(norm_sum / static_cast<double>(positions));
    out.ratio.push(ratio_count ? ratio_sum / static_cast<double>(ratio_count)
                               : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

ProjectionScores projection_scores(const ProjectionBasis& basis, const FeatureBatch& features) {
  return projection_scores(basis, features.activations);
}

std::vector<LayerSpectrum> weight_spectra(const ModelGraph& model) {
  std::vector<LayerSpectrum> spectra;
  for (const std::string& id : model.weighted_layer_ids()) {
    const Tensor w = weight_matrix(model, id);
    spectra.push_back({id, w.rows(), w.cols(), svd(w).s});
  }
  return spectra;
}

ParameterCensus parameter_census(const std::vector<LayerSpectrum>& spectra, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw DomainError("census epsilon must lie in [0, 1)");
  ParameterCensus census;
  for (const LayerSpectrum& l : spectra) {
    const std::uint64_t dense = static_cast<std::uint64_t>(l.rows) * l.cols;
    const std::uint64_t r = relative_cut_rank(l.singular_values, epsilon);
    const std::uint64_t factored = r * (l.rows + l.cols);
    census.kept += factored < dense ? factored : dense;
    census.total += dense;
  }
  return census;
}

ParameterCensus parameter_census(const ModelGraph& model, double epsilon) {
  return parameter_census(weight_spectra(model), epsilon);
}

}  // namespace nnspec

#pragma once

#include <cstddef>
#include <span>

#include <Eigen/Dense>

#include "nnspec/tensor.hpp"

namespace nnspec {

// Eigenpairs of a symmetric matrix, eigenvalues descending. Column k of
// `vectors` pairs with values[k].
struct SymEig {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
};

// Thin SVD A = U diag(s) V^T with k = min(rows, cols) singular values,
// descending and nonnegative.
struct Svd {
  Eigen::MatrixXd u;   // rows x k
  Eigen::VectorXd s;   // k
  Eigen::MatrixXd vt;  // k x cols
};

// Throws ValidationError when `a` is not square or deviates from symmetry by
// more than 1e-6 relative to its largest entry.
SymEig sym_eig(const Eigen::MatrixXd& a);
SymEig sym_eig(const Tensor& a);

// One-sided Jacobi SVD. Throws NumericError if the sweeps do not converge.
Svd svd(const Eigen::MatrixXd& a);
Svd svd(const Tensor& a);

// Number of leading values kept by a relative cut: value > 0 and
// value / values[0] >= epsilon, with values[0] kept whenever it is positive.
// `values` must be sorted descending.
std::size_t relative_cut_rank(std::span<const double> values, double epsilon);
std::size_t relative_cut_rank(const Eigen::VectorXd& values, double epsilon);

// Flips columns so the first component with magnitude above 1e-12 is
// nonnegative. Returns the per-column sign that was applied.
Eigen::VectorXd canonicalize_column_signs(Eigen::MatrixXd& vectors);

}  // namespace nnspec

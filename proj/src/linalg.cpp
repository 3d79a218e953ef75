#include "nnspec/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "nnspec/error.hpp"

namespace nnspec {

namespace {

constexpr int kMaxJacobiSweeps = 80;

struct TallSvd {
  Eigen::MatrixXd u;  // m x n
  Eigen::VectorXd s;  // n
  Eigen::MatrixXd v;  // n x n
};

// Completes the columns of `u` flagged in `missing` to an orthonormal set by
// Gram-Schmidt over the canonical basis, in index order.
void complete_orthonormal(Eigen::MatrixXd& u, const std::vector<bool>& missing) {
  const Eigen::Index m = u.rows();
  Eigen::Index next_basis = 0;
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    if (!missing[static_cast<std::size_t>(j)]) continue;
    while (next_basis < m) {
      Eigen::VectorXd candidate = Eigen::VectorXd::Unit(m, next_basis++);
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index k = 0; k < u.cols(); ++k) {
          if (k == j || (missing[static_cast<std::size_t>(k)] && k > j)) continue;
          candidate -= u.col(k).dot(candidate) * u.col(k);
        }
      }
      const double norm = candidate.norm();
      if (norm > 0.5) {
        u.col(j) = candidate / norm;
        break;
      }
    }
  }
}

// Hestenes one-sided Jacobi on a matrix with rows >= cols.
TallSvd jacobi_svd_tall(Eigen::MatrixXd b) {
  const Eigen::Index m = b.rows();
  const Eigen::Index n = b.cols();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double tol = std::numeric_limits<double>::epsilon() *
                     std::max<double>(1.0, static_cast<double>(m));
  // Columns at roundoff level relative to the whole matrix count as zero;
  // otherwise their noise never orthogonalizes in rank-deficient input.
  const double floor = tol * b.norm();
  const double floor2 = floor * floor;

  int sweep = 0;
  for (; sweep < kMaxJacobiSweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = b.col(p).squaredNorm();
        const double beta = b.col(q).squaredNorm();
        const double gamma = b.col(p).dot(b.col(q));
        if (alpha <= floor2 || beta <= floor2) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const double bp = b(i, p), bq = b(i, q);
          b(i, p) = c * bp - s * bq;
          b(i, q) = s * bp + c * bq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  if (sweep == kMaxJacobiSweeps) {
    throw NumericError("svd: one-sided Jacobi did not converge after " +
                       std::to_string(kMaxJacobiSweeps) + " sweeps");
  }

  Eigen::VectorXd norms(n);
  for (Eigen::Index j = 0; j < n; ++j) norms(j) = b.col(j).norm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index c) { return norms(a) > norms(c); });

  TallSvd out{Eigen::MatrixXd::Zero(m, n), Eigen::VectorXd(n), Eigen::MatrixXd(n, n)};
  const double s_max = n > 0 ? norms(order[0]) : 0.0;
  const double negligible = s_max * tol;
  std::vector<bool> missing(static_cast<std::size_t>(n), false);
  bool any_missing = false;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index j = order[static_cast<std::size_t>(k)];
    out.s(k) = norms(j);
    out.v.col(k) = v.col(j);
    if (norms(j) > negligible && norms(j) > 0.0) {
      out.u.col(k) = b.col(j) / norms(j);
    } else {
      missing[static_cast<std::size_t>(k)] = true;
      any_missing = true;
    }
  }
  if (any_missing) complete_orthonormal(out.u, missing);
  return out;
}

}  // namespace

SymEig sym_eig(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) {
    throw ValidationError("sym_eig: matrix is " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + ", expected square");
  }
  if (!a.allFinite()) throw ValidationError("sym_eig: matrix has non-finite entries");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-6 * scale) {
    throw ValidationError("sym_eig: matrix is not symmetric (max deviation " +
                          std::to_string(asym) + ")");
  }
  const Eigen::Index n = a.rows();
  if (n == 0) return {Eigen::VectorXd(0), Eigen::MatrixXd(0, 0)};

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      0.5 * (a + a.transpose()), Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw NumericError("sym_eig: tridiagonal QR did not converge within " +
                       std::to_string(30 * n) + " iterations");
  }
  SymEig out{solver.eigenvalues().reverse(), solver.eigenvectors().rowwise().reverse()};
  canonicalize_column_signs(out.vectors);
  return out;
}

SymEig sym_eig(const Tensor& a) { return sym_eig(to_matrix(a)); }

Svd svd(const Eigen::MatrixXd& a) {
  if (!a.allFinite()) throw ValidationError("svd: matrix has non-finite entries");
  Svd out;
  if (a.rows() >= a.cols()) {
    TallSvd t = jacobi_svd_tall(a);
    out.u = std::move(t.u);
    out.s = std::move(t.s);
    out.vt = t.v.transpose();
  } else {
    TallSvd t = jacobi_svd_tall(a.transpose());
    out.u = std::move(t.v);
    out.s = std::move(t.s);
    out.vt = t.u.transpose();
  }
  // Sign convention on the right singular vectors; U follows.
  Eigen::MatrixXd v = out.vt.transpose();
  const Eigen::VectorXd signs = canonicalize_column_signs(v);
  out.vt = v.transpose();
  for (Eigen::Index k = 0; k < signs.size(); ++k) out.u.col(k) *= signs(k);
  return out;
}

Svd svd(const Tensor& a) { return svd(to_matrix(a)); }

std::size_t relative_cut_rank(std::span<const double> values, double epsilon) {
  if (values.empty() || !(values[0] > 0.0)) return 0;
  // The leading value is always kept.
  std::size_t kept = 1;
  for (; kept < values.size(); ++kept) {
    const double v = values[kept];
    if (!(v > 0.0) || v / values[0] < epsilon) break;
  }
  return kept;
}

std::size_t relative_cut_rank(const Eigen::VectorXd& values, double epsilon) {
  return relative_cut_rank(
      std::span<const double>(values.data(), static_cast<std::size_t>(values.size())),
      epsilon);
}

Eigen::VectorXd canonicalize_column_signs(Eigen::MatrixXd& vectors) {
  Eigen::VectorXd signs = Eigen::VectorXd::Ones(vectors.cols());
  for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
    for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
      const double x = vectors(i, j);
      if (std::abs(x) > 1e-12) {
        if (x < 0.0) {
          vectors.col(j) *= -1.0;
          signs(j) = -1.0;
        }
        break;
      }
    }
  }
  return signs;
}

}  // namespace nnspec

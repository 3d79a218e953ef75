#include <doctest.h>

#include <cmath>

#include "../support/oracles.hpp"
#include "nnspec/error.hpp"
#include "nnspec/linalg.hpp"
#include "nnspec/random.hpp"
#include "nnspec/tensor.hpp"

using namespace nnspec;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("tensor construction validates extents") {
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(Tensor().empty());
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(t.reshaped({3, 2}).dims() == Tensor::Dims{3, 2});
}

TEST_CASE("matmul identity and annihilator") {
  const Tensor b = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  CHECK(matmul(Tensor::identity(3), b) == b);
  const Tensor z = matmul(b, Tensor({2, 4}));
  for (float v : z.data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(matmul(b, Tensor({3, 2})), ShapeError);
}

TEST_CASE("matmul matches triple loop") {
  Rng rng(11);
  const Tensor a = oracle::random_tensor(rng, {5, 4});
  const Tensor b = oracle::random_tensor(rng, {4, 3});
  const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(c(i, j) - ref[i][j]) <= 1e-6);
}

TEST_CASE("sym_eig diagonal and identity") {
  Eigen::MatrixXd d = Eigen::Vector3d(3, 1, 2).asDiagonal();
  const SymEig e = sym_eig(d);
  CHECK(e.values(0) == doctest::Approx(3));
  CHECK(e.values(1) == doctest::Approx(2));
  CHECK(e.values(2) == doctest::Approx(1));
  CHECK(std::abs(e.vectors(0, 0)) == doctest::Approx(1));
  CHECK(std::abs(e.vectors(2, 1)) == doctest::Approx(1));
  CHECK(std::abs(e.vectors(1, 2)) == doctest::Approx(1));
  const SymEig id = sym_eig(Eigen::MatrixXd::Identity(5, 5));
  for (Eigen::Index k = 0; k < 5; ++k) CHECK(id.values(k) == doctest::Approx(1));
}

TEST_CASE("sym_eig residuals and invariants") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd x = random_matrix(rng, 6, 6);
    const Eigen::MatrixXd a = 0.5 * (x + x.transpose());
    const SymEig e = sym_eig(a);
    for (Eigen::Index k = 0; k < 6; ++k) {
      CHECK((a * e.vectors.col(k) - e.values(k) * e.vectors.col(k)).norm() <= 1e-5);
      if (k) CHECK(e.values(k - 1) >= e.values(k));
    }
    const Eigen::MatrixXd vtv = e.vectors.transpose() * e.vectors;
    CHECK((vtv - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() <= 1e-5);
    const Eigen::MatrixXd rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    CHECK((rec - a).norm() / a.norm() <= 1e-5);
  }
}

TEST_CASE("sym_eig rejects asymmetric input") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(3, 3);
  a(0, 2) = 0.5;
  CHECK_THROWS_AS(sym_eig(a), ValidationError);
  CHECK_THROWS_AS(sym_eig(Eigen::MatrixXd::Zero(2, 3)), ValidationError);
  a = Eigen::MatrixXd::Identity(3, 3);
  a(1, 1) = std::nan("");
  CHECK_THROWS_AS(sym_eig(a), ValidationError);
}

TEST_CASE("svd small cases") {
  Eigen::MatrixXd d = Eigen::Vector2d(2, 1).asDiagonal();
  const Svd s = svd(d);
  CHECK(s.s(0) == doctest::Approx(2));
  CHECK(s.s(1) == doctest::Approx(1));

  Eigen::VectorXd u(4), v(3);
  u << 1, 2, 0, -1;
  v << 3, 0, 4;
  const Svd r1 = svd(Eigen::MatrixXd(u * v.transpose()));
  CHECK(r1.s.size() == 3);
  CHECK(r1.s(0) == doctest::Approx(u.norm() * v.norm()));
  CHECK(std::abs(r1.s(1)) <= 1e-12);
  CHECK(std::abs(r1.s(2)) <= 1e-12);
}

TEST_CASE("svd singular values match eigenvalues of the Gram matrix") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd a = random_matrix(rng, 8, 5);
    const Svd s = svd(a);
    const SymEig e = sym_eig(Eigen::MatrixXd(a.transpose() * a));
    for (Eigen::Index k = 0; k < 5; ++k)
      CHECK(std::abs(s.s(k) - std::sqrt(std::max(0.0, e.values(k)))) <= 1e-4 * s.s(0));
    const Eigen::MatrixXd rec = s.u * s.s.asDiagonal() * s.vt;
    CHECK((rec - a).norm() / std::max(1.0, a.norm()) <= 1e-5);
  }
}

TEST_CASE("svd of wide and degenerate matrices") {
  Rng rng(9);
  const Eigen::MatrixXd wide = random_matrix(rng, 3, 7);
  const Svd s = svd(wide);
  CHECK(s.u.rows() == 3);
  CHECK(s.vt.rows() == 3);
  CHECK(s.vt.cols() == 7);
  CHECK((s.u * s.s.asDiagonal() * s.vt - wide).norm() <= 1e-10);
  const Svd z = svd(Eigen::MatrixXd::Zero(4, 3));
  CHECK(z.s.isZero());
  CHECK((z.vt * z.vt.transpose() - Eigen::MatrixXd::Identity(3, 3)).norm() <= 1e-12);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(2, 2);
  bad(0, 0) = INFINITY;
  CHECK_THROWS(svd(bad));
}

TEST_CASE("spectral norm agrees with power iteration") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const oracle::Mat m = oracle::random_mat(rng, 10, 10);
    Eigen::MatrixXd a(10, 10);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j) a(i, j) = m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    CHECK(std::abs(svd(a).s(0) - oracle::spectral_norm(m)) <= 1e-4 * svd(a).s(0));
  }
}

TEST_CASE("svd and sym_eig agree on PSD input") {
  Rng rng(12);
  const Eigen::MatrixXd x = random_matrix(rng, 6, 6);
  const Eigen::MatrixXd a = x * x.transpose();
  const Svd s = svd(a);
  const SymEig e = sym_eig(a);
  for (Eigen::Index k = 0; k < 6; ++k) CHECK(std::abs(s.s(k) - e.values(k)) <= 1e-5 * e.values(k));
}

TEST_CASE("sign convention makes the first nonzero component nonnegative") {
  Rng rng(13);
  const Eigen::MatrixXd a = random_matrix(rng, 6, 4);
  const Svd s1 = svd(a);
  const Svd s2 = svd(Eigen::MatrixXd(-a));
  for (Eigen::Index k = 0; k < 4; ++k) {
    for (Eigen::Index j = 0; j < 4; ++j) {
      if (std::abs(s1.vt(k, j)) > 1e-12) {
        CHECK(s1.vt(k, j) > 0);
        break;
      }
    }
  }
  // Negating A keeps V and flips U.
  CHECK((s1.vt - s2.vt).norm() <= 1e-10);
  CHECK((s1.u + s2.u).norm() <= 1e-10);
  const Eigen::MatrixXd sym = a.transpose() * a;
  const SymEig e1 = sym_eig(sym), e2 = sym_eig(sym);
  CHECK(e1.vectors == e2.vectors);
}

TEST_CASE("relative_cut_rank") {
  const std::vector<double> v{4.0, 2.0, 0.04, 0.0};
  CHECK(relative_cut_rank(v, 0.0) == 3);
  CHECK(relative_cut_rank(v, 0.01) == 3);
  CHECK(relative_cut_rank(v, 0.011) == 2);
  CHECK(relative_cut_rank(v, 0.5) == 2);
  CHECK(relative_cut_rank(v, 2.0) == 1);
  const std::vector<double> zero{0.0, 0.0};
  CHECK(relative_cut_rank(zero, 0.0) == 0);
}

TEST_CASE("svd converges on exactly rank-deficient input") {
  const Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(10, 1, 10);
  const Svd r1 = svd(Eigen::MatrixXd(u * Eigen::VectorXd::Ones(10).transpose()));
  CHECK(r1.s(0) == doctest::Approx(u.norm() * std::sqrt(10.0)));
  CHECK(r1.s(1) <= 1e-12 * r1.s(0));
  Rng rng(14);
  const Eigen::MatrixXd a = random_matrix(rng, 12, 2), b = random_matrix(rng, 2, 9);
  const Svd r2 = svd(Eigen::MatrixXd(a * b));
  CHECK(r2.s(1) > 1e-3);
  CHECK(r2.s(2) <= 1e-12 * r2.s(0));
  CHECK((r2.u * r2.s.asDiagonal() * r2.vt - a * b).norm() <= 1e-10 * (a * b).norm());
}

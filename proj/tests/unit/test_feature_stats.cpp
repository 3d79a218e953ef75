#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../support/models.hpp"
#include "../support/oracles.hpp"
#include "nnspec/error.hpp"
#include "nnspec/feature_stats.hpp"

using namespace nnspec;

namespace {

Eigen::MatrixXd gaussian_rows(Rng& rng, Eigen::Index n, Eigen::Index d, double scale = 1.0) {
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = scale * rng.normal();
  return m;
}

std::vector<int> round_robin(std::size_t n, int k) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % static_cast<std::size_t>(k));
  return y;
}

}  // namespace

TEST_CASE("duplicated points give a zero, degenerate covariance") {
  Eigen::MatrixXd x(4, 2);
  x << 1, 2, 1, 2, 3, 4, 3, 4;
  const std::vector<int> y{0, 0, 1, 1};
  const CovarianceBundle b = fit_covariance(x, y, 2);
  CHECK(b.tied_cov.isZero());
  CHECK(b.degenerate());
  CHECK(b.class_means(1, 0) == doctest::Approx(3.0));
  CHECK_THROWS_AS(mahalanobis(b, x), NumericError);
}

TEST_CASE("one-dimensional tied variance is the mean of class variances") {
  Eigen::MatrixXd x(5, 1);
  x << 0, 2, 10, 11, 12;  // class 0 variance 1, class 1 variance 2/3
  const std::vector<int> y{0, 0, 1, 1, 1};
  const CovarianceBundle b = fit_covariance(x, y, 2);
  CHECK(b.tied_cov(0, 0) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  CHECK(b.kept_dims == 1);
}

TEST_CASE("covariance matches a two-pass oracle") {
  Rng rng(50);
  const Eigen::MatrixXd x = gaussian_rows(rng, 60, 4);
  std::vector<int> y = round_robin(60, 3);
  y[0] = 2;  // uneven class sizes
  const CovarianceBundle b = fit_covariance(x, y, 3);
  std::vector<std::vector<double>> mu(3, std::vector<double>(4, 0.0));
  std::vector<double> cnt(3, 0.0);
  for (int i = 0; i < 60; ++i) {
    cnt[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] += 1;
    for (int j = 0; j < 4; ++j) mu[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])][static_cast<std::size_t>(j)] += x(i, j);
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (auto& v : mu[c]) v /= cnt[c];
  oracle::Mat sigma = oracle::zeros(4, 4);
  for (int i = 0; i < 60; ++i) {
    const auto c = static_cast<std::size_t>(y[static_cast<std::size_t>(i)]);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t bb = 0; bb < 4; ++bb)
        sigma[a][bb] += (x(i, static_cast<Eigen::Index>(a)) - mu[c][a]) *
                        (x(i, static_cast<Eigen::Index>(bb)) - mu[c][bb]) / (3.0 * cnt[c]);
  }
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t bb = 0; bb < 4; ++bb)
      CHECK(std::abs(b.tied_cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(bb)) - sigma[a][bb]) <= 1e-12);
}

TEST_CASE("identity covariance gives euclidean distance to the nearest mean") {
  // Four points per class at mean +- e_1, +- e_2 give Sigma = I / 2 per class.
  Eigen::MatrixXd x(8, 2);
  x << 1, 0, -1, 0, 0, 1, 0, -1, 11, 0, 9, 0, 10, 1, 10, -1;
  const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
  const CovarianceBundle b = fit_covariance(x, y, 2);
  CHECK((b.tied_cov - 0.5 * Eigen::MatrixXd::Identity(2, 2)).norm() <= 1e-12);
  Eigen::MatrixXd q(3, 2);
  q << 0, 0, 3, 4, 6, 0;
  const ScoreSet s = mahalanobis(b, q);
  CHECK(s.scores[0] == doctest::Approx(0.0));
  CHECK(s.scores[1] == doctest::Approx(5.0 * std::sqrt(2.0)));
  CHECK(s.scores[2] == doctest::Approx(4.0 * std::sqrt(2.0)));
  CHECK(s.orientation == Orientation::higher_is_ood);
}

TEST_CASE("mahalanobis matches a dense solve") {
  Rng rng(51);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd x = gaussian_rows(rng, 80, 5);
    const auto y = round_robin(80, 4);
    const CovarianceBundle b = fit_covariance(x, y, 4);
    REQUIRE(b.kept_dims == 5);
    oracle::Mat sigma = oracle::zeros(5, 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        sigma[i][j] = b.tied_cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    const Eigen::MatrixXd q = gaussian_rows(rng, 10, 5, 2.0);
    const ScoreSet s = mahalanobis(b, q);
    for (Eigen::Index n = 0; n < q.rows(); ++n) {
      double best = INFINITY;
      for (Eigen::Index c = 0; c < 4; ++c) {
        std::vector<double> d(5);
        for (Eigen::Index j = 0; j < 5; ++j) d[static_cast<std::size_t>(j)] = q(n, j) - b.class_means(c, j);
        const auto z = oracle::solve(sigma, d);
        double m2 = 0.0;
        for (std::size_t j = 0; j < 5; ++j) m2 += d[j] * z[j];
        best = std::min(best, m2);
      }
      CHECK(std::abs(s.scores[static_cast<std::size_t>(n)] - std::sqrt(best)) <= 1e-5 * std::sqrt(best));
    }
  }
}

TEST_CASE("mahalanobis is invariant to rotation and to sigma scaling of the data") {
  Rng rng(52);
  const Eigen::MatrixXd x = gaussian_rows(rng, 40, 3);
  const auto y = round_robin(40, 2);
  const Eigen::MatrixXd q = gaussian_rows(rng, 6, 3);
  const ScoreSet base = mahalanobis(fit_covariance(x, y, 2), q);

  const Eigen::MatrixXd rot = Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  const ScoreSet rotated = mahalanobis(fit_covariance(x * rot.transpose(), y, 2), q * rot.transpose());
  const ScoreSet scaled = mahalanobis(fit_covariance(3.0 * x, y, 2), 3.0 * q);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(rotated.scores[i] == doctest::Approx(base.scores[i]).epsilon(1e-9));
    CHECK(scaled.scores[i] == doctest::Approx(base.scores[i]).epsilon(1e-9));
  }
}

TEST_CASE("pseudoinverse ignores directions below the cut") {
  // Third coordinate is constant: rank-2 covariance.
  Rng rng(53);
  Eigen::MatrixXd x = gaussian_rows(rng, 30, 3);
  x.col(2).setConstant(1.0);
  const auto y = round_robin(30, 2);
  const CovarianceBundle b = fit_covariance(x, y, 2);
  CHECK(b.kept_dims == 2);
  Eigen::MatrixXd q = gaussian_rows(rng, 1, 3);
  const double s0 = mahalanobis(b, q).scores[0];
  q(0, 2) += 100.0;
  CHECK(mahalanobis(b, q).scores[0] == doctest::Approx(s0).epsilon(1e-9));
}

TEST_CASE("fit validation") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(3, 2);
  CHECK_THROWS_AS(fit_covariance(x, std::vector<int>{0, 1}, 2), ValidationError);
  CHECK_THROWS_AS(fit_covariance(x, std::vector<int>{0, 0, 2}, 2), ValidationError);
  CHECK_THROWS_AS(fit_covariance(x, std::vector<int>{0, 0, 1}, 2), ValidationError);
  const CovarianceBundle b = fit_covariance(Eigen::MatrixXd::Random(4, 2), std::vector<int>{0, 0, 1, 1}, 2);
  CHECK_THROWS_AS(mahalanobis(b, Eigen::MatrixXd::Ones(1, 3)), ShapeError);
}

TEST_CASE("fixture: in-distribution scores below noise") {
  const ModelGraph m = load_model(testmodels::fixture_manifest());
  const auto train = load_dataset(testmodels::fixture_data("train"));
  const TapPoint tap{"relu3"};
  const CovarianceBundle b = fit_covariance(m, train, tap);
  CHECK(b.class_counts.size() == 10);
  CHECK_FALSE(b.degenerate());
  const std::vector<TapPoint> taps{tap};
  std::vector<std::size_t> idx(100);
  for (std::size_t i = 0; i < 100; ++i) idx[i] = i;
  ForwardOptions o;
  o.indices = idx;
  const auto id = forward(m, load_dataset(testmodels::fixture_data("id_test")), taps, o);
  const auto far = forward(m, load_dataset(testmodels::fixture_data("far_ood")), taps, o);
  const ScoreSet sid = mahalanobis(b, id.features[0]);
  const ScoreSet sfar = mahalanobis(b, far.features[0]);
  CHECK(auroc(sid, sfar) > 0.95);
}

TEST_CASE("covariance bundle round trip") {
  Rng rng(54);
  const Eigen::MatrixXd x = gaussian_rows(rng, 40, 3);
  const auto y = round_robin(40, 2);
  const CovarianceBundle b = fit_covariance(x, y, 2, {"relu9"});
  const auto dir = std::filesystem::temp_directory_path() / "nnspec_test_bundle";
  std::filesystem::remove_all(dir);
  save_covariance(b, dir);
  const CovarianceBundle back = load_covariance(dir);
  CHECK(back.tap.layer_id == "relu9");
  CHECK(back.kept_dims == b.kept_dims);
  CHECK(back.class_counts == b.class_counts);
  const Eigen::MatrixXd q = gaussian_rows(rng, 5, 3);
  const ScoreSet s1 = mahalanobis(b, q), s2 = mahalanobis(back, q);
  for (std::size_t i = 0; i < 5; ++i) CHECK(s2.scores[i] == doctest::Approx(s1.scores[i]).epsilon(1e-5));
  CHECK_THROWS_AS(load_covariance(dir / "missing"), IoError);
}

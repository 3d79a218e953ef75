#include <doctest.h>

#include <cmath>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "../support/oracles.hpp"
#include "nnspec/error.hpp"
#include "nnspec/metrics.hpp"

using namespace nnspec;

TEST_CASE("auroc examples") {
  const std::vector<double> id{1, 2, 3}, ood{4, 5};
  CHECK(auroc(id, ood, Orientation::higher_is_ood) == 1.0);
  CHECK(auroc(id, ood, Orientation::higher_is_id) == 0.0);
  CHECK(auroc(std::vector<double>{1, 1}, std::vector<double>{1, 1, 1}, Orientation::higher_is_ood) == 0.5);
  CHECK(auroc(std::vector<double>{0, 2}, std::vector<double>{1}, Orientation::higher_is_ood) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, ood, Orientation::higher_is_ood), ValidationError);

  ScoreSet a{"x", Orientation::higher_is_ood, {1, 2}, 0}, b{"y", Orientation::higher_is_id, {3}, 0};
  CHECK_THROWS_AS(auroc(a, b), ValidationError);
}

TEST_CASE("auroc equals the pairwise count") {
  Rng rng(80);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40), m = 1 + rng.below(40);
    std::vector<double> id(n), ood(m);
    // Coarse values force ties.
    for (auto& v : id) v = static_cast<double>(rng.below(12));
    for (auto& v : ood) v = static_cast<double>(rng.below(12)) + 1.0;
    const bool hi = trial % 2 == 0;
    const Orientation o = hi ? Orientation::higher_is_ood : Orientation::higher_is_id;
    const double got = auroc(id, ood, o);
    CHECK(got == oracle::auroc_pairs(id, ood, hi));
    // Swapping roles gives the complement.
    CHECK(auroc(ood, id, o) == doctest::Approx(1.0 - got).epsilon(1e-15));
  }
}

TEST_CASE("auroc is invariant to strictly increasing transforms") {
  Rng rng(81);
  std::vector<double> id(50), ood(60);
  for (auto& v : id) v = rng.normal();
  for (auto& v : ood) v = rng.normal() + 0.5;
  std::vector<double> id2 = id, ood2 = ood;
  for (auto& v : id2) v = std::exp(3.0 * v) + 1.0;
  for (auto& v : ood2) v = std::exp(3.0 * v) + 1.0;
  CHECK(auroc(id, ood, Orientation::higher_is_ood) == auroc(id2, ood2, Orientation::higher_is_ood));
}

TEST_CASE("score sets count non-finite values as excluded") {
  ScoreSet s;
  s.push(1.0);
  s.push(std::nan(""));
  s.push(INFINITY);
  CHECK(s.scores.size() == 1);
  CHECK(s.excluded_count == 2);
}

TEST_CASE("max softmax") {
  const ScoreSet z = max_softmax(Tensor({2, 10}));
  for (double v : z.scores) CHECK(v == doctest::Approx(0.1));
  CHECK(z.orientation == Orientation::higher_is_id);
  const ScoreSet big = max_softmax(Tensor::matrix(1, 3, {1000, 0, -1000}));
  CHECK(big.scores[0] == doctest::Approx(1.0));
  CHECK(big.excluded_count == 0);
  CHECK_THROWS_AS(max_softmax(Tensor({3, 1})), ValidationError);
}

TEST_CASE("max softmax matches a 50-digit oracle") {
  using big = boost::multiprecision::cpp_bin_float_50;
  Rng rng(82);
  const Tensor logits = oracle::random_tensor(rng, {40, 7}, 8.0);
  const ScoreSet s = max_softmax(logits);
  for (std::size_t r = 0; r < 40; ++r) {
    big denom = 0, top = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      const big e = boost::multiprecision::exp(big(logits(r, c)));
      denom += e;
      if (e > top) top = e;
    }
    CHECK(std::abs(s.scores[r] - static_cast<double>(top / denom)) <= 1e-7);
  }
}

TEST_CASE("prediction rates and coefficient of variation") {
  const Tensor l = Tensor::matrix(4, 3, {0, 1, 0, 5, 1, 1, 2, 2, 0, 0, 0, 9});
  CHECK(predictions(l) == std::vector<std::size_t>{1, 0, 0, 2});
  const auto rates = prediction_rates(l);
  CHECK(rates == std::vector<double>{0.5, 0.25, 0.25});
  Tensor shifted = l;
  for (auto& v : shifted.data()) v += 100.0f;
  CHECK(prediction_rates(shifted) == rates);

  std::vector<double> one_hot(10, 0.0);
  one_hot[3] = 1.0;
  CHECK(coefficient_of_variation(one_hot) == doctest::Approx(3.0));
  CHECK(coefficient_of_variation(std::vector<double>(10, 0.1)) == doctest::Approx(0.0));
  CHECK_THROWS_AS(coefficient_of_variation(std::vector<double>{0.0, 0.0}), DomainError);
}

TEST_CASE("quantile summary") {
  const std::vector<double> three{3, 1, 2};
  const QuantileSummary q = quantile_summary(three);
  CHECK(q.median == 2.0);
  CHECK(q.q25 == 1.5);
  CHECK(q.q75 == 2.5);
  CHECK(q.error_bar() == 0.5);
  std::vector<double> hundred(101);
  for (std::size_t i = 0; i <= 100; ++i) hundred[i] = static_cast<double>(100 - i);
  const QuantileSummary h = quantile_summary(hundred);
  CHECK(h.median == 50.0);
  CHECK(h.q25 == 25.0);
  CHECK(h.q75 == 75.0);
  CHECK(quantile(std::vector<double>{4.0}, 0.3) == 4.0);
  const std::vector<double> skew{0, 0, 0, 10};
  CHECK(quantile_summary(skew).error_bar() == doctest::Approx((0.0 + 2.5) / 2.0));
}

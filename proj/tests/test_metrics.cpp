#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "segqa/core.hpp"
#include "segqa/metrics.hpp"

using namespace segqa;
using namespace segqa::metrics;

namespace {

std::vector<double> random_vec(Rng& rng, size_t n, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("plcc on affine relations") {
  std::vector<double> x{1, 2, 3};
  std::vector<double> y{3, 5, 7};  // 2x+1
  CHECK(plcc(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> neg{-1, -2, -3};
  CHECK(plcc(x, neg) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("plcc matches the naive oracle") {
  std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y{1, 3, 2, 4};
  CHECK(std::abs(plcc(x, y) - oracles::pearson(x, y)) < 1e-12);
}

TEST_CASE("plcc rejects constant input") {
  std::vector<double> x{1, 1, 1};
  std::vector<double> y{1, 2, 3};
  CHECK_THROWS_WITH_AS(plcc(x, y), doctest::Contains("zero variance"), Error);
}

TEST_CASE("srocc on monotone data") {
  std::vector<double> x{0.1, 0.4, 0.5, 0.9};
  std::vector<double> y{10, 20, 21, 40};
  CHECK(srocc(x, y) == doctest::Approx(1.0));
  std::vector<double> rev{40, 21, 20, 10};
  CHECK(srocc(x, rev) == doctest::Approx(-1.0));
}

TEST_CASE("srocc with ties equals rank-then-pearson oracle") {
  std::vector<double> x{1, 2, 2, 3, 5, 5, 5, 8};
  std::vector<double> y{2, 1, 4, 4, 6, 7, 7, 9};
  CHECK(std::abs(srocc(x, y) - oracles::spearman(x, y)) < 1e-12);
}

TEST_CASE("srocc equals the closed form on tie-free data") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    auto x = random_vec(rng, 30);
    auto y = random_vec(rng, 30);
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    double d2 = 0;
    for (size_t i = 0; i < rx.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    const double n = 30;
    const double closed = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    CHECK(srocc(x, y) == doctest::Approx(closed).epsilon(1e-12));
  }
}

TEST_CASE("krocc hand example and extremes") {
  std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y{1, 3, 2, 4};
  // 5 concordant, 1 discordant over C(4,2)=6 pairs
  CHECK(krocc(x, y) == doctest::Approx(2.0 * (5 - 1) / (4.0 * 3.0)));
  CHECK(krocc(x, x) == doctest::Approx(1.0));
  std::vector<double> rev{4, 3, 2, 1};
  CHECK(krocc(x, rev) == doctest::Approx(-1.0));
}

TEST_CASE("krocc matches exhaustive pair oracle under ties") {
  std::vector<double> x{1, 2, 2, 3, 4, 4};
  std::vector<double> y{1, 1, 2, 3, 5, 4};
  CHECK(std::abs(krocc(x, y) - oracles::kendall(x, y)) < 1e-15);
}

TEST_CASE("rmse basics") {
  std::vector<double> x{0, 0};
  std::vector<double> y{3, 4};
  CHECK(rmse(x, y) == doctest::Approx(std::sqrt(12.5)));
  CHECK(rmse(y, y) == 0.0);
  CHECK(rmse(x, y) == rmse(y, x));
  // translation invariance
  std::vector<double> xs{5, 5}, ys{8, 9};
  CHECK(rmse(xs, ys) == doctest::Approx(rmse(x, y)));
}

TEST_CASE("rank correlations are invariant under strictly increasing transforms") {
  Rng rng(21);
  auto x = random_vec(rng, 40);
  auto y = random_vec(rng, 40);
  auto fx = x;
  for (auto& v : fx) v = std::exp(3.0 * v) + 1.0;
  CHECK(srocc(fx, y) == doctest::Approx(srocc(x, y)).epsilon(1e-12));
  CHECK(krocc(fx, y) == doctest::Approx(krocc(x, y)).epsilon(1e-12));
}

TEST_CASE("plcc affine invariance and sign flip") {
  Rng rng(22);
  auto x = random_vec(rng, 40);
  auto y = random_vec(rng, 40);
  auto ax = x;
  for (auto& v : ax) v = 2.5 * v + 3.0;
  CHECK(plcc(ax, y) == doctest::Approx(plcc(x, y)).epsilon(1e-12));
  for (auto& v : ax) v = -v;
  CHECK(plcc(ax, y) == doctest::Approx(-plcc(x, y)).epsilon(1e-12));
}

TEST_CASE("4pl recovers exactly generated data") {
  FourPLParams truth;
  truth.beta1 = 0.9;
  truth.beta2 = 0.1;
  truth.beta3 = 0.5;
  truth.beta4 = 0.12;
  Rng rng(31);
  std::vector<double> pred = random_vec(rng, 50);
  std::vector<double> label = apply_4pl(truth, pred);
  auto fit = fit_4pl(pred, label);
  CHECK(fit.sse < 1e-8);
  const auto mapped = apply_4pl(fit, pred);
  CHECK(rmse(mapped, label) < 1e-4);
}

TEST_CASE("4pl on perfectly linear data preserves plcc") {
  Rng rng(32);
  std::vector<double> pred = random_vec(rng, 60);
  std::vector<double> label = pred;
  for (auto& v : label) v = 0.7 * v + 0.1;
  auto fit = fit_4pl(pred, label);
  const auto mapped = apply_4pl(fit, pred);
  CHECK(plcc(mapped, label) == doctest::Approx(plcc(pred, label)).epsilon(1e-9));
}

TEST_CASE("4pl mapping lifts plcc under monotone cubic label distortion") {
  Rng rng(33);
  std::vector<double> pred = random_vec(rng, 100);
  std::vector<double> label(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    const double c = 2.0 * pred[i] - 1.0;
    label[i] = 0.5 + 0.5 * c * c * c;  // monotone, strongly nonlinear
  }
  const double raw = plcc(pred, label);
  auto fit = fit_4pl(pred, label);
  const double mapped = plcc(apply_4pl(fit, pred), label);
  CHECK(mapped >= raw);

  // a sigmoid-shaped distortion is expressible exactly, so the lift is large
  std::vector<double> slabel(pred.size());
  for (size_t i = 0; i < pred.size(); ++i)
    slabel[i] = 1.0 / (1.0 + std::exp(-8.0 * (pred[i] - 0.5)));
  const double raw_s = plcc(pred, slabel);
  const double mapped_s = plcc(apply_4pl(fit_4pl(pred, slabel), pred), slabel);
  CHECK(mapped_s >= raw_s);
  CHECK(mapped_s > 0.9999);
}

TEST_CASE("metric bundle on identical inputs") {
  Rng rng(34);
  auto label = random_vec(rng, 50);
  auto b = metric_bundle(label, label);
  CHECK(b.srocc == doctest::Approx(1.0));
  CHECK(b.krocc == doctest::Approx(1.0));
  CHECK(b.plcc == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(b.rmse < 1e-3);
}

TEST_CASE("metric bundle absorbs a reversed predictor") {
  Rng rng(35);
  auto label = random_vec(rng, 80);
  std::vector<double> pred(label.size());
  for (size_t i = 0; i < label.size(); ++i) pred[i] = 1.0 - label[i];
  auto b = metric_bundle(pred, label);
  CHECK(b.srocc == doctest::Approx(-1.0));
  CHECK(b.krocc == doctest::Approx(-1.0));
  CHECK(std::abs(b.plcc) >= 0.999);  // logistic flips via beta1 < beta2
}

TEST_CASE("metric bundle near-null correlation on independent data") {
  Rng rng(36);
  auto pred = random_vec(rng, 1000);
  auto label = random_vec(rng, 1000);
  CHECK(std::abs(srocc(pred, label)) < 0.1);
}

TEST_CASE("metric bundle matches independent naive oracles on random data") {
  Rng rng(37);
  for (int rep = 0; rep < 100; ++rep) {
    auto x = random_vec(rng, 50);
    auto y = random_vec(rng, 50);
    CHECK(std::abs(plcc(x, y) - oracles::pearson(x, y)) < 1e-10);
    CHECK(std::abs(srocc(x, y) - oracles::spearman(x, y)) < 1e-10);
    CHECK(std::abs(krocc(x, y) - oracles::kendall(x, y)) < 1e-10);
    CHECK(std::abs(rmse(x, y) - oracles::rmse(x, y)) < 1e-10);
  }
  // the bundle's raw-rank metrics go through the same contract
  auto x = random_vec(rng, 50);
  auto y = random_vec(rng, 50);
  auto b = metric_bundle(x, y);
  CHECK(std::abs(b.srocc - oracles::spearman(x, y)) < 1e-10);
  CHECK(std::abs(b.krocc - oracles::kendall(x, y)) < 1e-10);
}

TEST_CASE("plcc and krocc are symmetric in their arguments") {
  Rng rng(38);
  for (int rep = 0; rep < 20; ++rep) {
    auto x = random_vec(rng, 30);
    auto y = random_vec(rng, 30);
    CHECK(plcc(x, y) == doctest::Approx(plcc(y, x)).epsilon(1e-14));
    CHECK(krocc(x, y) == doctest::Approx(krocc(y, x)).epsilon(1e-14));
  }
}

TEST_CASE("metric errors: length mismatch and tiny n") {
  std::vector<double> a{1, 2}, b{1};
  CHECK_THROWS_AS(rmse(a, b), Error);
  CHECK_THROWS_AS(srocc({1.0}, {2.0}), Error);
  CHECK_THROWS_AS(metric_bundle({1, 2, 3, 4}, {1, 2, 3, 4}), Error);  // n < 5
}

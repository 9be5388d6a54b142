#include <doctest.h>

#include <cmath>
#include <random>

#include "tseg/calibration.hpp"
#include "tseg/common.hpp"

using namespace tseg;

namespace {

// Independent long-double evaluation of the surrogate entropy.
long double oracle_entropy(long double s, int c) {
  long double h = 0.0L;
  if (s > 0.0L) h -= s * std::log2(s);
  const long double r = (1.0L - s) / (c - 1);
  if (r > 0.0L) h -= (c - 1) * r * std::log2(r);
  return h;
}

Prediction pred(double s, bool correct) { return Prediction{s, correct, 0.0}; }

}  // namespace

TEST_CASE("entropy examples") {
  CHECK(entropy_bits(std::vector<double>{0.5, 0.5}) == doctest::Approx(1.0));
  CHECK(entropy_bits(std::vector<double>{1.0, 0.0, 0.0}) == 0.0);
  CHECK(entropy_bits(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(2.0));
  CHECK(std::abs(surrogate_entropy(0.8, 2) - 0.7219280948873623) < 1e-12);
  CHECK(std::abs(surrogate_entropy(0.8, 2) - static_cast<double>(oracle_entropy(0.8L, 2))) <
        1e-12);
  CHECK(surrogate_entropy(0.25, 4) == doctest::Approx(2.0));
  CHECK(surrogate_entropy(1.0, 5) == 0.0);
  CHECK_THROWS_AS(surrogate_entropy(0.2, 4), DomainError);
  CHECK_THROWS_AS(surrogate_entropy(1.01, 2), DomainError);
}

TEST_CASE("surrogate entropy matches the oracle across C") {
  for (int c : {2, 3, 4, 7, 10}) {
    for (int k = 0; k <= 200; ++k) {
      const double s = 1.0 / c + (1.0 - 1.0 / c) * k / 200.0;
      CHECK(std::abs(surrogate_entropy(s, c) - static_cast<double>(oracle_entropy(s, c))) <
            1e-12);
    }
  }
}

TEST_CASE("expected IG examples") {
  // (2 * 1 * 0.8 - 1) * H(0.8) = 0.6 * 0.72193
  CHECK(expected_ig(0.8, 1.0, 2).bits == doctest::Approx(0.6 * 0.7219280948873623));
  CHECK(expected_ig(0.5, 1.0, 2).bits == doctest::Approx(0.0));
  CHECK(expected_ig(0.6, 0.8, 2).bits < 0.0);
  CHECK(expected_ig(1.0, 1.0, 2).bits == 0.0);
  CHECK(expected_ig(0.9, 1.2, 2).out_of_model);
  CHECK_FALSE(expected_ig(0.9, 1.0, 2).out_of_model);
  CHECK_THROWS_AS(expected_ig(0.8, 0.0, 2), DomainError);
}

TEST_CASE("zero crossings") {
  CHECK(ig_zero_crossing(1.0).s == 0.5);
  CHECK(ig_zero_crossing(0.8).s == doctest::Approx(0.625));
  const auto over = ig_zero_crossing(1.25);
  CHECK(over.s == doctest::Approx(0.4));
  CHECK_FALSE(over.in_range);
  CHECK(over.clamped == 0.5);
  const auto low = ig_zero_crossing(0.4);
  CHECK(low.s == doctest::Approx(1.25));
  CHECK_FALSE(low.in_range);
  CHECK(low.clamped == 1.0);
  CHECK(ig_zero_crossing(1.0, 4).clamped == 0.5);
}

TEST_CASE("IG sign around the crossing") {
  for (double delta : {0.6, 0.8, 1.0}) {
    const double z = ig_zero_crossing(delta).s;
    for (int k = 1; k < 50; ++k) {
      const double s = 0.5 + 0.5 * k / 50.0;
      const double ig = expected_ig(s, delta, 2).bits;
      if (s < z - 1e-12) CHECK(ig < 0.0);
      if (s > z + 1e-12) CHECK(ig > 0.0);
    }
  }
}

TEST_CASE("reliability examples") {
  SUBCASE("perfect calibration") {
    std::vector<Prediction> p;
    for (int k = 0; k < 10; ++k) p.push_back(pred(0.9, k < 9));
    const auto r = reliability(p, 10, 2);
    CHECK(r.ece == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.n_predictions == 10);
  }
  SUBCASE("all wrong at confidence 1") {
    std::vector<Prediction> p{pred(1.0, false), pred(1.0, false)};
    const auto r = reliability(p, 10, 2);
    CHECK(r.ece == doctest::Approx(1.0));
    CHECK(r.bins.back().count == 2);
  }
  SUBCASE("half the mass overconfident") {
    std::vector<Prediction> p{pred(1.0, false), pred(0.55, true), pred(0.55, false)};
    // Bin of 1.0: gap 1, weight 1/3. Bin of 0.55: accuracy 0.5, gap 0.05, weight 2/3.
    CHECK(reliability(p, 10, 2).ece == doctest::Approx(1.0 / 3 + 2.0 / 3 * 0.05));
  }
  SUBCASE("bin edges") {
    std::vector<Prediction> p{pred(0.5, true), pred(0.55, true), pred(1.0, true)};
    const auto r = reliability(p, 10, 2);
    REQUIRE(r.bins.size() == 10);
    CHECK(r.bins[0].confidence_lo == 0.5);
    CHECK(r.bins[0].count == 1);
    CHECK(r.bins[1].count == 1);
    CHECK(r.bins[9].count == 1);
    CHECK(r.bins[9].confidence_hi == 1.0);
  }
  SUBCASE("below 1/C goes to the first bin") {
    std::vector<Prediction> p{pred(0.2, false)};
    CHECK(reliability(p, 10, 4).bins[0].count == 1);
  }
  CHECK_THROWS_AS(reliability(std::vector<Prediction>{}, 10, 2), DomainError);
}

TEST_CASE("empirical delta") {
  std::vector<Prediction> p{pred(0.8, true), pred(0.8, true), pred(0.8, false), pred(0.8, false)};
  CHECK(empirical_delta(p) == doctest::Approx(0.625));
  std::vector<Prediction> q{pred(0.5, true), pred(0.5, true), pred(0.5, true), pred(0.5, false)};
  CHECK(empirical_delta(q) == doctest::Approx(1.5));
  std::vector<Prediction> r{pred(0.75, true), pred(0.75, true), pred(0.75, true),
                            pred(0.75, false)};
  CHECK(empirical_delta(r) == doctest::Approx(1.0));
}

TEST_CASE("a calibrated synthetic source has small ECE") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Prediction> p;
  for (int k = 0; k < 100000; ++k) {
    const double s = 0.5 + 0.5 * u(rng);
    p.push_back(pred(s, u(rng) < s));
  }
  const auto r = reliability(p, 10, 2);
  CHECK(r.ece < 0.01);
  CHECK(empirical_delta(p) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("IG curves") {
  const auto c = ig_curve(0.8, 2, 101);
  REQUIRE(c.points.size() == 101);
  CHECK(c.points.front().first == 0.5);
  CHECK(c.points.back().first == 1.0);
  CHECK(c.points.back().second == 0.0);
  CHECK(c.points.front().second == doctest::Approx(-0.2));
  CHECK_THROWS_AS(ig_curve(1.0, 2, 1), DomainError);
}

TEST_CASE("realized IG") {
  std::vector<Prediction> p{{0.9, true, 0.4}, {0.9, false, 0.2}};
  CHECK(realized_ig(p) == doctest::Approx(0.1));
}

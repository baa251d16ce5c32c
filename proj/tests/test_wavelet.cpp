#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/wavelet.hpp"

using namespace inkline;

namespace {

Mat random_mat(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat m(rows, cols);
  for (auto& v : m.v) v = rng.uniform(-2.0, 2.0);
  return m;
}

double energy(const Mat& m) {
  double e = 0.0;
  for (double v : m.v) e += v * v;
  return e;
}

}  // namespace

TEST_CASE("constant signal: low band c*sqrt(2), high band exactly zero") {
  Mat x(10, 3);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) x.at(r, c) = 0.7 * (c + 1);
  SubbandPair bands = dwt1(x);
  REQUIRE(bands.low.rows == 5);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(bands.high.at(r, c) == 0.0);
      CHECK(bands.low.at(r, c) == doctest::Approx(0.7 * (c + 1) * std::sqrt(2.0)));
    }
}

TEST_CASE("two-sample filter values") {
  Mat x(2, 1);
  x.at(0, 0) = 1.0;
  x.at(1, 0) = 3.0;
  SubbandPair bands = dwt1(x);
  CHECK(bands.low.at(0, 0) == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-14));
  CHECK(bands.high.at(0, 0) == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-14));
  Mat back = idwt1(bands);
  CHECK(back.at(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(back.at(1, 0) == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("perfect reconstruction and energy conservation on 1000 random signals") {
  Rng rng(404);
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t L = 2 * static_cast<std::size_t>(rng.uniform_int(1, 64));
    const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 6));
    Mat x = random_mat(L, d, rng);
    SubbandPair bands = dwt1(x);
    REQUIRE(bands.low.rows == L / 2);
    REQUIRE(bands.high.rows == L / 2);

    const double e_in = energy(x);
    const double e_bands = energy(bands.low) + energy(bands.high);
    CHECK(std::abs(e_in - e_bands) <= 1e-10 * std::max(1.0, e_in));

    Mat back = idwt1(bands);
    double max_err = 0.0;
    for (std::size_t i = 0; i < x.v.size(); ++i)
      max_err = std::max(max_err, std::abs(back.v[i] - x.v[i]));
    CHECK(max_err <= 1e-12);
  }
}

TEST_CASE("odd length drops the final sample; leading energy conserved") {
  Rng rng(11);
  Mat x = random_mat(9, 2, rng);
  SubbandPair bands = dwt1(x);
  CHECK(bands.low.rows == 4);
  double e_first8 = 0.0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 2; ++c) e_first8 += x.at(r, c) * x.at(r, c);
  CHECK(std::abs(e_first8 - (energy(bands.low) + energy(bands.high))) <= 1e-10);
}

TEST_CASE("linearity of both bands") {
  Rng rng(12);
  for (int iter = 0; iter < 50; ++iter) {
    Mat x = random_mat(16, 3, rng);
    Mat y = random_mat(16, 3, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Mat combo(16, 3);
    for (std::size_t i = 0; i < combo.v.size(); ++i) combo.v[i] = a * x.v[i] + b * y.v[i];
    SubbandPair bx = dwt1(x), by = dwt1(y), bc = dwt1(combo);
    for (std::size_t i = 0; i < bc.low.v.size(); ++i) {
      CHECK(std::abs(bc.low.v[i] - (a * bx.low.v[i] + b * by.low.v[i])) <= 1e-12);
      CHECK(std::abs(bc.high.v[i] - (a * bx.high.v[i] + b * by.high.v[i])) <= 1e-12);
    }
  }
}

TEST_CASE("zero bands reconstruct to zero; short input rejected") {
  SubbandPair zero{Mat(4, 2), Mat(4, 2)};
  Mat back = idwt1(zero);
  for (double v : back.v) CHECK(v == 0.0);
  Mat tiny(1, 1);
  CHECK_THROWS(dwt1(tiny));
}

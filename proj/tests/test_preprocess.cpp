#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/preprocess.hpp"
#include "inkline/synth.hpp"

using namespace inkline;

namespace {

InkSample one_stroke(const std::vector<std::array<double, 4>>& pts,
                     SourceTag tag = SourceTag::kSynth) {
  InkSample s;
  s.writer_id = "w";
  s.source = tag;
  for (const auto& p : pts) s.points.push_back({p[0], p[1], p[2], p[3]});
  s.stroke_bounds.push_back({0, s.points.size()});
  return s;
}

InkSample uniform_motion_sample(std::size_t n, double speed) {
  InkSample s;
  s.writer_id = "w";
  for (std::size_t i = 0; i < n; ++i)
    s.points.push_back({speed * static_cast<double>(i), 0.0, 0.5,
                        static_cast<double>(i) / 120.0});
  s.stroke_bounds.push_back({0, n});
  return s;
}

}  // namespace

TEST_CASE("center_normalize maps a square to [-1,1]^2") {
  InkSample s = one_stroke({{0, 0, 0.2, 0}, {2, 0, 0.4, 0.01}, {2, 2, 0.6, 0.02},
                            {0, 2, 0.8, 0.03}});
  InkSample n = center_normalize(s);
  CHECK(n.points[0].x == doctest::Approx(-1.0));
  CHECK(n.points[0].y == doctest::Approx(-1.0));
  CHECK(n.points[2].x == doctest::Approx(1.0));
  CHECK(n.points[2].y == doctest::Approx(1.0));
  CHECK(n.points[0].p == doctest::Approx(0.0));
  CHECK(n.points[3].p == doctest::Approx(1.0));
}

TEST_CASE("center_normalize preserves aspect ratio with a shared scale") {
  InkSample s = one_stroke({{-1, -0.5, 0.1, 0}, {1, 0.5, 0.9, 0.01}});
  InkSample n = center_normalize(s);
  CHECK(n.points[0].x == doctest::Approx(-1.0));
  CHECK(n.points[0].y == doctest::Approx(-0.5));
  CHECK(n.points[1].x == doctest::Approx(1.0));
  CHECK(n.points[1].y == doctest::Approx(0.5));
}

TEST_CASE("center_normalize is idempotent") {
  Corpus c = synth_generate({2, 2, 2, 4, 1.0, 1.0, 5});
  for (const auto& s : c.samples) {
    InkSample once = center_normalize(s);
    InkSample twice = center_normalize(once);
    for (std::size_t i = 0; i < once.points.size(); ++i) {
      CHECK(std::abs(once.points[i].x - twice.points[i].x) < 1e-12);
      CHECK(std::abs(once.points[i].y - twice.points[i].y) < 1e-12);
      CHECK(std::abs(once.points[i].p - twice.points[i].p) < 1e-12);
    }
  }
}

TEST_CASE("center_normalize degenerate cases") {
  InkSample s = one_stroke({{3, 3, 0.5, 0}, {3, 3, 0.5, 0.01}, {3, 3, 0.5, 0.02}});
  InkSample n = center_normalize(s);
  for (const auto& p : n.points) {
    CHECK(p.x == 0.0);
    CHECK(p.y == 0.0);
    CHECK(p.p == 1.0);  // constant pressure becomes full pressure
  }
}

TEST_CASE("resample: 30 Hz stroke of 10 points becomes 40 at 120 Hz") {
  std::vector<std::array<double, 4>> pts;
  for (int i = 0; i < 10; ++i)
    pts.push_back({0.1 * i, 0.05 * i, 0.5, i / 30.0});
  InkSample s = one_stroke(pts, SourceTag::kOlhwdb2);
  PreprocessConfig cfg;
  InkSample r = resample(s, cfg);
  REQUIRE(r.stroke_bounds.size() == 1);
  CHECK(r.points.size() == 40);
}

TEST_CASE("resample at the source rate is the identity within 1e-9") {
  std::vector<std::array<double, 4>> pts;
  Rng rng(3);
  for (int i = 0; i < 25; ++i)
    pts.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.1, 1.0), i / 120.0});
  InkSample s = one_stroke(pts);
  PreprocessConfig cfg;
  InkSample r = resample(s, cfg);
  REQUIRE(r.points.size() == s.points.size());
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    CHECK(std::abs(r.points[i].x - s.points[i].x) < 1e-9);
    CHECK(std::abs(r.points[i].y - s.points[i].y) < 1e-9);
    CHECK(std::abs(r.points[i].p - s.points[i].p) < 1e-9);
  }
}

TEST_CASE("resample reproduces a linear ramp exactly at midpoints") {
  std::vector<std::array<double, 4>> pts;
  for (int i = 0; i < 12; ++i) pts.push_back({i / 30.0, 2.0 * i / 30.0, 0.5, i / 30.0});
  InkSample s = one_stroke(pts, SourceTag::kCouch);  // declared 30 Hz
  PreprocessConfig cfg;                              // 120 Hz target, 4x upsample
  InkSample r = resample(s, cfg);
  REQUIRE(r.points.size() == 48);
  // Index-space positions u = j * 11 / 47 sit on x = u / 30.
  for (std::size_t j = 0; j < r.points.size(); ++j) {
    const double u = static_cast<double>(j) * 11.0 / 47.0;
    CHECK(std::abs(r.points[j].x - u / 30.0) < 1e-9);
    CHECK(std::abs(r.points[j].y - 2.0 * u / 30.0) < 1e-9);
  }
}

TEST_CASE("resample duplicates a single-point stroke") {
  InkSample s;
  s.writer_id = "w";
  s.points.push_back({0.5, 0.5, 0.7, 0.0});
  s.stroke_bounds.push_back({0, 1});
  PreprocessConfig cfg;
  InkSample r = resample(s, cfg);
  CHECK(r.points.size() >= 2);
}

TEST_CASE("time_functions: uniform motion closed-form kinematics") {
  PreprocessConfig cfg;
  cfg.zscore = false;
  const double c = 0.03;
  FeatureMatrix m = time_functions(uniform_motion_sample(50, c), cfg);
  REQUIRE(m.rows == 50);
  for (std::size_t i = 5; i < 45; ++i) {
    CHECK(m.at(i, 0) == doctest::Approx(c).epsilon(1e-9));   // dx
    CHECK(m.at(i, 1) == doctest::Approx(0.0));               // dy
    CHECK(m.at(i, 2) == doctest::Approx(0.0));               // ddx
    CHECK(m.at(i, 4) == doctest::Approx(c).epsilon(1e-9));   // v
    CHECK(m.at(i, 5) == doctest::Approx(0.0));               // theta
    CHECK(m.at(i, 6) == doctest::Approx(1.0).epsilon(1e-5)); // cos theta
    CHECK(m.at(i, 7) == doctest::Approx(0.0));               // sin theta
    CHECK(m.at(i, 8) == doctest::Approx(0.0));               // dv
    CHECK(m.at(i, 12) == doctest::Approx(0.0));              // accel
    CHECK(m.at(i, 13) == doctest::Approx(0.5));              // pressure
  }
}

TEST_CASE("time_functions: stationary pen stays finite") {
  PreprocessConfig cfg;
  cfg.zscore = false;
  InkSample s = one_stroke({{1, 1, 0.5, 0.0}, {1, 1, 0.5, 0.01}, {1, 1, 0.5, 0.02},
                            {1, 1, 0.5, 0.03}});
  FeatureMatrix m = time_functions(s, cfg);
  for (double v : m.values) CHECK(std::isfinite(v));
  for (std::size_t i = 0; i < m.rows; ++i) CHECK(m.at(i, 4) == 0.0);  // v
}

TEST_CASE("time_functions: pressure override zeroes the column post z-score") {
  PreprocessConfig cfg;
  cfg.pressure_override = 1.0;
  Corpus c = synth_generate({2, 2, 2, 3, 1.0, 1.0, 17});
  FeatureMatrix m = preprocess_sample(c.samples[0], cfg);
  for (std::size_t i = 0; i < m.rows; ++i) CHECK(m.at(i, 13) == 0.0);
}

TEST_CASE("z-score columns have zero mean and unit variance") {
  Corpus c = synth_generate({2, 2, 3, 5, 1.0, 1.0, 23});
  PreprocessConfig cfg;
  FeatureMatrix m = preprocess_sample(c.samples[1], cfg);
  for (std::size_t col = 0; col < FeatureMatrix::kChannels; ++col) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) mean += m.at(i, col);
    mean /= static_cast<double>(m.rows);
    double var = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
      const double d = m.at(i, col) - mean;
      var += d * d;
    }
    var /= static_cast<double>(m.rows);
    const double sd = std::sqrt(var);
    const bool constant_col = sd < 1e-9 && std::abs(mean) < 1e-9;
    if (!constant_col) {
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(sd - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("pipeline output is finite for random and degenerate strokes") {
  Rng rng(31);
  PreprocessConfig cfg;
  for (int iter = 0; iter < 300; ++iter) {
    InkSample s;
    s.writer_id = "w";
    const int n_strokes = rng.uniform_int(1, 4);
    double t = 0.0;
    for (int k = 0; k < n_strokes; ++k) {
      const int n = rng.uniform_int(1, 40);
      IndexRange b{s.points.size(), s.points.size() + static_cast<std::size_t>(n)};
      const bool degenerate = rng.uniform() < 0.2;
      const double x0 = rng.uniform(-5, 5), y0 = rng.uniform(-5, 5);
      for (int i = 0; i < n; ++i) {
        const double x = degenerate ? x0 : rng.uniform(-5, 5);
        const double y = degenerate ? y0 : rng.uniform(-5, 5);
        s.points.push_back({x, y, rng.uniform(0, 1), t});
        t += 1.0 / 120.0;
      }
      s.stroke_bounds.push_back(b);
      t += rng.uniform(0.05, 0.2);
    }
    if (s.points.size() < 3) continue;
    FeatureMatrix m = preprocess_sample(s, cfg);
    for (double v : m.values) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("pipeline is bit-deterministic") {
  Corpus c = synth_generate({2, 2, 2, 4, 1.0, 1.0, 99});
  PreprocessConfig cfg;
  FeatureMatrix a = preprocess_sample(c.samples[0], cfg);
  FeatureMatrix b = preprocess_sample(c.samples[0], cfg);
  REQUIRE(a.values.size() == b.values.size());
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("too-short samples are rejected") {
  PreprocessConfig cfg;
  InkSample s = one_stroke({{0, 0, 1, 0}, {1, 1, 1, 0.01}});
  CHECK_THROWS(time_functions(s, cfg));
}

TEST_CASE("FTM1 bytes round trip") {
  Corpus c = synth_generate({2, 2, 2, 3, 1.0, 1.0, 7});
  PreprocessConfig cfg;
  FeatureMatrix m = preprocess_sample(c.samples[0], cfg);
  const std::string bytes = feature_matrix_to_bytes(m);
  CHECK(bytes.substr(0, 4) == "FTM1");
  FeatureMatrix back = feature_matrix_from_bytes(bytes);
  CHECK(back.rows == m.rows);
  CHECK(feature_matrix_to_bytes(back) == bytes);
  const std::string csv = feature_matrix_to_csv(m);
  CHECK(csv.substr(0, 5) == "dx,dy");
}

#include "inkline/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "inkline/common.hpp"

namespace inkline {

const std::array<const char*, FeatureMatrix::kChannels>& FeatureMatrix::channel_names() {
  static const std::array<const char*, kChannels> names = {
      "dx",     "dy",     "ddx",           "ddy",         "v",
      "theta",  "cos_theta", "sin_theta",  "dv",          "dtheta",
      "log_curvature", "centripetal", "accel", "pressure"};
  return names;
}

InkSample center_normalize(const InkSample& sample) {
  if (sample.points.empty()) throw std::runtime_error("empty sample");
  InkSample out = sample;

  double min_x = out.points[0].x, max_x = out.points[0].x;
  double min_y = out.points[0].y, max_y = out.points[0].y;
  double min_p = out.points[0].p, max_p = out.points[0].p;
  for (const auto& pt : out.points) {
    min_x = std::min(min_x, pt.x);
    max_x = std::max(max_x, pt.x);
    min_y = std::min(min_y, pt.y);
    max_y = std::max(max_y, pt.y);
    min_p = std::min(min_p, pt.p);
    max_p = std::max(max_p, pt.p);
  }
  const double cx = 0.5 * (min_x + max_x);
  const double cy = 0.5 * (min_y + max_y);

  double extent = 0.0;
  for (const auto& pt : out.points)
    extent = std::max({extent, std::abs(pt.x - cx), std::abs(pt.y - cy)});

  const double p_range = max_p - min_p;
  for (auto& pt : out.points) {
    if (extent > 1e-300) {
      pt.x = (pt.x - cx) / extent;
      pt.y = (pt.y - cy) / extent;
    } else {
      pt.x = 0.0;
      pt.y = 0.0;
    }
    pt.p = p_range > 1e-300 ? (pt.p - min_p) / p_range : 1.0;
  }
  return out;
}

double declared_source_hz(SourceTag tag) {
  switch (tag) {
    case SourceTag::kOlhwdb2: return 30.0;
    case SourceTag::kCouch: return 30.0;
    case SourceTag::kDcohE: return 120.0;
    case SourceTag::kSynth: return 120.0;
  }
  return 120.0;
}

double source_hz(const InkSample& sample) {
  if (sample.has_timestamps()) {
    std::vector<double> dts;
    for (const auto& b : sample.stroke_bounds)
      for (std::size_t i = b.begin + 1; i < b.end; ++i) {
        const double dt = sample.points[i].t - sample.points[i - 1].t;
        if (dt > 0.0) dts.push_back(dt);
      }
    if (!dts.empty()) {
      std::nth_element(dts.begin(), dts.begin() + static_cast<std::ptrdiff_t>(dts.size() / 2),
                       dts.end());
      return 1.0 / dts[dts.size() / 2];
    }
  }
  return declared_source_hz(sample.source);
}

namespace {

double catmull_rom(double p0, double p1, double p2, double p3, double f) {
  const double f2 = f * f;
  const double f3 = f2 * f;
  return 0.5 * (2.0 * p1 + (-p0 + p2) * f +
                (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * f2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * f3);
}

// Linear-reflective extension keeps cubic interpolation exact on linear
// signals at the stroke boundaries.
double extended(const std::vector<double>& v, std::ptrdiff_t k) {
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  if (k >= 0 && k < n) return v[static_cast<std::size_t>(k)];
  if (k < 0) return 2.0 * v.front() - extended(v, -k);
  return 2.0 * v.back() - extended(v, 2 * (n - 1) - k);
}

double sample_channel(const std::vector<double>& v, double u) {
  const auto n = static_cast<std::ptrdiff_t>(v.size());
  auto i = static_cast<std::ptrdiff_t>(std::floor(u));
  i = std::clamp<std::ptrdiff_t>(i, 0, n - 1);
  const double f = u - static_cast<double>(i);
  return catmull_rom(extended(v, i - 1), extended(v, i), extended(v, i + 1),
                     extended(v, i + 2), f);
}

}  // namespace

InkSample resample(const InkSample& sample, const PreprocessConfig& cfg) {
  if (cfg.target_hz <= 0.0) throw std::runtime_error("target_hz must be positive");
  const double src_hz = source_hz(sample);
  const double ratio = cfg.target_hz / src_hz;

  InkSample out;
  out.writer_id = sample.writer_id;
  out.source = sample.source;
  // Character annotations do not survive regridding.
  for (const auto& b : sample.stroke_bounds) {
    std::vector<double> xs, ys, ps, ts;
    for (std::size_t i = b.begin; i < b.end; ++i) {
      xs.push_back(sample.points[i].x);
      ys.push_back(sample.points[i].y);
      ps.push_back(sample.points[i].p);
      ts.push_back(sample.points[i].t);
    }
    if (xs.size() == 1) {
      std::fprintf(stderr, "warning: single-point stroke duplicated during resampling\n");
      xs.push_back(xs[0]);
      ys.push_back(ys[0]);
      ps.push_back(ps[0]);
      ts.push_back(ts[0]);
    }
    const std::size_t n_src = xs.size();
    const auto n_out = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::llround(static_cast<double>(n_src) * ratio)));

    const bool has_t = !std::isnan(ts.front()) && !std::isnan(ts.back());
    const double t0 = has_t ? ts.front() : 0.0;
    const double t_end = has_t ? ts.back() : 0.0;

    IndexRange nb{out.points.size(), out.points.size() + n_out};
    for (std::size_t j = 0; j < n_out; ++j) {
      const double u = static_cast<double>(j) * static_cast<double>(n_src - 1) /
                       static_cast<double>(n_out - 1);
      PenPoint pt;
      pt.x = sample_channel(xs, u);
      pt.y = sample_channel(ys, u);
      pt.p = std::max(0.0, sample_channel(ps, u));
      if (has_t)
        pt.t = t0 + static_cast<double>(j) * (t_end - t0) / static_cast<double>(n_out - 1);
      out.points.push_back(pt);
    }
    out.stroke_bounds.push_back(nb);
  }
  return out;
}

namespace {

std::vector<double> central_diff(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> d(n);
  d[0] = v[1] - v[0];
  for (std::size_t i = 1; i + 1 < n; ++i) d[i] = 0.5 * (v[i + 1] - v[i - 1]);
  d[n - 1] = v[n - 1] - v[n - 2];
  return d;
}

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  while (a > pi) a -= 2.0 * pi;
  while (a <= -pi) a += 2.0 * pi;
  return a;
}

std::vector<double> central_diff_angle(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> d(n);
  d[0] = wrap_angle(v[1] - v[0]);
  for (std::size_t i = 1; i + 1 < n; ++i) d[i] = 0.5 * wrap_angle(v[i + 1] - v[i - 1]);
  d[n - 1] = wrap_angle(v[n - 1] - v[n - 2]);
  return d;
}

}  // namespace

FeatureMatrix time_functions(const InkSample& sample, const PreprocessConfig& cfg) {
  const std::size_t L = sample.points.size();
  if (L < 3) throw std::runtime_error("sample too short for time functions (L < 3)");
  const double eps = cfg.epsilon;

  std::vector<double> x(L), y(L), p(L);
  for (std::size_t i = 0; i < L; ++i) {
    x[i] = sample.points[i].x;
    y[i] = sample.points[i].y;
    p[i] = cfg.pressure_override ? *cfg.pressure_override : sample.points[i].p;
  }

  const auto dx = central_diff(x);
  const auto dy = central_diff(y);
  const auto ddx = central_diff(dx);
  const auto ddy = central_diff(dy);

  std::vector<double> v(L), theta(L), cos_t(L), sin_t(L);
  for (std::size_t i = 0; i < L; ++i) {
    v[i] = std::hypot(dx[i], dy[i]);
    theta[i] = (dx[i] == 0.0 && dy[i] == 0.0) ? 0.0 : std::atan2(dy[i], dx[i]);
    const double vs = std::max(v[i], eps);
    cos_t[i] = dx[i] / vs;
    sin_t[i] = dy[i] / vs;
  }
  const auto dv = central_diff(v);
  const auto dtheta = central_diff_angle(theta);

  FeatureMatrix m;
  m.rows = L;
  m.values.resize(L * FeatureMatrix::kChannels);
  for (std::size_t i = 0; i < L; ++i) {
    const double rho = std::log((v[i] + eps) / (std::abs(dtheta[i]) + eps));
    const double centripetal = v[i] * dtheta[i];
    const double accel = std::sqrt(dv[i] * dv[i] + centripetal * centripetal);
    double* row = &m.values[i * FeatureMatrix::kChannels];
    row[0] = dx[i];
    row[1] = dy[i];
    row[2] = ddx[i];
    row[3] = ddy[i];
    row[4] = v[i];
    row[5] = theta[i];
    row[6] = cos_t[i];
    row[7] = sin_t[i];
    row[8] = dv[i];
    row[9] = dtheta[i];
    row[10] = rho;
    row[11] = centripetal;
    row[12] = accel;
    row[13] = p[i];
  }

  if (cfg.zscore) {
    for (std::size_t c = 0; c < FeatureMatrix::kChannels; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < L; ++i) mean += m.at(i, c);
      mean /= static_cast<double>(L);
      double var = 0.0;
      for (std::size_t i = 0; i < L; ++i) {
        const double d = m.at(i, c) - mean;
        var += d * d;
      }
      var /= static_cast<double>(L);
      const double sd = std::sqrt(var);
      if (sd < 1e-12) {
        for (std::size_t i = 0; i < L; ++i) m.at(i, c) = 0.0;
      } else {
        for (std::size_t i = 0; i < L; ++i) m.at(i, c) = (m.at(i, c) - mean) / sd;
      }
    }
  }

  for (double val : m.values)
    if (!std::isfinite(val)) throw std::runtime_error("non-finite time function value");
  return m;
}

FeatureMatrix preprocess_sample(const InkSample& sample, const PreprocessConfig& cfg) {
  return time_functions(resample(center_normalize(sample), cfg), cfg);
}

std::string feature_matrix_to_bytes(const FeatureMatrix& m) {
  ByteWriter w;
  w.bytes("FTM1", 4);
  w.u32(static_cast<std::uint32_t>(m.rows));
  w.u32(static_cast<std::uint32_t>(FeatureMatrix::kChannels));
  for (double v : m.values) w.f32(static_cast<float>(v));
  return w.buf;
}

FeatureMatrix feature_matrix_from_bytes(const std::string& bytes) {
  ByteReader r(bytes);
  r.need(4);
  if (bytes.compare(0, 4, "FTM1") != 0) throw std::runtime_error("bad FTM1 magic");
  r.pos = 4;
  FeatureMatrix m;
  m.rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (cols != FeatureMatrix::kChannels)
    throw std::runtime_error("FTM1 channel count mismatch");
  m.values.resize(m.rows * FeatureMatrix::kChannels);
  for (auto& v : m.values) v = r.f32();
  return m;
}

void save_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& path) {
  atomic_write_file(path, feature_matrix_to_bytes(m));
}

FeatureMatrix load_feature_matrix(const std::filesystem::path& path) {
  return feature_matrix_from_bytes(read_file(path));
}

std::string feature_matrix_to_csv(const FeatureMatrix& m) {
  std::string out;
  const auto& names = FeatureMatrix::channel_names();
  for (std::size_t c = 0; c < names.size(); ++c) {
    out += names[c];
    out += (c + 1 < names.size()) ? ',' : '\n';
  }
  char buf[64];
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t c = 0; c < FeatureMatrix::kChannels; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", m.at(i, c));
      out += buf;
      out += (c + 1 < FeatureMatrix::kChannels) ? ',' : '\n';
    }
  }
  return out;
}

}  // namespace inkline

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "inkline/ink.hpp"

namespace inkline {

/// Standardized L x 14 time-function matrix, the network input.
/// Column order: dx, dy, ddx, ddy, v, theta, cos_theta, sin_theta, dv,
/// dtheta, log_curvature, centripetal, accel, pressure.
struct FeatureMatrix {
  static constexpr std::size_t kChannels = 14;

  std::size_t rows = 0;
  std::vector<double> values;  // row-major rows x kChannels

  double& at(std::size_t r, std::size_t c) { return values[r * kChannels + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * kChannels + c]; }

  static const std::array<const char*, kChannels>& channel_names();
};

struct PreprocessConfig {
  double target_hz = 120.0;
  std::optional<double> pressure_override;
  bool zscore = true;
  double epsilon = 1e-8;
};

/// Centers the bounding box at (0,0) and scales so max(|x|,|y|) = 1 with a
/// shared scale (aspect ratio preserved). Pressure is min-max normalized to
/// [0,1]; a constant pressure column becomes all 1.0. Zero spatial extent
/// collapses coordinates to 0. Idempotent.
InkSample center_normalize(const InkSample& sample);

/// Per-stroke cubic (Catmull-Rom) resampling of x, y, p onto a uniform grid at
/// cfg.target_hz. The source rate comes from timestamps when present,
/// otherwise from the declared rate of the sample's source. Stroke boundaries
/// are preserved; each output stroke has round(n * target/source) points,
/// minimum 2. A single-point stroke is duplicated to 2 points with a warning.
InkSample resample(const InkSample& sample, const PreprocessConfig& cfg);

/// Declared capture rate for samples without timestamps.
double declared_source_hz(SourceTag tag);

/// Estimated or declared source sampling rate for a sample.
double source_hz(const InkSample& sample);

/// Computes the 14 time functions of an already normalized and resampled
/// sample. Derivatives use central differences with a unit time step
/// (forward/backward at the ends). With cfg.zscore each column is standardized
/// per sample; constant columns become all zeros. L < 3 is an error.
FeatureMatrix time_functions(const InkSample& sample, const PreprocessConfig& cfg);

/// center_normalize -> resample -> time_functions.
FeatureMatrix preprocess_sample(const InkSample& sample, const PreprocessConfig& cfg);

// "FTM1" export: magic, u32 L, u32 C=14, row-major f32.
std::string feature_matrix_to_bytes(const FeatureMatrix& m);
FeatureMatrix feature_matrix_from_bytes(const std::string& bytes);
void save_feature_matrix(const FeatureMatrix& m, const std::filesystem::path& path);
FeatureMatrix load_feature_matrix(const std::filesystem::path& path);
std::string feature_matrix_to_csv(const FeatureMatrix& m);

}  // namespace inkline

#pragma once

#include <cstdint>
#include <vector>

#include "inkline/ink.hpp"

namespace inkline {

/// Synthetic ink generator. Each writer gets a persistent style (slant, size,
/// speed, tremor, pressure profile, curvature); samples render pseudo-glyphs
/// from a fixed shared library at 120 Hz with timestamps and stroke gaps, so
/// segmentation and phrase assembly are exercisable without real corpora.
struct SynthSpec {
  int writers = 2;
  int samples_per_writer = 2;
  int chars_min = 2;
  int chars_max = 5;
  double style_noise = 1.0;   // scales within-writer sample variation
  double tremor_scale = 1.0;  // scales per-writer tremor amplitude
  std::uint64_t seed = 0;

  void validate() const;
};

struct WriterStyle {
  double slant = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  double speed = 1.0;
  double tremor_amp = 0.0;
  double tremor_freq = 10.0;
  double tremor_mix = 0.5;     // x vs y share of the tremor
  double pressure_base = 0.6;
  double pressure_amp = 0.15;
  double pressure_phase = 0.0;
  double pressure_amp2 = 0.0;  // second harmonic of the stroke pressure bow
  double pressure_phase2 = 0.0;
  double curvature = 0.0;
  double vel_alpha = 1.0;      // asymmetry of the within-stroke speed profile
  double corner_round = 0.0;   // blends control points toward their neighbors
  double jitter = 0.0;
};

WriterStyle sample_writer_style(std::uint64_t seed, int writer_index,
                                double style_noise, double tremor_scale);

/// Renders one phrase of the given glyph ids for a writer style. Deterministic
/// for a fixed (style, glyphs, noise seed); with zero jitter and tremor the
/// rendering is noise-free.
InkSample render_phrase(const WriterStyle& style, const std::vector<int>& glyphs,
                        std::uint64_t noise_seed);

int glyph_count();

/// Corpus of phrase samples, writer-major, fully determined by the spec.
Corpus synth_generate(const SynthSpec& spec);

/// Corpus of longer line samples (chars_per_line in [chars_min, chars_max])
/// with character annotations, for segmentation pipelines.
Corpus synth_lines(int writers, int lines_per_writer, int chars_min, int chars_max,
                   std::uint64_t seed);

}  // namespace inkline

#include "inkline/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "inkline/common.hpp"

namespace inkline {

void SynthSpec::validate() const {
  if (writers < 2) throw std::runtime_error("synth spec: writers must be >= 2");
  if (samples_per_writer < 2)
    throw std::runtime_error("synth spec: samples_per_writer must be >= 2");
  if (chars_min < 2 || chars_max > 5 || chars_min > chars_max)
    throw std::runtime_error("synth spec: chars_per_phrase must lie in [2,5]");
  if (style_noise < 0.0 || tremor_scale < 0.0)
    throw std::runtime_error("synth spec: negative noise scales");
}

namespace {

constexpr double kDeviceHz = 120.0;

struct GlyphStroke {
  std::vector<double> cx, cy;  // control points in the unit box
  double duration;             // seconds of ink at speed 1
};

struct Glyph {
  std::vector<GlyphStroke> strokes;
};

/// Fixed shared glyph library, generated once from a constant seed so glyph
/// identities are stable across corpora and seeds.
const std::vector<Glyph>& glyph_library() {
  static const std::vector<Glyph> lib = [] {
    std::vector<Glyph> glyphs;
    Rng rng(0xD01F11B5ULL);
    for (int g = 0; g < 24; ++g) {
      Glyph glyph;
      const int n_strokes = rng.uniform_int(1, 4);
      double total = 0.0;
      for (int s = 0; s < n_strokes; ++s) {
        GlyphStroke st;
        const int n_ctrl = rng.uniform_int(3, 6);
        double x = rng.uniform(0.05, 0.95);
        double y = rng.uniform(0.05, 0.95);
        for (int c = 0; c < n_ctrl; ++c) {
          st.cx.push_back(x);
          st.cy.push_back(y);
          x = std::clamp(x + rng.uniform(-0.5, 0.5), 0.0, 1.0);
          y = std::clamp(y + rng.uniform(-0.5, 0.5), 0.0, 1.0);
        }
        st.duration = rng.uniform(0.14, 0.3);
        total += st.duration;
        glyph.strokes.push_back(std::move(st));
      }
      // Normalize each glyph's ink time so even two-character phrases clear
      // the network's minimum sequence length at every supported rate.
      const double target = rng.uniform(0.42, 0.55);
      for (auto& st : glyph.strokes) st.duration *= target / total;
      glyphs.push_back(std::move(glyph));
    }
    return glyphs;
  }();
  return lib;
}

double catmull(const std::vector<double>& p, double u) {
  const auto n = static_cast<std::ptrdiff_t>(p.size());
  auto at = [&](std::ptrdiff_t i) {
    return p[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1))];
  };
  auto i = static_cast<std::ptrdiff_t>(std::floor(u));
  i = std::clamp<std::ptrdiff_t>(i, 0, n - 1);
  const double f = u - static_cast<double>(i);
  const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
  const double f2 = f * f, f3 = f2 * f;
  return 0.5 * (2.0 * p1 + (-p0 + p2) * f + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * f2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * f3);
}

}  // namespace

int glyph_count() { return static_cast<int>(glyph_library().size()); }

WriterStyle sample_writer_style(std::uint64_t seed, int writer_index, double style_noise,
                                double tremor_scale) {
  Rng rng = Rng(seed).fork(0x57a7e000ULL + static_cast<std::uint64_t>(writer_index));
  WriterStyle s;
  s.slant = rng.uniform(-0.55, 0.55);
  s.scale_x = rng.uniform(0.7, 1.3);
  s.scale_y = rng.uniform(0.7, 1.3);
  s.speed = rng.uniform(0.78, 1.3);
  s.tremor_amp = rng.uniform(0.004, 0.035) * tremor_scale;
  s.tremor_freq = rng.uniform(4.0, 20.0);
  s.tremor_mix = rng.uniform(0.2, 0.8);
  s.pressure_base = rng.uniform(0.35, 0.8);
  s.pressure_amp = rng.uniform(0.08, 0.3);
  s.pressure_phase = rng.uniform(0.0, 3.14159265358979);
  s.pressure_amp2 = rng.uniform(-0.2, 0.2);
  s.pressure_phase2 = rng.uniform(0.0, 6.283185307179586);
  s.curvature = rng.uniform(-0.4, 0.4);
  s.vel_alpha = rng.uniform(0.45, 2.2);
  s.corner_round = rng.uniform(0.0, 0.45);
  s.jitter = 0.012 * style_noise;
  return s;
}

InkSample render_phrase(const WriterStyle& style, const std::vector<int>& glyphs,
                        std::uint64_t noise_seed) {
  const auto& lib = glyph_library();
  Rng noise(noise_seed);
  InkSample sample;
  sample.source = SourceTag::kSynth;
  std::vector<IndexRange> char_marks;

  double clock = 0.0;
  const double advance = 1.15 * style.scale_x;
  for (std::size_t ci = 0; ci < glyphs.size(); ++ci) {
    const Glyph& glyph = lib[static_cast<std::size_t>(glyphs[ci]) % lib.size()];
    const double x_off = advance * static_cast<double>(ci);
    const std::size_t char_begin = sample.points.size();

    for (const auto& stroke : glyph.strokes) {
      // Per-sample control point jitter gives within-writer variation;
      // corner rounding is a per-writer shape habit.
      std::vector<double> cx = stroke.cx, cy = stroke.cy;
      for (std::size_t c = 0; c < cx.size(); ++c) {
        cx[c] += noise.normal(0.0, style.jitter);
        cy[c] += noise.normal(0.0, style.jitter);
      }
      for (std::size_t c = 1; c + 1 < cx.size(); ++c) {
        cx[c] = (1.0 - style.corner_round) * cx[c] +
                style.corner_round * 0.5 * (cx[c - 1] + cx[c + 1]);
        cy[c] = (1.0 - style.corner_round) * cy[c] +
                style.corner_round * 0.5 * (cy[c - 1] + cy[c + 1]);
      }
      const double duration =
          stroke.duration * style.speed * (1.0 + noise.normal(0.0, 0.05 * style.jitter / 0.012));
      const auto n_pts =
          std::max<std::size_t>(3, static_cast<std::size_t>(std::llround(duration * kDeviceHz)));
      const double tremor_phase = noise.uniform(0.0, 6.283185307179586);

      IndexRange bounds{sample.points.size(), sample.points.size() + n_pts};
      for (std::size_t j = 0; j < n_pts; ++j) {
        const double prog = static_cast<double>(j) / static_cast<double>(n_pts - 1);
        // Writer-specific velocity profile: pen position advances along the
        // curve under a warped progress, so speed shape differs per writer.
        const double pa = std::pow(std::max(prog, 0.0), style.vel_alpha);
        const double pb = std::pow(std::max(1.0 - prog, 0.0), style.vel_alpha);
        const double warped = pa / (pa + pb);
        const double u = warped * static_cast<double>(cx.size() - 1);
        double gx = catmull(cx, u);
        double gy = catmull(cy, u);
        // Curvature style bends the stroke bow-like around its chord.
        gy += style.curvature * std::sin(3.14159265358979 * warped) * 0.35;
        // Shear, scale, tremor.
        double px = style.scale_x * (gx + style.slant * gy) + x_off;
        double py = style.scale_y * gy;
        const double t_now = clock + prog * duration;
        const double tr = style.tremor_amp *
                          std::sin(6.283185307179586 * style.tremor_freq * t_now + tremor_phase);
        px += tr * style.tremor_mix * 2.0;
        py += tr * (1.0 - style.tremor_mix) * 2.0;

        PenPoint pt;
        pt.x = px;
        pt.y = py;
        pt.p = std::clamp(
            style.pressure_base +
                style.pressure_amp *
                    std::sin(3.14159265358979 * prog + style.pressure_phase) +
                style.pressure_amp2 *
                    std::sin(6.283185307179586 * prog + style.pressure_phase2) +
                noise.normal(0.0, 2.0 * style.jitter),
            0.05, 1.2);
        pt.t = t_now;
        sample.points.push_back(pt);
      }
      sample.stroke_bounds.push_back(bounds);
      clock += duration + noise.uniform(0.05, 0.1);  // pen-up gap within a character
    }
    char_marks.push_back({char_begin, sample.points.size()});
    clock += noise.uniform(0.35, 0.55);  // longer pen-up gap between characters
  }
  sample.char_bounds = std::move(char_marks);
  return sample;
}

Corpus synth_generate(const SynthSpec& spec) {
  spec.validate();
  Corpus corpus;
  Rng seq(Rng(spec.seed).fork(0xC0DEULL).next_u64());
  for (int w = 0; w < spec.writers; ++w) {
    const WriterStyle style =
        sample_writer_style(spec.seed, w, spec.style_noise, spec.tremor_scale);
    char wid[16];
    std::snprintf(wid, sizeof wid, "w%03d", w);
    for (int s = 0; s < spec.samples_per_writer; ++s) {
      const int n_chars = seq.uniform_int(spec.chars_min, spec.chars_max);
      std::vector<int> glyphs;
      for (int c = 0; c < n_chars; ++c)
        glyphs.push_back(static_cast<int>(seq.uniform_index(
            static_cast<std::uint64_t>(glyph_count()))));
      InkSample sample = render_phrase(style, glyphs, seq.next_u64());
      sample.writer_id = wid;
      corpus.samples.push_back(std::move(sample));
    }
  }
  return corpus;
}

Corpus synth_lines(int writers, int lines_per_writer, int chars_min, int chars_max,
                   std::uint64_t seed) {
  if (writers < 1 || lines_per_writer < 1 || chars_min < 1 || chars_min > chars_max)
    throw std::runtime_error("synth lines: bad arguments");
  Corpus corpus;
  Rng seq(Rng(seed).fork(0x11E5ULL).next_u64());
  for (int w = 0; w < writers; ++w) {
    const WriterStyle style = sample_writer_style(seed, w, 1.0, 1.0);
    char wid[16];
    std::snprintf(wid, sizeof wid, "w%03d", w);
    for (int s = 0; s < lines_per_writer; ++s) {
      const int n_chars = seq.uniform_int(chars_min, chars_max);
      std::vector<int> glyphs;
      for (int c = 0; c < n_chars; ++c)
        glyphs.push_back(static_cast<int>(seq.uniform_index(
            static_cast<std::uint64_t>(glyph_count()))));
      InkSample sample = render_phrase(style, glyphs, seq.next_u64());
      sample.writer_id = wid;
      corpus.samples.push_back(std::move(sample));
    }
  }
  return corpus;
}

}  // namespace inkline

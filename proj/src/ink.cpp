#include "inkline/ink.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "inkline/common.hpp"
#include "json.hpp"

namespace inkline {

using nlohmann::json;

std::string to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::kOlhwdb2: return "OLHWDB2";
    case SourceTag::kDcohE: return "DCOH_E";
    case SourceTag::kCouch: return "COUCH";
    case SourceTag::kSynth: return "SYNTH";
  }
  return "SYNTH";
}

SourceTag source_tag_from_string(const std::string& s) {
  if (s == "OLHWDB2") return SourceTag::kOlhwdb2;
  if (s == "DCOH_E") return SourceTag::kDcohE;
  if (s == "COUCH") return SourceTag::kCouch;
  if (s == "SYNTH") return SourceTag::kSynth;
  throw std::runtime_error("unknown source tag: " + s);
}

bool InkSample::has_timestamps() const {
  for (const auto& pt : points)
    if (!pt.has_t()) return false;
  return !points.empty();
}

static void validate_partition(const std::vector<IndexRange>& bounds,
                               std::size_t total, const char* what) {
  if (bounds.empty()) throw std::runtime_error(std::string(what) + " empty");
  std::size_t pos = 0;
  for (const auto& r : bounds) {
    if (r.begin != pos || r.end <= r.begin)
      throw std::runtime_error(std::string(what) + " do not partition points");
    pos = r.end;
  }
  if (pos != total)
    throw std::runtime_error(std::string(what) + " do not cover all points");
}

void InkSample::validate() const {
  if (points.empty()) throw std::runtime_error("sample has no points");
  validate_partition(stroke_bounds, points.size(), "stroke bounds");
  if (char_bounds) validate_partition(*char_bounds, points.size(), "char bounds");
  for (const auto& pt : points)
    if (pt.p < 0.0) throw std::runtime_error("negative pressure");
  for (const auto& s : stroke_bounds) {
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t i = s.begin; i < s.end; ++i) {
      if (!points[i].has_t()) continue;
      if (points[i].t < prev) throw std::runtime_error("timestamps decrease within a stroke");
      prev = points[i].t;
    }
  }
}

std::uint64_t InkSample::content_hash() const {
  std::uint64_t h = fnv1a64(writer_id.data(), writer_id.size());
  for (const auto& s : stroke_bounds) {
    std::uint64_t n = s.size();
    h = fnv1a64(&n, sizeof n, h);
    for (std::size_t i = s.begin; i < s.end; ++i) {
      const PenPoint& pt = points[i];
      double vals[3] = {pt.x, pt.y, pt.p};
      h = fnv1a64(vals, sizeof vals, h);
      std::uint8_t has_t = pt.has_t() ? 1 : 0;
      h = fnv1a64(&has_t, 1, h);
      if (has_t) h = fnv1a64(&pt.t, sizeof pt.t, h);
    }
  }
  return h;
}

std::vector<std::string> Corpus::writers() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& s : samples)
    if (seen.insert(s.writer_id).second) out.push_back(s.writer_id);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus I/O
// ---------------------------------------------------------------------------

static json sample_to_json(const InkSample& s) {
  json strokes = json::array();
  for (const auto& b : s.stroke_bounds) {
    json stroke = json::array();
    for (std::size_t i = b.begin; i < b.end; ++i) {
      const PenPoint& pt = s.points[i];
      if (pt.has_t())
        stroke.push_back({pt.x, pt.y, pt.p, pt.t});
      else
        stroke.push_back({pt.x, pt.y, pt.p});
    }
    strokes.push_back(std::move(stroke));
  }
  json j = {{"writer", s.writer_id},
            {"source", to_string(s.source)},
            {"strokes", std::move(strokes)}};
  if (s.char_bounds) {
    json chars = json::array();
    for (const auto& c : *s.char_bounds) chars.push_back({c.begin, c.end});
    j["chars"] = std::move(chars);
  }
  return j;
}

static InkSample sample_from_json(const json& j) {
  InkSample s;
  s.writer_id = j.at("writer").get<std::string>();
  if (j.contains("source")) s.source = source_tag_from_string(j.at("source").get<std::string>());
  const json& strokes = j.at("strokes");
  if (!strokes.is_array() || strokes.empty())
    throw std::runtime_error("sample has no strokes");
  for (const auto& stroke : strokes) {
    IndexRange b{s.points.size(), s.points.size()};
    for (const auto& pt : stroke) {
      if (!pt.is_array() || pt.size() < 2 || pt.size() > 4)
        throw std::runtime_error("point must be [x,y], [x,y,p] or [x,y,p,t]");
      PenPoint p;
      p.x = pt[0].get<double>();
      p.y = pt[1].get<double>();
      p.p = pt.size() >= 3 ? pt[2].get<double>() : 1.0;
      if (pt.size() == 4) p.t = pt[3].get<double>();
      s.points.push_back(p);
    }
    b.end = s.points.size();
    if (b.size() == 0) throw std::runtime_error("empty stroke");
    s.stroke_bounds.push_back(b);
  }
  if (j.contains("chars")) {
    std::vector<IndexRange> chars;
    for (const auto& c : j.at("chars"))
      chars.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
    s.char_bounds = std::move(chars);
  }
  s.validate();
  return s;
}

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus.samples) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  return out;
}

Corpus corpus_from_jsonl(const std::string& text) {
  Corpus corpus;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      corpus.samples.push_back(sample_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("parse error at line " + std::to_string(lineno) +
                               ": " + e.what());
    }
  }
  if (corpus.empty()) throw std::runtime_error("empty corpus");
  return corpus;
}

std::string corpus_to_binary(const Corpus& corpus) {
  ByteWriter w;
  w.bytes("INK1", 4);
  w.u32(static_cast<std::uint32_t>(corpus.samples.size()));
  for (const auto& s : corpus.samples) {
    w.str(s.writer_id);
    w.u32(static_cast<std::uint32_t>(s.stroke_bounds.size()));
    for (const auto& b : s.stroke_bounds) {
      w.u32(static_cast<std::uint32_t>(b.size()));
      for (std::size_t i = b.begin; i < b.end; ++i) {
        const PenPoint& pt = s.points[i];
        w.f32(static_cast<float>(pt.x));
        w.f32(static_cast<float>(pt.y));
        w.f32(static_cast<float>(pt.p));
        w.f32(pt.has_t() ? static_cast<float>(pt.t)
                         : std::numeric_limits<float>::quiet_NaN());
      }
    }
  }
  return w.buf;
}

Corpus corpus_from_binary(const std::string& bytes) {
  ByteReader r(bytes);
  try {
    char magic[4];
    r.need(4);
    std::memcpy(magic, bytes.data(), 4);
    r.pos = 4;
    if (std::memcmp(magic, "INK1", 4) != 0) throw std::runtime_error("bad magic");
    Corpus corpus;
    const std::uint32_t count = r.u32();
    if (count == 0) throw std::runtime_error("empty corpus");
    for (std::uint32_t si = 0; si < count; ++si) {
      InkSample s;
      s.writer_id = r.str();
      const std::uint32_t strokes = r.u32();
      for (std::uint32_t k = 0; k < strokes; ++k) {
        const std::uint32_t npts = r.u32();
        IndexRange b{s.points.size(), s.points.size() + npts};
        for (std::uint32_t i = 0; i < npts; ++i) {
          PenPoint p;
          p.x = r.f32();
          p.y = r.f32();
          float pf = r.f32();
          p.p = std::isnan(pf) ? 1.0 : pf;
          float tf = r.f32();
          p.t = std::isnan(tf) ? std::numeric_limits<double>::quiet_NaN()
                               : static_cast<double>(tf);
          s.points.push_back(p);
        }
        s.stroke_bounds.push_back(b);
      }
      s.validate();
      corpus.samples.push_back(std::move(s));
    }
    return corpus;
  } catch (const std::exception& e) {
    throw std::runtime_error("parse error at offset " + std::to_string(r.pos) +
                             ": " + e.what());
  }
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  const std::string data = read_file(path);
  if (data.empty()) throw std::runtime_error("empty corpus file: " + path.string());
  return format == CorpusFormat::kJsonl ? corpus_from_jsonl(data)
                                        : corpus_from_binary(data);
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 CorpusFormat format) {
  atomic_write_file(path, format == CorpusFormat::kJsonl ? corpus_to_jsonl(corpus)
                                                         : corpus_to_binary(corpus));
}

// ---------------------------------------------------------------------------
// Segmentation and phrase assembly
// ---------------------------------------------------------------------------

static InkSample slice_strokes(const InkSample& src, std::size_t stroke_begin,
                               std::size_t stroke_end) {
  InkSample out;
  out.writer_id = src.writer_id;
  out.source = src.source;
  const std::size_t pt_begin = src.stroke_bounds[stroke_begin].begin;
  const std::size_t pt_end = src.stroke_bounds[stroke_end - 1].end;
  out.points.assign(src.points.begin() + static_cast<std::ptrdiff_t>(pt_begin),
                    src.points.begin() + static_cast<std::ptrdiff_t>(pt_end));
  for (std::size_t k = stroke_begin; k < stroke_end; ++k) {
    const IndexRange& b = src.stroke_bounds[k];
    out.stroke_bounds.push_back({b.begin - pt_begin, b.end - pt_begin});
  }
  return out;
}

std::vector<InkSample> segment_line(const InkSample& line, std::size_t char_count) {
  if (char_count == 0) throw std::runtime_error("char_count must be positive");
  if (!line.has_timestamps())
    throw std::runtime_error("unsupported sample: timestamps required for segmentation");
  const std::size_t n = line.stroke_count();
  if (n < char_count)
    throw std::runtime_error("infeasible segmentation: " + std::to_string(char_count) +
                             " characters from " + std::to_string(n) + " strokes");

  // Inter-stroke gaps: gap[i] sits between stroke i and stroke i+1.
  std::vector<double> gaps(n >= 1 ? n - 1 : 0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double end_t = line.points[line.stroke_bounds[i].end - 1].t;
    const double start_t = line.points[line.stroke_bounds[i + 1].begin].t;
    gaps[i] = start_t - end_t;
  }

  // Largest char_count-1 gaps become division points; stable descending order
  // so the earlier gap wins among equals.
  std::vector<std::size_t> order(gaps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return gaps[a] > gaps[b]; });
  std::vector<std::size_t> cuts(order.begin(),
                                order.begin() + static_cast<std::ptrdiff_t>(char_count - 1));
  std::sort(cuts.begin(), cuts.end());

  std::vector<InkSample> chars;
  std::size_t begin = 0;
  for (std::size_t cut : cuts) {
    chars.push_back(slice_strokes(line, begin, cut + 1));
    begin = cut + 1;
  }
  chars.push_back(slice_strokes(line, begin, n));
  return chars;
}

std::vector<InkSample> assemble_phrases(const std::vector<InkSample>& chars,
                                        std::uint64_t rng_seed) {
  for (const auto& c : chars)
    if (c.writer_id != chars.front().writer_id)
      throw std::runtime_error("phrase characters must share a writer");

  std::vector<InkSample> phrases;
  Rng rng(rng_seed);
  std::size_t idx = 0;
  while (chars.size() - idx >= 2) {
    const std::size_t remaining = chars.size() - idx;
    std::size_t run = static_cast<std::size_t>(rng.uniform_int(2, 5));
    if (run > remaining) run = remaining;

    InkSample phrase;
    phrase.writer_id = chars[idx].writer_id;
    phrase.source = chars[idx].source;
    std::vector<IndexRange> char_marks;
    for (std::size_t k = idx; k < idx + run; ++k) {
      const InkSample& c = chars[k];
      const std::size_t base = phrase.points.size();
      phrase.points.insert(phrase.points.end(), c.points.begin(), c.points.end());
      for (const auto& b : c.stroke_bounds)
        phrase.stroke_bounds.push_back({base + b.begin, base + b.end});
      char_marks.push_back({base, phrase.points.size()});
    }
    phrase.char_bounds = std::move(char_marks);
    phrases.push_back(std::move(phrase));
    idx += run;
  }
  return phrases;
}

Corpus filter_writers(const Corpus& corpus, std::size_t min_samples) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& s : corpus.samples) ++counts[s.writer_id];
  Corpus out;
  for (const auto& s : corpus.samples)
    if (counts[s.writer_id] >= min_samples) out.samples.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

RetrievalSplit open_set_split(const Corpus& corpus, double train_writer_frac,
                              std::uint64_t seed) {
  if (train_writer_frac <= 0.0 || train_writer_frac >= 1.0)
    throw std::runtime_error("train_writer_frac must lie in (0, 1)");
  std::vector<std::string> writers = corpus.writers();
  if (writers.size() < 2) throw std::runtime_error("open-set split needs >= 2 writers");

  Rng rng(seed);
  rng.shuffle(writers);
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_writer_frac * static_cast<double>(writers.size())));
  if (n_train == 0) throw std::runtime_error("train split would be empty");

  std::unordered_set<std::string> train_set(writers.begin(),
                                            writers.begin() + static_cast<std::ptrdiff_t>(n_train));

  RetrievalSplit split;
  split.seed = seed;
  std::unordered_map<std::string, std::vector<std::size_t>> test_samples;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    if (train_set.count(s.writer_id))
      split.train.samples.push_back(s);
    else
      test_samples[s.writer_id].push_back(i);
  }

  std::unordered_set<std::size_t> query_idx;
  for (std::size_t w = n_train; w < writers.size(); ++w) {
    const auto& ids = test_samples[writers[w]];
    const std::size_t pick = ids[rng.uniform_index(ids.size())];
    query_idx.insert(pick);
    split.query.samples.push_back(corpus.samples[pick]);
    if (ids.size() == 1)
      std::fprintf(stderr, "warning: writer %s has a single sample; empty gallery share\n",
                   writers[w].c_str());
  }
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    if (!train_set.count(s.writer_id) && !query_idx.count(i))
      split.gallery.samples.push_back(s);
  }
  return split;
}

std::pair<Corpus, Corpus> closed_set_split(const Corpus& corpus, double train_frac,
                                           std::uint64_t seed) {
  if (train_frac <= 0.0 || train_frac >= 1.0)
    throw std::runtime_error("train_frac must lie in (0, 1)");
  std::vector<std::string> writers = corpus.writers();
  std::unordered_map<std::string, std::vector<std::size_t>> by_writer;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i)
    by_writer[corpus.samples[i].writer_id].push_back(i);

  Rng rng(seed);
  std::unordered_set<std::size_t> train_idx;
  for (const auto& w : writers) {
    auto ids = by_writer[w];
    if (ids.size() < 2)
      throw std::runtime_error("writer " + w + " has fewer than 2 samples");
    rng.shuffle(ids);
    auto n_train = static_cast<std::size_t>(
        std::floor(train_frac * static_cast<double>(ids.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
    for (std::size_t k = 0; k < n_train; ++k) train_idx.insert(ids[k]);
  }

  std::pair<Corpus, Corpus> out;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    if (train_idx.count(i))
      out.first.samples.push_back(corpus.samples[i]);
    else
      out.second.samples.push_back(corpus.samples[i]);
  }
  return out;
}

}  // namespace inkline

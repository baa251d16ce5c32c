#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace inkline {

enum class SourceTag { kOlhwdb2, kDcohE, kCouch, kSynth };

std::string to_string(SourceTag tag);
SourceTag source_tag_from_string(const std::string& s);

/// One captured pen point. Timestamp t is seconds since sample start and is
/// NaN when the capture device did not provide one.
struct PenPoint {
  double x = 0.0;
  double y = 0.0;
  double p = 1.0;
  double t = std::numeric_limits<double>::quiet_NaN();

  bool has_t() const { return !std::isnan(t); }
};

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

/// A variable-length pen trajectory with stroke boundaries and writer label;
/// the raw unit of retrieval.
struct InkSample {
  std::vector<PenPoint> points;
  std::vector<IndexRange> stroke_bounds;  // partition of points, in order
  std::string writer_id;
  std::optional<std::vector<IndexRange>> char_bounds;
  SourceTag source = SourceTag::kSynth;

  std::size_t stroke_count() const { return stroke_bounds.size(); }
  bool has_timestamps() const;

  /// Checks the partition invariants; throws std::runtime_error on violation.
  void validate() const;

  /// Stable 64-bit content hash over writer id and point data. Together with
  /// the source tag this is the sample identity.
  std::uint64_t content_hash() const;
};

struct Corpus {
  std::vector<InkSample> samples;

  /// Distinct writer ids in order of first appearance.
  std::vector<std::string> writers() const;
  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct RetrievalSplit {
  Corpus train;
  Corpus query;    // exactly one sample per test writer
  Corpus gallery;  // all remaining test-writer samples
  std::uint64_t seed = 0;
};

enum class CorpusFormat { kJsonl, kBinary };

/// Loads a corpus from the canonical jsonl or "INK1" binary format.
/// Points missing pressure get p = 1.0. Malformed records raise an error
/// naming the line (jsonl) or byte offset (binary); an empty file is an error.
Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 CorpusFormat format);

std::string corpus_to_jsonl(const Corpus& corpus);
std::string corpus_to_binary(const Corpus& corpus);
Corpus corpus_from_jsonl(const std::string& text);
Corpus corpus_from_binary(const std::string& bytes);

/// Splits a timestamped line into exactly char_count characters by cutting at
/// the char_count-1 largest inter-stroke time gaps. Ties at the threshold are
/// resolved in favor of the earlier gap. Lossless: concatenating the outputs'
/// strokes in order reproduces the input.
std::vector<InkSample> segment_line(const InkSample& line, std::size_t char_count);

/// Groups consecutive characters (same writer, written order) into phrases of
/// 2-5 characters with seeded-uniform run lengths. A trailing single leftover
/// character is dropped. Fewer than 2 inputs yields an empty result.
std::vector<InkSample> assemble_phrases(const std::vector<InkSample>& chars,
                                        std::uint64_t rng_seed);

/// Drops writers with fewer than min_samples samples; order preserved.
Corpus filter_writers(const Corpus& corpus, std::size_t min_samples = 20);

/// Open-set split: a seeded shuffle assigns floor(frac * W) writers to train;
/// each remaining writer contributes one seeded-random query sample, the rest
/// go to the gallery. Train and test writer sets are disjoint.
RetrievalSplit open_set_split(const Corpus& corpus, double train_writer_frac,
                              std::uint64_t seed);

/// Closed-set split: per-writer seeded split keeping the full writer set on
/// both sides. A writer with a single sample is an error naming the writer.
std::pair<Corpus, Corpus> closed_set_split(const Corpus& corpus, double train_frac,
                                           std::uint64_t seed);

}  // namespace inkline

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "inkline/ink.hpp"
#include "inkline/model.hpp"
#include "inkline/preprocess.hpp"

namespace inkline {

struct SampleRef {
  SourceTag source = SourceTag::kSynth;
  std::uint64_t hash = 0;
  std::size_t index = 0;  // storage order; the ranking tie-break key

  std::string to_string() const;
};

/// Gallery of unit-norm embeddings with writer labels.
struct EmbeddingIndex {
  std::size_t dim = 0;
  std::vector<float> vectors;  // size() x dim, row-major, unit rows
  std::vector<std::string> labels;
  std::vector<SampleRef> refs;

  std::size_t size() const { return labels.size(); }
  const float* row(std::size_t i) const { return vectors.data() + i * dim; }

  std::string to_bytes() const;
  static EmbeddingIndex from_bytes(const std::string& bytes);
};

struct RankedHit {
  std::size_t index;
  double similarity;
};

/// Descending cosine order over the gallery; exact ties keep storage order.
std::vector<RankedHit> rank_query(const float* query_unit, const EmbeddingIndex& index);

/// CMC at k over per-query ranks of the first same-writer hit (percent).
double cmc(const std::vector<std::size_t>& first_hit_ranks, std::size_t k);

/// Average precision of one query given the sorted ranks (1-based) of all
/// same-writer gallery samples.
double average_precision(const std::vector<std::size_t>& relevant_ranks);

struct RetrievalMetrics {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::vector<double> per_query_ap;
  std::size_t skipped_queries = 0;  // writers absent from the gallery
};

/// Full CMC/mAP evaluation of explicit query vectors against a gallery.
RetrievalMetrics evaluate_queries(const std::vector<const float*>& queries,
                                  const std::vector<std::string>& query_labels,
                                  const EmbeddingIndex& gallery);

struct EvalReport {
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0, map = 0.0;
  double std_rank1 = 0.0, std_rank5 = 0.0, std_rank10 = 0.0, std_map = 0.0;
  int repeats = 1;

  std::string to_json() const;
  std::string to_table() const;  // "avg (+-std)" presentation
};

struct EmbedResult {
  EmbeddingIndex index;
  std::vector<std::size_t> skipped;  // corpus indices that failed preprocessing
};

/// Extracts the f_T embedding of every sample (eval mode, L2-normalized).
/// Samples that fail preprocessing are skipped with a warning.
EmbedResult embed_corpus(const DolphinModel<float>& model, const Corpus& corpus,
                         const PreprocessConfig& cfg, unsigned threads = 2);

/// Repeated open-set evaluation: per repeat, one seeded query per writer, the
/// rest as gallery; reports mean and (population) std across repeats.
EvalReport repeated_eval(const DolphinModel<float>& model, const Corpus& test_corpus,
                         const PreprocessConfig& cfg, int repeats, std::uint64_t seed,
                         unsigned threads = 2);

/// Same protocol on a precomputed embedding set (used by tests and baselines).
EvalReport repeated_eval_embedded(const EmbeddingIndex& all, int repeats,
                                  std::uint64_t seed);

/// Closed-set evaluation: gallery from one corpus, queries from another
/// (writer sets expected to coincide).
RetrievalMetrics closed_set_eval(const DolphinModel<float>& model,
                                 const Corpus& gallery_corpus, const Corpus& query_corpus,
                                 const PreprocessConfig& cfg, unsigned threads = 2);

}  // namespace inkline

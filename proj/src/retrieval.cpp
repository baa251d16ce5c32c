#include "inkline/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "inkline/common.hpp"

namespace inkline {

std::string SampleRef::to_string() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s:%016llx", inkline::to_string(source).c_str(),
                static_cast<unsigned long long>(hash));
  return buf;
}

std::string EmbeddingIndex::to_bytes() const {
  ByteWriter w;
  w.bytes("EIX1", 4);
  w.u32(static_cast<std::uint32_t>(size()));
  w.u32(static_cast<std::uint32_t>(dim));
  for (std::size_t i = 0; i < size(); ++i) {
    w.str(labels[i]);
    w.u8(static_cast<std::uint8_t>(refs[i].source));
    w.u64(refs[i].hash);
    w.u64(refs[i].index);
  }
  for (float v : vectors) w.f32(v);
  return w.buf;
}

EmbeddingIndex EmbeddingIndex::from_bytes(const std::string& bytes) {
  ByteReader r(bytes);
  r.need(4);
  if (bytes.compare(0, 4, "EIX1") != 0) throw std::runtime_error("bad index magic");
  r.pos = 4;
  EmbeddingIndex idx;
  const std::uint32_t n = r.u32();
  idx.dim = r.u32();
  idx.labels.resize(n);
  idx.refs.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    idx.labels[i] = r.str();
    idx.refs[i].source = static_cast<SourceTag>(r.u8());
    idx.refs[i].hash = r.u64();
    idx.refs[i].index = r.u64();
  }
  idx.vectors.resize(static_cast<std::size_t>(n) * idx.dim);
  for (auto& v : idx.vectors) v = r.f32();
  return idx;
}

std::vector<RankedHit> rank_query(const float* query_unit, const EmbeddingIndex& index) {
  if (index.size() == 0) throw std::runtime_error("rank: empty embedding index");
  std::vector<RankedHit> hits(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const float* row = index.row(i);
    double dot = 0.0;
    for (std::size_t d = 0; d < index.dim; ++d) dot += static_cast<double>(row[d]) * query_unit[d];
    hits[i] = {i, dot};
  }
  std::stable_sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) {
    return a.similarity > b.similarity;
  });
  return hits;
}

double cmc(const std::vector<std::size_t>& first_hit_ranks, std::size_t k) {
  if (first_hit_ranks.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r : first_hit_ranks)
    if (r <= k) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(first_hit_ranks.size());
}

double average_precision(const std::vector<std::size_t>& relevant_ranks) {
  if (relevant_ranks.empty()) return 0.0;
  double ap = 0.0;
  for (std::size_t m = 1; m <= relevant_ranks.size(); ++m)
    ap += static_cast<double>(m) / static_cast<double>(relevant_ranks[m - 1]);
  return ap / static_cast<double>(relevant_ranks.size());
}

RetrievalMetrics evaluate_queries(const std::vector<const float*>& queries,
                                  const std::vector<std::string>& query_labels,
                                  const EmbeddingIndex& gallery) {
  std::unordered_set<std::string> gallery_writers(gallery.labels.begin(),
                                                  gallery.labels.end());
  RetrievalMetrics out;
  std::vector<std::size_t> first_hits;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!gallery_writers.count(query_labels[q])) {
      std::fprintf(stderr, "warning: query writer %s absent from gallery; excluded\n",
                   query_labels[q].c_str());
      ++out.skipped_queries;
      continue;
    }
    const auto ranking = rank_query(queries[q], gallery);
    std::vector<std::size_t> relevant;
    for (std::size_t pos = 0; pos < ranking.size(); ++pos)
      if (gallery.labels[ranking[pos].index] == query_labels[q])
        relevant.push_back(pos + 1);
    first_hits.push_back(relevant.front());
    out.per_query_ap.push_back(average_precision(relevant));
  }
  if (first_hits.empty()) throw std::runtime_error("evaluation: no usable queries");
  out.rank1 = cmc(first_hits, 1);
  out.rank5 = cmc(first_hits, 5);
  out.rank10 = cmc(first_hits, 10);
  out.map = 100.0 * std::accumulate(out.per_query_ap.begin(), out.per_query_ap.end(), 0.0) /
            static_cast<double>(out.per_query_ap.size());
  return out;
}

std::string EvalReport::to_json() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"rank1\": %.4f, \"rank5\": %.4f, \"rank10\": %.4f, \"map\": %.4f, "
                "\"repeats\": %d, \"std\": {\"rank1\": %.4f, \"rank5\": %.4f, "
                "\"rank10\": %.4f, \"map\": %.4f}}",
                rank1, rank5, rank10, map, repeats, std_rank1, std_rank5, std_rank10,
                std_map);
  return buf;
}

std::string EvalReport::to_table() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "metric   avg (+-std)\n"
                "R1       %.2f (+-%.2f)\n"
                "R5       %.2f (+-%.2f)\n"
                "R10      %.2f (+-%.2f)\n"
                "mAP      %.2f (+-%.2f)\n"
                "repeats  %d\n",
                rank1, std_rank1, rank5, std_rank5, rank10, std_rank10, map, std_map,
                repeats);
  return buf;
}

EmbedResult embed_corpus(const DolphinModel<float>& model, const Corpus& corpus,
                         const PreprocessConfig& cfg, unsigned threads) {
  const auto dim = static_cast<std::size_t>(model.config().embedding_dim());
  const std::size_t n = corpus.samples.size();
  std::vector<std::vector<float>> rows(n);
  std::vector<std::string> errors(n);

  parallel_chunks(n, threads, [&](std::size_t b, std::size_t e, unsigned) {
    for (std::size_t i = b; i < e; ++i) {
      try {
        const FeatureMatrix f = preprocess_sample(corpus.samples[i], cfg);
        ad::Tape<float> tape;
        tape.grad_enabled = false;
        RunContext<float> ctx{tape};
        auto out = model.forward(ctx, f);
        auto emb = ad::l2_normalize(out.f_t);
        rows[i].assign(emb.val().v.begin(), emb.val().v.end());
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
    }
  });

  EmbedResult result;
  result.index.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].empty()) {
      std::fprintf(stderr, "warning: sample %zu skipped during embedding: %s\n", i,
                   errors[i].c_str());
      result.skipped.push_back(i);
      continue;
    }
    result.index.vectors.insert(result.index.vectors.end(), rows[i].begin(), rows[i].end());
    result.index.labels.push_back(corpus.samples[i].writer_id);
    result.index.refs.push_back({corpus.samples[i].source, corpus.samples[i].content_hash(),
                                 result.index.labels.size() - 1});
  }
  return result;
}

namespace {

EvalReport aggregate(const std::vector<RetrievalMetrics>& runs) {
  EvalReport rep;
  rep.repeats = static_cast<int>(runs.size());
  auto mean_std = [&](auto get, double& mean, double& sd) {
    double m = 0.0;
    for (const auto& r : runs) m += get(r);
    m /= static_cast<double>(runs.size());
    double v = 0.0;
    for (const auto& r : runs) {
      const double d = get(r) - m;
      v += d * d;
    }
    v /= static_cast<double>(runs.size());
    mean = m;
    sd = std::sqrt(v);
  };
  mean_std([](const RetrievalMetrics& r) { return r.rank1; }, rep.rank1, rep.std_rank1);
  mean_std([](const RetrievalMetrics& r) { return r.rank5; }, rep.rank5, rep.std_rank5);
  mean_std([](const RetrievalMetrics& r) { return r.rank10; }, rep.rank10, rep.std_rank10);
  mean_std([](const RetrievalMetrics& r) { return r.map; }, rep.map, rep.std_map);
  return rep;
}

}  // namespace

EvalReport repeated_eval_embedded(const EmbeddingIndex& all, int repeats,
                                  std::uint64_t seed) {
  if (repeats < 1) throw std::runtime_error("repeats must be >= 1");
  std::vector<std::string> writer_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_writer;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (!by_writer.count(all.labels[i])) writer_order.push_back(all.labels[i]);
    by_writer[all.labels[i]].push_back(i);
  }
  if (writer_order.size() < 2)
    throw std::runtime_error("repeated evaluation needs >= 2 writers");

  Rng rng(seed);
  std::vector<RetrievalMetrics> runs;
  for (int r = 0; r < repeats; ++r) {
    std::unordered_set<std::size_t> query_set;
    std::vector<std::size_t> queries;
    for (const auto& w : writer_order) {
      const auto& ids = by_writer[w];
      const std::size_t pick = ids[rng.uniform_index(ids.size())];
      queries.push_back(pick);
      query_set.insert(pick);
    }
    EmbeddingIndex gallery;
    gallery.dim = all.dim;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (query_set.count(i)) continue;
      gallery.vectors.insert(gallery.vectors.end(), all.row(i), all.row(i) + all.dim);
      gallery.labels.push_back(all.labels[i]);
      gallery.refs.push_back(all.refs[i]);
    }
    std::vector<const float*> qvecs;
    std::vector<std::string> qlabels;
    for (std::size_t qi : queries) {
      qvecs.push_back(all.row(qi));
      qlabels.push_back(all.labels[qi]);
    }
    runs.push_back(evaluate_queries(qvecs, qlabels, gallery));
  }
  return aggregate(runs);
}

EvalReport repeated_eval(const DolphinModel<float>& model, const Corpus& test_corpus,
                         const PreprocessConfig& cfg, int repeats, std::uint64_t seed,
                         unsigned threads) {
  const EmbedResult embedded = embed_corpus(model, test_corpus, cfg, threads);
  return repeated_eval_embedded(embedded.index, repeats, seed);
}

RetrievalMetrics closed_set_eval(const DolphinModel<float>& model,
                                 const Corpus& gallery_corpus, const Corpus& query_corpus,
                                 const PreprocessConfig& cfg, unsigned threads) {
  const EmbedResult gallery = embed_corpus(model, gallery_corpus, cfg, threads);
  const EmbedResult queries = embed_corpus(model, query_corpus, cfg, threads);
  std::vector<const float*> qvecs;
  for (std::size_t i = 0; i < queries.index.size(); ++i)
    qvecs.push_back(queries.index.row(i));
  return evaluate_queries(qvecs, queries.index.labels, gallery.index);
}

}  // namespace inkline

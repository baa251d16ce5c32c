#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <numeric>
#include <set>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/ink.hpp"
#include "inkline/synth.hpp"

using namespace inkline;

namespace {

InkSample make_sample(const std::string& writer,
                      const std::vector<std::vector<std::array<double, 4>>>& strokes) {
  InkSample s;
  s.writer_id = writer;
  for (const auto& stroke : strokes) {
    IndexRange b{s.points.size(), s.points.size() + stroke.size()};
    for (const auto& p : stroke) s.points.push_back({p[0], p[1], p[2], p[3]});
    s.stroke_bounds.push_back(b);
  }
  return s;
}

/// A stroke is a short burst of points; gaps[i] separates stroke i and i+1.
InkSample line_with_gaps(const std::vector<double>& gaps, std::size_t pts_per_stroke = 2) {
  InkSample s;
  s.writer_id = "w";
  double t = 0.0;
  const double dt = 0.0078125;  // dyadic step keeps timestamp sums exact
  const std::size_t n_strokes = gaps.size() + 1;
  for (std::size_t k = 0; k < n_strokes; ++k) {
    IndexRange b{s.points.size(), s.points.size() + pts_per_stroke};
    for (std::size_t j = 0; j < pts_per_stroke; ++j) {
      s.points.push_back({static_cast<double>(k) + 0.1 * static_cast<double>(j), 0.5, 0.7, t});
      t += dt;
    }
    s.stroke_bounds.push_back(b);
    if (k < gaps.size()) t += gaps[k] - dt;
  }
  return s;
}

std::vector<double> reconstruct_gaps(const InkSample& line) {
  std::vector<double> gaps;
  for (std::size_t i = 0; i + 1 < line.stroke_count(); ++i)
    gaps.push_back(line.points[line.stroke_bounds[i + 1].begin].t -
                   line.points[line.stroke_bounds[i].end - 1].t);
  return gaps;
}

/// Independent oracle: pick char_count-1 cut gaps by exhaustive search,
/// maximizing the selected gap sum with lexicographically earliest cuts on
/// ties; returns the chosen cut indices.
std::vector<std::size_t> brute_force_cuts(const std::vector<double>& gaps,
                                          std::size_t char_count) {
  const std::size_t k = char_count - 1;
  std::vector<std::size_t> best;
  double best_sum = -1.0;
  std::vector<std::size_t> idx(gaps.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<bool> pick(gaps.size(), false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
  std::sort(pick.begin(), pick.end(), std::greater<bool>());
  do {
    std::vector<std::size_t> cuts;
    double sum = 0.0;
    for (std::size_t i = 0; i < gaps.size(); ++i)
      if (pick[i]) {
        cuts.push_back(i);
        sum += gaps[i];
      }
    if (sum > best_sum || (sum == best_sum && !best.empty() && cuts < best)) {
      best_sum = sum;
      best = cuts;
    }
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return best;
}

std::vector<std::size_t> observed_cuts(const InkSample& line,
                                       const std::vector<InkSample>& chars) {
  // Reconstruct cut gap indices from the stroke counts of each character.
  std::vector<std::size_t> cuts;
  std::size_t stroke_pos = 0;
  for (std::size_t c = 0; c + 1 < chars.size(); ++c) {
    stroke_pos += chars[c].stroke_count();
    cuts.push_back(stroke_pos - 1);
  }
  (void)line;
  return cuts;
}

}  // namespace

TEST_CASE("jsonl round trip of a single 3-point sample") {
  InkSample s = make_sample("alice", {{{0.0, 0.0, 0.5, 0.0}, {1.0, 0.5, 0.6, 0.01},
                                       {2.0, 1.0, 0.7, 0.02}}});
  Corpus c;
  c.samples.push_back(s);
  Corpus back = corpus_from_jsonl(corpus_to_jsonl(c));
  REQUIRE(back.samples.size() == 1);
  CHECK(back.samples[0].points.size() == 3);
  CHECK(back.samples[0].writer_id == "alice");
  CHECK(back.samples[0].points[2].x == doctest::Approx(2.0));
  CHECK(back.samples[0].points[1].t == doctest::Approx(0.01));
}

TEST_CASE("missing pressure defaults to 1.0") {
  const std::string line = R"({"writer":"w","source":"OLHWDB2","strokes":[[[0,0],[1,1],[2,0]]]})";
  Corpus c = corpus_from_jsonl(line + "\n");
  for (const auto& p : c.samples[0].points) CHECK(p.p == 1.0);
  CHECK(c.samples[0].source == SourceTag::kOlhwdb2);
  CHECK_FALSE(c.samples[0].points[0].has_t());
}

TEST_CASE("truncated jsonl line reports the line number") {
  const std::string good = R"({"writer":"w","strokes":[[[0,0,1],[1,1,1]]]})";
  const std::string text = good + "\n" + good.substr(0, 20) + "\n";
  CHECK_THROWS_WITH_AS(corpus_from_jsonl(text), doctest::Contains("line 2"),
                       std::runtime_error);
}

TEST_CASE("empty corpus file is an error") {
  CHECK_THROWS(corpus_from_jsonl("\n\n"));
}

TEST_CASE("binary round trip is exact at f32 precision") {
  Corpus c = synth_generate({3, 2, 2, 3, 1.0, 1.0, 11});
  const std::string bytes = corpus_to_binary(c);
  Corpus back = corpus_from_binary(bytes);
  REQUIRE(back.samples.size() == c.samples.size());
  // A second round trip must be bit-identical.
  CHECK(corpus_to_binary(back) == bytes);
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    CHECK(back.samples[i].writer_id == c.samples[i].writer_id);
    REQUIRE(back.samples[i].points.size() == c.samples[i].points.size());
    CHECK(back.samples[i].stroke_bounds == c.samples[i].stroke_bounds);
  }
}

TEST_CASE("segment_line: one stroke, one character") {
  InkSample line = line_with_gaps({});
  auto chars = segment_line(line, 1);
  REQUIRE(chars.size() == 1);
  CHECK(chars[0].points.size() == line.points.size());
  CHECK(chars[0].stroke_bounds == line.stroke_bounds);
}

TEST_CASE("segment_line: spec gap example splits after strokes 2 and 4") {
  InkSample line = line_with_gaps({0.01, 0.50, 0.02, 0.45, 0.03});
  auto chars = segment_line(line, 3);
  REQUIRE(chars.size() == 3);
  CHECK(chars[0].stroke_count() == 2);
  CHECK(chars[1].stroke_count() == 2);
  CHECK(chars[2].stroke_count() == 2);
  CHECK(observed_cuts(line, chars) == brute_force_cuts(reconstruct_gaps(line), 3));
}

TEST_CASE("segment_line: ties resolve to the earlier gap (exhaustive <= 6 strokes)") {
  // All arrangements of gap multisets with ties, against the brute-force oracle.
  const std::vector<std::vector<double>> bases = {
      {0.5, 0.5, 0.125, 0.125, 0.25},
      {0.25, 0.25, 0.25, 0.25, 0.25},
      {0.5, 0.125, 0.5, 0.125, 0.5}};
  for (auto gaps : bases) {
    std::sort(gaps.begin(), gaps.end());
    do {
      for (std::size_t chars = 2; chars <= gaps.size(); ++chars) {
        InkSample line = line_with_gaps(gaps);
        auto segmented = segment_line(line, chars);
        REQUIRE(segmented.size() == chars);
        CHECK(observed_cuts(line, segmented) == brute_force_cuts(reconstruct_gaps(line), chars));
      }
    } while (std::next_permutation(gaps.begin(), gaps.end()));
  }
}

TEST_CASE("segment_line errors") {
  InkSample no_ts = make_sample("w", {{{0, 0, 1, std::numeric_limits<double>::quiet_NaN()}}});
  CHECK_THROWS_WITH_AS(segment_line(no_ts, 1), doctest::Contains("timestamps"),
                       std::runtime_error);
  InkSample line = line_with_gaps({0.5});
  CHECK_THROWS_WITH_AS(segment_line(line, 5), doctest::Contains("infeasible"),
                       std::runtime_error);
}

TEST_CASE("segment_line property: lossless partition on random lines") {
  Rng rng(2024);
  for (int iter = 0; iter < 1000; ++iter) {
    const int n_strokes = rng.uniform_int(1, 12);
    std::vector<double> gaps;
    for (int i = 0; i + 1 < n_strokes; ++i) gaps.push_back(rng.uniform(0.01, 0.8));
    InkSample line = line_with_gaps(gaps, static_cast<std::size_t>(rng.uniform_int(1, 4)));
    const auto char_count = static_cast<std::size_t>(rng.uniform_int(1, n_strokes));
    auto chars = segment_line(line, char_count);
    REQUIRE(chars.size() == char_count);
    std::vector<PenPoint> flat;
    for (const auto& c : chars) flat.insert(flat.end(), c.points.begin(), c.points.end());
    REQUIRE(flat.size() == line.points.size());
    for (std::size_t i = 0; i < flat.size(); ++i) {
      CHECK(flat[i].x == line.points[i].x);
      CHECK(flat[i].t == line.points[i].t);
    }
  }
}

TEST_CASE("assemble_phrases: two characters force one 2-char phrase") {
  InkSample line = line_with_gaps({0.5});
  auto chars = segment_line(line, 2);
  for (std::uint64_t seed : {0ULL, 7ULL, 123456ULL}) {
    auto phrases = assemble_phrases(chars, seed);
    REQUIRE(phrases.size() == 1);
    CHECK(phrases[0].char_bounds->size() == 2);
    CHECK(phrases[0].points.size() == line.points.size());
  }
}

TEST_CASE("assemble_phrases: deterministic partition with sizes in [2,5]") {
  InkSample line = line_with_gaps(std::vector<double>(9, 0.4));
  auto chars = segment_line(line, 10);
  auto a = assemble_phrases(chars, 99);
  auto b = assemble_phrases(chars, 99);
  REQUIRE(a.size() == b.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t len = a[i].char_bounds->size();
    CHECK(len >= 2);
    CHECK(len <= 5);
    CHECK(a[i].points.size() == b[i].points.size());
    CHECK(a[i].content_hash() == b[i].content_hash());
    used += len;
  }
  CHECK(used <= 10);
}

TEST_CASE("assemble_phrases: a single character yields nothing") {
  InkSample line = line_with_gaps({});
  auto chars = segment_line(line, 1);
  CHECK(assemble_phrases(chars, 5).empty());
}

TEST_CASE("assemble_phrases property: never shorter than 2 or longer than 5") {
  Rng rng(77);
  for (int iter = 0; iter < 200; ++iter) {
    const int n = rng.uniform_int(0, 23);
    std::vector<InkSample> chars;
    for (int i = 0; i < n; ++i)
      chars.push_back(make_sample("w", {{{double(i), 0, 1, 0.0}, {double(i), 1, 1, 0.01}}}));
    auto phrases = assemble_phrases(chars, rng.next_u64());
    std::size_t used = 0;
    for (const auto& p : phrases) {
      CHECK(p.char_bounds->size() >= 2);
      CHECK(p.char_bounds->size() <= 5);
      used += p.char_bounds->size();
    }
    CHECK(used <= static_cast<std::size_t>(n));
    CHECK(static_cast<std::size_t>(n) - used <= 1);
  }
}

TEST_CASE("filter_writers boundary at the minimum") {
  Corpus c;
  for (int i = 0; i < 19; ++i) c.samples.push_back(make_sample("a", {{{0, 0, 1, 0}}}));
  for (int i = 0; i < 20; ++i) c.samples.push_back(make_sample("b", {{{0, 0, 1, 0}}}));
  Corpus kept = filter_writers(c, 20);
  const auto writers = kept.writers();
  REQUIRE(writers.size() == 1);
  CHECK(writers[0] == "b");
  CHECK(filter_writers(c, 0).samples.size() == c.samples.size());
}

TEST_CASE("open_set_split counting oracle: 10 writers x 5 samples") {
  Corpus c;
  for (int w = 0; w < 10; ++w)
    for (int s = 0; s < 5; ++s)
      c.samples.push_back(make_sample("w" + std::to_string(w),
                                      {{{double(w), double(s), 1, 0}}}));
  RetrievalSplit split = open_set_split(c, 0.8, 3);
  CHECK(split.train.writers().size() == 8);
  CHECK(split.train.samples.size() == 40);
  CHECK(split.query.samples.size() == 2);
  CHECK(split.gallery.samples.size() == 8);

  // Writer disjointness and sample-identity disjointness.
  std::set<std::string> train_w;
  for (const auto& s : split.train.samples) train_w.insert(s.writer_id);
  for (const auto& s : split.query.samples) CHECK(train_w.count(s.writer_id) == 0);
  std::set<std::pair<int, std::uint64_t>> query_ids;
  for (const auto& s : split.query.samples)
    query_ids.insert({static_cast<int>(s.source), s.content_hash()});
  for (const auto& s : split.gallery.samples)
    CHECK(query_ids.count({static_cast<int>(s.source), s.content_hash()}) == 0);

  RetrievalSplit again = open_set_split(c, 0.8, 3);
  CHECK(again.train.samples.size() == split.train.samples.size());
  for (std::size_t i = 0; i < split.query.samples.size(); ++i)
    CHECK(again.query.samples[i].content_hash() == split.query.samples[i].content_hash());

  CHECK_THROWS(open_set_split(c, 0.05, 1));
}

TEST_CASE("closed_set_split per-writer floor arithmetic") {
  Corpus c;
  for (int w = 0; w < 4; ++w)
    for (int s = 0; s < 5; ++s)
      c.samples.push_back(make_sample("w" + std::to_string(w),
                                      {{{double(w), double(s), 1, 0}}}));
  auto [train, test] = closed_set_split(c, 0.8, 9);
  CHECK(train.samples.size() == 16);  // floor(0.8 * 5) = 4 per writer
  CHECK(test.samples.size() == 4);
  CHECK(train.writers().size() == 4);
  CHECK(test.writers().size() == 4);

  auto [train2, test2] = closed_set_split(c, 0.8, 9);
  CHECK(train2.samples.size() == train.samples.size());
  for (std::size_t i = 0; i < train.samples.size(); ++i)
    CHECK(train2.samples[i].content_hash() == train.samples[i].content_hash());

  c.samples.push_back(make_sample("loner", {{{9, 9, 1, 0}}}));
  CHECK_THROWS_WITH_AS(closed_set_split(c, 0.8, 9), doctest::Contains("loner"),
                       std::runtime_error);
}

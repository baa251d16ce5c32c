#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "inkline/common.hpp"
#include "inkline/gradcheck.hpp"
#include "inkline/ink.hpp"
#include "inkline/preprocess.hpp"
#include "inkline/retrieval.hpp"
#include "inkline/synth.hpp"
#include "inkline/train.hpp"

namespace fs = std::filesystem;
using namespace inkline;

namespace {

CorpusFormat parse_format(const std::string& s) {
  if (s == "jsonl") return CorpusFormat::kJsonl;
  if (s == "binary") return CorpusFormat::kBinary;
  throw std::runtime_error("unknown corpus format: " + s);
}

CorpusFormat guess_format(const fs::path& path, const std::string& explicit_fmt) {
  if (!explicit_fmt.empty()) return parse_format(explicit_fmt);
  return path.extension() == ".bin" ? CorpusFormat::kBinary : CorpusFormat::kJsonl;
}

std::unique_ptr<DolphinModel<float>> load_model_file(const fs::path& path) {
  return load_model(read_file(path));
}

int cmd_build_dataset(int writers, int samples, std::uint64_t seed, int chars_min,
                      int chars_max, bool via_lines, std::size_t min_samples,
                      const std::string& out, const std::string& format,
                      double split_frac, const std::string& train_out,
                      const std::string& test_out) {
  Corpus corpus;
  if (via_lines) {
    // Paper-style construction: lines -> characters -> phrases.
    Corpus lines = synth_lines(writers, samples, 6, 12, seed);
    Rng phrase_rng(Rng(seed).fork(0x9e37ULL).next_u64());
    for (const auto& line : lines.samples) {
      const auto chars = segment_line(line, line.char_bounds->size());
      for (auto& phrase : assemble_phrases(chars, phrase_rng.next_u64()))
        corpus.samples.push_back(std::move(phrase));
    }
  } else {
    SynthSpec spec;
    spec.writers = writers;
    spec.samples_per_writer = samples;
    spec.chars_min = chars_min;
    spec.chars_max = chars_max;
    spec.seed = seed;
    corpus = synth_generate(spec);
  }
  if (min_samples > 0) corpus = filter_writers(corpus, min_samples);
  if (corpus.empty()) throw std::runtime_error("generated corpus is empty after filtering");

  if (!train_out.empty() || !test_out.empty()) {
    if (train_out.empty() || test_out.empty())
      throw std::runtime_error("--train-out and --test-out must be given together");
    RetrievalSplit split = open_set_split(corpus, split_frac, seed);
    save_corpus(split.train, train_out, guess_format(train_out, format));
    Corpus test = split.query;
    for (const auto& s : split.gallery.samples) test.samples.push_back(s);
    save_corpus(test, test_out, guess_format(test_out, format));
    std::printf("wrote %zu train samples to %s, %zu test samples to %s\n",
                split.train.samples.size(), train_out.c_str(), test.samples.size(),
                test_out.c_str());
  }
  if (!out.empty()) {
    save_corpus(corpus, out, guess_format(out, format));
    std::printf("wrote %zu samples (%zu writers) to %s\n", corpus.samples.size(),
                corpus.writers().size(), out.c_str());
  }
  return 0;
}

int cmd_preprocess(const std::string& data, const std::string& format,
                   const std::string& out_dir, bool csv, double target_hz,
                   std::optional<double> pressure_override) {
  Corpus corpus = load_corpus(data, guess_format(data, format));
  PreprocessConfig cfg;
  cfg.target_hz = target_hz;
  cfg.pressure_override = pressure_override;
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const FeatureMatrix m = preprocess_sample(corpus.samples[i], cfg);
    char name[64];
    std::snprintf(name, sizeof name, "sample_%05zu.ftm", i);
    save_feature_matrix(m, fs::path(out_dir) / name);
    if (csv) {
      std::snprintf(name, sizeof name, "sample_%05zu.csv", i);
      atomic_write_file(fs::path(out_dir) / name, feature_matrix_to_csv(m));
    }
  }
  std::printf("preprocessed %zu samples into %s\n", corpus.samples.size(), out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& format,
              const std::string& run_dir, const std::string& config_file,
              std::optional<int> epochs, std::optional<std::uint64_t> seed,
              std::optional<unsigned> threads) {
  RunConfig cfg;
  if (!config_file.empty()) cfg = RunConfig::from_text(read_file(config_file));
  cfg.apply_env_overrides();
  if (epochs) cfg.epochs = *epochs;
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = *threads;

  Corpus corpus = load_corpus(data, guess_format(data, format));
  TrainResult result = train_model(corpus, cfg, fs::path(run_dir));
  std::printf("trained %d epochs, %zu steps, final epoch loss %.4f; artifacts in %s\n",
              cfg.epochs, result.steps.size(),
              result.epoch_mean_loss.empty() ? 0.0 : result.epoch_mean_loss.back(),
              run_dir.c_str());
  return 0;
}

int cmd_embed(const std::string& model_path, const std::string& data,
              const std::string& format, const std::string& out_dir, unsigned threads) {
  auto model = load_model_file(model_path);
  Corpus corpus = load_corpus(data, guess_format(data, format));
  EmbedResult result = embed_corpus(*model, corpus, PreprocessConfig{}, threads);
  fs::create_directories(out_dir);
  atomic_write_file(fs::path(out_dir) / "index.eix", result.index.to_bytes());
  atomic_write_file(fs::path(out_dir) / "model.dwt1", read_file(model_path));
  std::printf("embedded %zu samples (%zu skipped) into %s\n", result.index.size(),
              result.skipped.size(), out_dir.c_str());
  return 0;
}

int cmd_retrieve(const std::string& query, const std::string& format,
                 const std::string& index_dir, int topk, const std::string& model_path) {
  EmbeddingIndex index = EmbeddingIndex::from_bytes(read_file(fs::path(index_dir) / "index.eix"));
  const fs::path model_file =
      model_path.empty() ? fs::path(index_dir) / "model.dwt1" : fs::path(model_path);
  auto model = load_model_file(model_file);
  Corpus corpus = load_corpus(query, guess_format(query, format));
  EmbedResult q = embed_corpus(*model, corpus, PreprocessConfig{}, 1);
  if (q.index.size() == 0) throw std::runtime_error("query could not be embedded");
  for (std::size_t qi = 0; qi < q.index.size(); ++qi) {
    const auto hits = rank_query(q.index.row(qi), index);
    for (int k = 0; k < topk && k < static_cast<int>(hits.size()); ++k) {
      const auto& h = hits[static_cast<std::size_t>(k)];
      std::printf("%2d  %s  writer=%s  similarity=%.4f\n", k + 1,
                  index.refs[h.index].to_string().c_str(), index.labels[h.index].c_str(),
                  h.similarity);
    }
  }
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& data,
                 const std::string& format, int repeats, std::uint64_t seed,
                 const std::string& out, const std::string& gallery_data,
                 unsigned threads) {
  auto model = load_model_file(model_path);
  Corpus corpus = load_corpus(data, guess_format(data, format));
  std::string json;
  if (!gallery_data.empty()) {
    Corpus gallery = load_corpus(gallery_data, guess_format(gallery_data, format));
    RetrievalMetrics m = closed_set_eval(*model, gallery, corpus, PreprocessConfig{}, threads);
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "{\"rank1\": %.4f, \"rank5\": %.4f, \"rank10\": %.4f, \"map\": %.4f, "
                  "\"repeats\": 1, \"std\": {\"rank1\": 0.0, \"rank5\": 0.0, "
                  "\"rank10\": 0.0, \"map\": 0.0}}",
                  m.rank1, m.rank5, m.rank10, m.map);
    json = buf;
    std::printf("closed-set  R1 %.2f  R5 %.2f  R10 %.2f  mAP %.2f\n", m.rank1, m.rank5,
                m.rank10, m.map);
  } else {
    EvalReport rep = repeated_eval(*model, corpus, PreprocessConfig{}, repeats, seed, threads);
    json = rep.to_json();
    std::fputs(rep.to_table().c_str(), stdout);
  }
  std::printf("%s\n", json.c_str());
  if (!out.empty()) atomic_write_file(out, json + "\n");
  return 0;
}

int cmd_gradcheck() {
  const GradCheckReport report = run_gradient_checks();
  for (const auto& r : report.results)
    std::printf("%-30s rel_err %.3e  tol %.0e  %s\n", r.name.c_str(), r.max_rel_err,
                r.tolerance, r.pass ? "PASS" : "FAIL");
  std::printf("gradcheck: %s\n", report.all_pass() ? "PASS" : "FAIL");
  return report.all_pass() ? 0 : 1;
}

int cmd_paramcount(int writers) {
  ModelConfig cfg;
  cfg.num_writers = writers;
  DolphinModel<float> model(cfg);
  std::map<std::string, std::int64_t> by_module;
  for (const auto& [name, count] : model.param_ledger()) {
    std::printf("%-44s %8lld\n", name.c_str(), static_cast<long long>(count));
    by_module[name.substr(0, name.find('.'))] += count;
  }
  std::printf("\nper module:\n");
  for (const auto& [mod, count] : by_module)
    std::printf("  %-12s %8lld\n", mod.c_str(), static_cast<long long>(count));
  std::printf("\ntotal (excluding classifier): %lld\n",
              static_cast<long long>(model.param_total_excluding_classifier()));
  std::printf("classifier (%d writers):       %lld\n", writers,
              static_cast<long long>(model.classifier_param_count()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"inkline: online writer retrieval over pen-trajectory time series"};
  app.require_subcommand(1);

  // build-dataset
  auto* build = app.add_subcommand("build-dataset", "generate a synthetic ink corpus");
  int writers = 8, samples = 20, chars_min = 2, chars_max = 5;
  std::uint64_t bd_seed = 0;
  bool via_lines = false;
  std::size_t min_samples = 0;
  std::string bd_out, bd_format, bd_train_out, bd_test_out;
  double split_frac = 0.8;
  build->add_option("--writers", writers, "number of writers");
  build->add_option("--samples", samples, "samples (or lines with --via-lines) per writer");
  build->add_option("--seed", bd_seed, "generator seed");
  build->add_option("--chars-min", chars_min, "minimum characters per phrase");
  build->add_option("--chars-max", chars_max, "maximum characters per phrase");
  build->add_flag("--via-lines", via_lines,
                  "generate lines, then segment and assemble phrases");
  build->add_option("--min-samples", min_samples, "drop writers with fewer samples");
  build->add_option("--out", bd_out, "output corpus file");
  build->add_option("--format", bd_format, "jsonl or binary (default from extension)");
  build->add_option("--split-frac", split_frac, "train writer fraction for --train-out");
  build->add_option("--train-out", bd_train_out, "write an open-set train corpus");
  build->add_option("--test-out", bd_test_out, "write the matching test corpus");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "export FTM1 feature matrices");
  std::string pp_data, pp_format, pp_out;
  bool pp_csv = false;
  double pp_hz = 120.0;
  double pp_pressure = -1.0;
  prep->add_option("--data", pp_data, "corpus file")->required();
  prep->add_option("--format", pp_format, "jsonl or binary");
  prep->add_option("--out", pp_out, "output directory")->required();
  prep->add_flag("--csv", pp_csv, "also write CSV dumps");
  prep->add_option("--target-hz", pp_hz, "resampling frequency");
  prep->add_option("--pressure-override", pp_pressure, "constant pressure override");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_format, tr_run_dir, tr_config;
  int tr_epochs = -1;
  std::int64_t tr_seed = -1;
  int tr_threads = -1;
  train->add_option("--data", tr_data, "training corpus")->required();
  train->add_option("--format", tr_format, "jsonl or binary");
  train->add_option("--run-dir", tr_run_dir, "artifact directory")->required();
  train->add_option("--config", tr_config, "TOML-style run config file");
  train->add_option("--epochs", tr_epochs, "override epochs");
  train->add_option("--seed", tr_seed, "override seed");
  train->add_option("--threads", tr_threads, "worker threads");

  // embed
  auto* embed = app.add_subcommand("embed", "build an embedding index");
  std::string em_model, em_data, em_format, em_out;
  int em_threads = 2;
  embed->add_option("--model", em_model, "checkpoint file")->required();
  embed->add_option("--data", em_data, "corpus file")->required();
  embed->add_option("--format", em_format, "jsonl or binary");
  embed->add_option("--out", em_out, "index directory")->required();
  embed->add_option("--threads", em_threads, "worker threads");

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "rank a gallery for a query sample");
  std::string rt_query, rt_format, rt_index, rt_model;
  int rt_topk = 10;
  retrieve->add_option("--query", rt_query, "query corpus file")->required();
  retrieve->add_option("--format", rt_format, "jsonl or binary");
  retrieve->add_option("--index", rt_index, "index directory from embed")->required();
  retrieve->add_option("--topk", rt_topk, "results to print");
  retrieve->add_option("--model", rt_model, "checkpoint (default: model.dwt1 in index)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "CMC/mAP evaluation");
  std::string ev_model, ev_data, ev_format, ev_out, ev_gallery;
  int ev_repeats = 50;
  std::uint64_t ev_seed = 0;
  int ev_threads = 2;
  eval->add_option("--model", ev_model, "checkpoint file")->required();
  eval->add_option("--data", ev_data, "test corpus (queries in closed-set mode)")->required();
  eval->add_option("--format", ev_format, "jsonl or binary");
  eval->add_option("--repeats", ev_repeats, "query/gallery resampling repeats");
  eval->add_option("--seed", ev_seed, "resampling seed");
  eval->add_option("--out", ev_out, "write the report JSON here");
  eval->add_option("--gallery", ev_gallery, "gallery corpus (closed-set mode)");
  eval->add_option("--threads", ev_threads, "worker threads");

  // gradcheck / paramcount
  app.add_subcommand("gradcheck", "run the finite-difference suite");
  auto* pc = app.add_subcommand("paramcount", "print the per-layer parameter ledger");
  int pc_writers = 1384;
  pc->add_option("--writers", pc_writers, "classifier writer count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed())
      return cmd_build_dataset(writers, samples, bd_seed, chars_min, chars_max, via_lines,
                               min_samples, bd_out, bd_format, split_frac, bd_train_out,
                               bd_test_out);
    if (prep->parsed())
      return cmd_preprocess(pp_data, pp_format, pp_out, pp_csv, pp_hz,
                            pp_pressure >= 0.0 ? std::optional<double>(pp_pressure)
                                               : std::nullopt);
    if (train->parsed())
      return cmd_train(tr_data, tr_format, tr_run_dir, tr_config,
                       tr_epochs >= 0 ? std::optional<int>(tr_epochs) : std::nullopt,
                       tr_seed >= 0 ? std::optional<std::uint64_t>(
                                          static_cast<std::uint64_t>(tr_seed))
                                    : std::nullopt,
                       tr_threads >= 0 ? std::optional<unsigned>(
                                             static_cast<unsigned>(tr_threads))
                                       : std::nullopt);
    if (embed->parsed())
      return cmd_embed(em_model, em_data, em_format, em_out,
                       static_cast<unsigned>(em_threads));
    if (retrieve->parsed())
      return cmd_retrieve(rt_query, rt_format, rt_index, rt_topk, rt_model);
    if (eval->parsed())
      return cmd_evaluate(ev_model, ev_data, ev_format, ev_repeats, ev_seed, ev_out,
                          ev_gallery, static_cast<unsigned>(ev_threads));
    if (app.get_subcommand("gradcheck")->parsed()) return cmd_gradcheck();
    if (pc->parsed()) return cmd_paramcount(pc_writers);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

#include "inkline/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <unordered_map>

#include "inkline/common.hpp"
#include "inkline/optim.hpp"

namespace inkline {

std::vector<std::string> writer_label_order(const Corpus& corpus) {
  std::vector<std::string> writers = corpus.writers();
  std::sort(writers.begin(), writers.end());
  return writers;
}

std::string checkpoint_with_oim(DolphinModel<float>& model, const OimState<float>& oim) {
  auto& store = model.params();
  ad::Node<float>* node = store.find("oim.lookup");
  if (!node) node = store.create_buffer("oim.lookup", oim.lookup);
  node->val = oim.lookup;
  return ad::checkpoint_to_bytes(store, model.config().to_text());
}

namespace {

struct BatchUnit {
  int label;
  std::vector<std::size_t> samples;  // K corpus indices
};

std::vector<std::vector<BatchUnit>> make_epoch_batches(
    const std::vector<std::vector<std::size_t>>& by_label, int P, int K, Rng& rng) {
  std::vector<BatchUnit> units;
  for (std::size_t label = 0; label < by_label.size(); ++label) {
    std::vector<std::size_t> ids = by_label[label];
    rng.shuffle(ids);
    for (std::size_t base = 0; base + static_cast<std::size_t>(K) <= ids.size();
         base += static_cast<std::size_t>(K)) {
      BatchUnit u;
      u.label = static_cast<int>(label);
      u.samples.assign(ids.begin() + static_cast<std::ptrdiff_t>(base),
                       ids.begin() + static_cast<std::ptrdiff_t>(base + K));
      units.push_back(std::move(u));
    }
  }
  rng.shuffle(units);
  const std::size_t per_batch =
      std::min<std::size_t>(static_cast<std::size_t>(P), by_label.size());
  std::vector<std::vector<BatchUnit>> batches;
  for (std::size_t base = 0; base < units.size(); base += per_batch) {
    const std::size_t end = std::min(units.size(), base + per_batch);
    if (end - base < 2) break;  // a single trailing unit cannot form pairs
    batches.emplace_back(units.begin() + static_cast<std::ptrdiff_t>(base),
                         units.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace

TrainResult train_model(const Corpus& train_corpus, const RunConfig& cfg,
                        const std::optional<std::filesystem::path>& run_dir) {
  if (train_corpus.empty()) throw std::runtime_error("training corpus is empty");
  TrainResult result;
  result.writer_labels = writer_label_order(train_corpus);
  const int n_writers = static_cast<int>(result.writer_labels.size());
  if (n_writers < 2) throw std::runtime_error("training needs >= 2 writers");

  std::unordered_map<std::string, int> label_of;
  for (int i = 0; i < n_writers; ++i) label_of[result.writer_labels[i]] = i;
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(n_writers));
  for (std::size_t i = 0; i < train_corpus.samples.size(); ++i)
    by_label[static_cast<std::size_t>(label_of[train_corpus.samples[i].writer_id])]
        .push_back(i);

  ModelConfig mcfg = cfg.model;
  mcfg.num_writers = n_writers;
  mcfg.dropout = cfg.dropout;
  Rng root(cfg.seed);
  result.model = std::make_unique<DolphinModel<float>>(mcfg, root.fork(1).next_u64());
  DolphinModel<float>& model = *result.model;

  // Preprocess every sample once up front.
  const PreprocessConfig pcfg = cfg.preprocess_config();
  std::vector<FeatureMatrix> features(train_corpus.samples.size());
  {
    std::vector<std::string> errors(train_corpus.samples.size());
    parallel_chunks(train_corpus.samples.size(), cfg.threads,
                    [&](std::size_t b, std::size_t e, unsigned) {
                      for (std::size_t i = b; i < e; ++i) {
                        try {
                          features[i] = preprocess_sample(train_corpus.samples[i], pcfg);
                        } catch (const std::exception& ex) {
                          errors[i] = ex.what();
                        }
                      }
                    });
    for (std::size_t i = 0; i < errors.size(); ++i)
      if (!errors[i].empty())
        throw std::runtime_error("preprocessing failed for sample " + std::to_string(i) +
                                 ": " + errors[i]);
  }

  result.oim_state =
      OimState<float>::random_init(n_writers, mcfg.embedding_dim(), root.fork(2).next_u64());
  result.oim_state.momentum = cfg.oim_momentum;
  const CircleParams circle_p{cfg.circle_m, cfg.circle_gamma};
  const IdParams id_p{cfg.smoothing_epsilon};

  ad::AdamW<float> opt;
  opt.lr = cfg.lr;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;

  Rng batch_rng = root.fork(3);
  Rng dropout_root = root.fork(4);

  std::ostringstream csv;
  csv << "epoch,step,lr,total,circle,oim,id\n";
  std::string last_good_checkpoint;

  auto write_artifacts = [&](const std::string& ckpt) {
    if (!run_dir) return;
    std::filesystem::create_directories(*run_dir);
    atomic_write_file(*run_dir / "checkpoint.dwt1", ckpt);
    atomic_write_file(*run_dir / "loss_curve.csv", csv.str());
    std::ostringstream manifest;
    manifest << "{\n  \"seed\": " << cfg.seed << ",\n  \"epochs\": " << cfg.epochs
             << ",\n  \"writers\": " << n_writers
             << ",\n  \"samples\": " << train_corpus.samples.size()
             << ",\n  \"checkpoint\": \"checkpoint.dwt1\",\n  \"loss_curve\": "
                "\"loss_curve.csv\"\n}\n";
    atomic_write_file(*run_dir / "manifest.json", manifest.str());
  };

  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_epoch_batches(by_label, cfg.batch_p, cfg.batch_k, batch_rng);
    double epoch_loss_sum = 0.0;
    int epoch_steps = 0;

    for (const auto& batch : batches) {
      struct Item {
        std::size_t sample;
        int label;
        std::uint64_t drop_seed;
      };
      std::vector<Item> items;
      for (const auto& unit : batch)
        for (std::size_t s : unit.samples)
          items.push_back({s, unit.label, dropout_root.next_u64()});

      const std::size_t B = items.size();
      std::vector<ad::Tensor<float>> ft_vals(B), ff_vals(B), lg_vals(B);

      // Pass 1: forward values only; dropout replayed from per-sample seeds,
      // BN running-stat updates discarded.
      parallel_chunks(B, cfg.threads, [&](std::size_t b, std::size_t e, unsigned) {
        for (std::size_t i = b; i < e; ++i) {
          ad::Tape<float> tape;
          tape.grad_enabled = false;
          Rng drop(items[i].drop_seed);
          RunContext<float> ctx{tape, true, &drop};
          auto out = model.forward(ctx, features[items[i].sample]);
          ft_vals[i] = out.f_t.val();
          ff_vals[i] = out.f_f.val();
          lg_vals[i] = out.logits.val();
        }
      });

      // Batch loss graph over embedding leaves.
      ad::Tape<float> loss_tape;
      std::vector<ad::Var<float>> ft, ff, lg;
      std::vector<int> labels;
      for (std::size_t i = 0; i < B; ++i) {
        ft.push_back(ad::make_leaf(loss_tape, ft_vals[i], true));
        ff.push_back(ad::make_leaf(loss_tape, ff_vals[i], true));
        lg.push_back(ad::make_leaf(loss_tape, lg_vals[i], true));
        labels.push_back(items[i].label);
      }
      auto breakdown = total_loss(ft, ff, lg, labels, result.oim_state, circle_p, id_p);
      if (!breakdown) {
        ++result.skipped_batches;
        std::fprintf(stderr, "warning: batch skipped (no positive or negative pairs)\n");
        continue;
      }
      const double total = breakdown->total.val().v[0];
      if (!std::isfinite(total)) {
        write_artifacts(last_good_checkpoint);
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch + 1) +
                                 "; last good checkpoint written");
      }
      ad::backward(breakdown->total.node);

      // Pass 2: re-forward with gradients, seeded from the embedding grads.
      // Per-thread gradient sinks keep the merge order independent of thread
      // scheduling.
      const unsigned n_threads =
          static_cast<unsigned>(std::min<std::size_t>(cfg.threads == 0 ? 1 : cfg.threads, B));
      std::vector<std::vector<ad::Tensor<float>>> sinks(n_threads);
      for (auto& s : sinks) s = model.params().make_sink();

      parallel_chunks(B, n_threads, [&](std::size_t b, std::size_t e, unsigned tid) {
        ad::t_grad_sink<float>.slots = &sinks[tid];
        for (std::size_t i = b; i < e; ++i) {
          ad::Tape<float> tape;
          Rng drop(items[i].drop_seed);
          RunContext<float> ctx{tape, true, &drop};
          auto out = model.forward(ctx, features[items[i].sample]);
          ad::backward_seeded<float>({{out.f_t.node, ft[i].node->grad},
                                      {out.f_f.node, ff[i].node->grad},
                                      {out.logits.node, lg[i].node->grad}});
        }
        ad::t_grad_sink<float>.slots = nullptr;
      });

      model.params().merge_sinks(sinks);

      opt.step(model.params());
      model.params().zero_grad();

      ++global_step;
      ++epoch_steps;
      epoch_loss_sum += total;
      result.steps.push_back({epoch + 1, global_step, opt.lr, total, breakdown->circle,
                              breakdown->oim, breakdown->id});
      char row[160];
      std::snprintf(row, sizeof row, "%d,%d,%.10g,%.6f,%.6f,%.6f,%.6f\n", epoch + 1,
                    global_step, opt.lr, total, breakdown->circle, breakdown->oim,
                    breakdown->id);
      csv << row;
    }

    if (epoch_steps > 0)
      result.epoch_mean_loss.push_back(epoch_loss_sum / epoch_steps);
    else
      result.epoch_mean_loss.push_back(0.0);
    opt.lr *= cfg.lr_decay_per_epoch;
    last_good_checkpoint = checkpoint_with_oim(model, result.oim_state);
  }

  result.loss_csv = csv.str();
  result.checkpoint_bytes = checkpoint_with_oim(model, result.oim_state);
  write_artifacts(result.checkpoint_bytes);
  return result;
}

// ---------------------------------------------------------------------------
// RunConfig text round trip
// ---------------------------------------------------------------------------

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "epochs = " << epochs << "\n";
  out << "batch_p = " << batch_p << "\n";
  out << "batch_k = " << batch_k << "\n";
  char buf[64];
  auto num = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s = %.10g\n", key, v);
    out << buf;
  };
  num("lr", lr);
  num("lr_decay_per_epoch", lr_decay_per_epoch);
  num("weight_decay", weight_decay);
  num("beta1", beta1);
  num("beta2", beta2);
  num("dropout", dropout);
  num("circle_m", circle_m);
  num("circle_gamma", circle_gamma);
  num("smoothing_epsilon", smoothing_epsilon);
  num("oim_momentum", oim_momentum);
  out << "seed = " << seed << "\n";
  out << "threads = " << threads << "\n";
  num("target_hz", target_hz);
  if (pressure_override) num("pressure_override", *pressure_override);
  return out.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "epochs") cfg.epochs = std::stoi(value);
    else if (key == "batch_p") cfg.batch_p = std::stoi(value);
    else if (key == "batch_k") cfg.batch_k = std::stoi(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "lr_decay_per_epoch") cfg.lr_decay_per_epoch = std::stod(value);
    else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
    else if (key == "beta1") cfg.beta1 = std::stod(value);
    else if (key == "beta2") cfg.beta2 = std::stod(value);
    else if (key == "dropout") cfg.dropout = std::stod(value);
    else if (key == "circle_m") cfg.circle_m = std::stod(value);
    else if (key == "circle_gamma") cfg.circle_gamma = std::stod(value);
    else if (key == "smoothing_epsilon") cfg.smoothing_epsilon = std::stod(value);
    else if (key == "oim_momentum") cfg.oim_momentum = std::stod(value);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "threads") cfg.threads = static_cast<unsigned>(std::stoul(value));
    else if (key == "target_hz") cfg.target_hz = std::stod(value);
    else if (key == "pressure_override") cfg.pressure_override = std::stod(value);
    else throw std::runtime_error("unknown config key: " + key);
  }
  return cfg;
}

void RunConfig::apply_env_overrides() {
  if (const char* env = std::getenv("INKLINE_SEED")) seed = std::stoull(env);
}

std::unique_ptr<DolphinModel<float>> load_model(const std::string& checkpoint_bytes) {
  const ad::Checkpoint ck = ad::checkpoint_from_bytes(checkpoint_bytes);
  const ModelConfig cfg = ModelConfig::from_text(ck.config_text);
  auto model = std::make_unique<DolphinModel<float>>(cfg);
  auto& store = model->params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    const ad::CheckpointEntry* src = ck.find(e.name);
    if (!src) throw std::runtime_error("checkpoint is missing tensor " + e.name);
    if (src->shape != e.node->val.shape)
      throw std::runtime_error("checkpoint shape mismatch at " + e.name);
    for (std::size_t k = 0; k < src->data.size(); ++k) e.node->val.v[k] = src->data[k];
  }
  return model;
}

}  // namespace inkline

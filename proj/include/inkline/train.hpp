#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "inkline/ink.hpp"
#include "inkline/losses.hpp"
#include "inkline/model.hpp"
#include "inkline/preprocess.hpp"

namespace inkline {

struct RunConfig {
  int epochs = 85;
  int batch_p = 18;  // writers per batch
  int batch_k = 4;   // samples per writer
  double lr = 1e-3;
  double lr_decay_per_epoch = 0.9;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double dropout = 0.1;
  double circle_m = 0.25;
  double circle_gamma = 32.0;
  double smoothing_epsilon = 0.1;
  double oim_momentum = 0.5;
  std::uint64_t seed = 0;
  unsigned threads = 2;

  // Preprocess overrides.
  double target_hz = 120.0;
  std::optional<double> pressure_override;

  ModelConfig model;  // num_writers and dropout are filled in by the trainer

  PreprocessConfig preprocess_config() const {
    PreprocessConfig p;
    p.target_hz = target_hz;
    p.pressure_override = pressure_override;
    return p;
  }

  std::string to_text() const;
  static RunConfig from_text(const std::string& text);

  /// INKLINE_SEED in the environment overrides the configured seed.
  void apply_env_overrides();
};

struct StepLog {
  int epoch;
  int step;
  double lr;
  double total;
  double circle;
  double oim;
  double id;
};

struct TrainResult {
  std::unique_ptr<DolphinModel<float>> model;
  OimState<float> oim_state;
  std::vector<std::string> writer_labels;  // label index -> writer id
  std::vector<StepLog> steps;
  std::vector<double> epoch_mean_loss;
  int skipped_batches = 0;
  std::string checkpoint_bytes;
  std::string loss_csv;
};

/// Trains DOLPHIN on the corpus with a P x K batch sampler and per-sample
/// gradient accumulation (batch losses are stitched at the embedding level).
/// With a run directory, writes checkpoint.dwt1, loss_curve.csv and
/// manifest.json atomically. A non-finite loss aborts with the last completed
/// epoch's checkpoint on disk.
TrainResult train_model(const Corpus& train_corpus, const RunConfig& cfg,
                        const std::optional<std::filesystem::path>& run_dir = {});

/// Label mapping used by the trainer: writer ids sorted lexicographically.
std::vector<std::string> writer_label_order(const Corpus& corpus);

std::string checkpoint_with_oim(DolphinModel<float>& model, const OimState<float>& oim);

/// Rebuilds a model from checkpoint bytes (config text + named tensors).
/// Entries not present in a fresh model (e.g. the OIM lookup) are ignored.
std::unique_ptr<DolphinModel<float>> load_model(const std::string& checkpoint_bytes);

}  // namespace inkline

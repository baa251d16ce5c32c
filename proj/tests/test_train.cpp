#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/retrieval.hpp"
#include "inkline/synth.hpp"
#include "inkline/train.hpp"

using namespace inkline;
using ad::Tensor;
using ad::Var;

namespace {

RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.epochs = 2;
  cfg.batch_p = 4;
  cfg.batch_k = 2;
  cfg.threads = 2;
  cfg.seed = 5;
  cfg.model.stage_channels = {16, 32, 64};
  cfg.model.blocks_per_stage = {1, 1, 1};
  return cfg;
}

}  // namespace

TEST_CASE("writer labels are sorted") {
  Corpus c;
  for (const char* w : {"zoe", "amy", "mia", "amy"}) {
    InkSample s;
    s.writer_id = w;
    s.points.push_back({0, 0, 1, 0});
    s.stroke_bounds.push_back({0, 1});
    c.samples.push_back(s);
  }
  const auto order = writer_label_order(c);
  CHECK(order == std::vector<std::string>{"amy", "mia", "zoe"});
}

TEST_CASE("embedding-stitched batch gradients match a joint tape") {
  ModelConfig mcfg;
  mcfg.stage_channels = {16, 32, 64};
  mcfg.blocks_per_stage = {1, 1, 1};
  mcfg.num_writers = 2;
  mcfg.dropout = 0.0;
  DolphinModel<float> model(mcfg, 31337);

  Rng data(9);
  std::vector<FeatureMatrix> feats(4);
  for (auto& f : feats) {
    f.rows = 96;
    f.values.resize(96 * FeatureMatrix::kChannels);
    for (auto& v : f.values) v = data.normal();
  }
  const std::vector<int> labels{0, 0, 1, 1};
  const OimState<float> oim0 = OimState<float>::random_init(2, 64, 3);

  // Route A: everything on one tape.
  std::vector<Tensor<float>> joint_grads;
  {
    ad::Tape<float> tape;
    RunContext<float> ctx{tape, true};
    std::vector<Var<float>> ft, ff, lg;
    for (const auto& f : feats) {
      auto out = model.forward(ctx, f);
      ft.push_back(out.f_t);
      ff.push_back(out.f_f);
      lg.push_back(out.logits);
    }
    OimState<float> oim = oim0;
    auto lb = total_loss(ft, ff, lg, labels, oim);
    REQUIRE(lb.has_value());
    ad::backward(lb->total.node);
    for (std::size_t i = 0; i < model.params().size(); ++i)
      joint_grads.push_back(model.params().entry(i).node->grad);
    model.params().zero_grad();
  }

  // Route B: per-sample forwards stitched at the embedding level.
  {
    std::vector<Tensor<float>> ftv(4), ffv(4), lgv(4);
    for (int i = 0; i < 4; ++i) {
      ad::Tape<float> tape;
      tape.grad_enabled = false;
      RunContext<float> ctx{tape, true};
      auto out = model.forward(ctx, feats[static_cast<std::size_t>(i)]);
      ftv[static_cast<std::size_t>(i)] = out.f_t.val();
      ffv[static_cast<std::size_t>(i)] = out.f_f.val();
      lgv[static_cast<std::size_t>(i)] = out.logits.val();
    }
    ad::Tape<float> loss_tape;
    std::vector<Var<float>> ft, ff, lg;
    for (int i = 0; i < 4; ++i) {
      ft.push_back(ad::make_leaf(loss_tape, ftv[static_cast<std::size_t>(i)], true));
      ff.push_back(ad::make_leaf(loss_tape, ffv[static_cast<std::size_t>(i)], true));
      lg.push_back(ad::make_leaf(loss_tape, lgv[static_cast<std::size_t>(i)], true));
    }
    OimState<float> oim = oim0;
    auto lb = total_loss(ft, ff, lg, labels, oim);
    REQUIRE(lb.has_value());
    ad::backward(lb->total.node);

    for (int i = 0; i < 4; ++i) {
      ad::Tape<float> tape;
      RunContext<float> ctx{tape, true};
      auto out = model.forward(ctx, feats[static_cast<std::size_t>(i)]);
      ad::backward_seeded<float>(
          {{out.f_t.node, ft[static_cast<std::size_t>(i)].node->grad},
           {out.f_f.node, ff[static_cast<std::size_t>(i)].node->grad},
           {out.logits.node, lg[static_cast<std::size_t>(i)].node->grad}});
    }
  }

  double max_rel = 0.0;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& stitched = model.params().entry(i).node->grad;
    const auto& joint = joint_grads[i];
    if (joint.v.empty() && stitched.v.empty()) continue;
    REQUIRE(!joint.v.empty());
    REQUIRE(!stitched.v.empty());
    double scale = 0.0;
    for (float v : joint.v) scale = std::max(scale, std::abs(static_cast<double>(v)));
    for (std::size_t k = 0; k < joint.v.size(); ++k) {
      const double d = std::abs(static_cast<double>(stitched.v[k]) - joint.v[k]);
      max_rel = std::max(max_rel, d / std::max(scale, 1e-6));
    }
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("training writes per-step CSV with constant lr inside an epoch and 0.9 decay") {
  Corpus corpus = synth_generate({8, 6, 2, 3, 1.0, 1.0, 77});
  RunConfig cfg = tiny_run_config();
  TrainResult result = train_model(corpus, cfg);

  REQUIRE(!result.steps.empty());
  std::map<int, std::vector<double>> lr_by_epoch;
  for (const auto& s : result.steps) lr_by_epoch[s.epoch].push_back(s.lr);
  REQUIRE(lr_by_epoch.size() == 2);
  for (const auto& [epoch, lrs] : lr_by_epoch)
    for (double lr : lrs) CHECK(lr == lr_by_epoch[epoch].front());
  CHECK(lr_by_epoch[2].front() ==
        doctest::Approx(lr_by_epoch[1].front() * 0.9).epsilon(1e-12));

  // CSV has a header plus one row per step.
  std::istringstream csv(result.loss_csv);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == result.steps.size() + 1);
}

TEST_CASE("same seed gives bit-identical checkpoints") {
  Corpus corpus = synth_generate({6, 4, 2, 3, 1.0, 1.0, 123});
  RunConfig cfg = tiny_run_config();
  cfg.epochs = 1;
  TrainResult a = train_model(corpus, cfg);
  TrainResult b = train_model(corpus, cfg);
  CHECK(a.checkpoint_bytes == b.checkpoint_bytes);
  CHECK(a.loss_csv == b.loss_csv);
}

TEST_CASE("checkpoints reload into an identical model") {
  Corpus corpus = synth_generate({4, 4, 2, 3, 1.0, 1.0, 9});
  RunConfig cfg = tiny_run_config();
  cfg.epochs = 1;
  TrainResult result = train_model(corpus, cfg);

  auto reloaded = load_model(result.checkpoint_bytes);
  PreprocessConfig pcfg;
  EmbedResult ea = embed_corpus(*result.model, corpus, pcfg, 1);
  EmbedResult eb = embed_corpus(*reloaded, corpus, pcfg, 1);
  REQUIRE(ea.index.vectors.size() == eb.index.vectors.size());
  for (std::size_t i = 0; i < ea.index.vectors.size(); ++i)
    CHECK(ea.index.vectors[i] == eb.index.vectors[i]);
}

TEST_CASE("run config text round trip and env override") {
  RunConfig cfg;
  cfg.epochs = 12;
  cfg.lr = 5e-4;
  cfg.pressure_override = 1.0;
  cfg.seed = 17;
  RunConfig back = RunConfig::from_text(cfg.to_text());
  CHECK(back.epochs == 12);
  CHECK(back.lr == doctest::Approx(5e-4));
  REQUIRE(back.pressure_override.has_value());
  CHECK(*back.pressure_override == doctest::Approx(1.0));
  CHECK(back.seed == 17);

  setenv("INKLINE_SEED", "991", 1);
  back.apply_env_overrides();
  CHECK(back.seed == 991);
  unsetenv("INKLINE_SEED");

  CHECK_THROWS(RunConfig::from_text("bogus_key = 1\n"));
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <map>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/model.hpp"

using namespace inkline;
using ad::Tensor;
using ad::Var;

namespace {

Tensor<float> randn(std::vector<int> shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.v) v = static_cast<float>(rng.normal());
  return t;
}

FeatureMatrix random_features(std::size_t L, Rng& rng) {
  FeatureMatrix f;
  f.rows = L;
  f.values.resize(L * FeatureMatrix::kChannels);
  for (auto& v : f.values) v = rng.normal();
  return f;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_channels = {16, 32, 64};
  cfg.blocks_per_stage = {1, 1, 1};
  cfg.num_writers = 4;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("stem length law: 1000 -> 500 x c0 and odd 101 -> 51") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(1);
  layers::Stem<float> stem(store, cfg, rng);
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(2);
  auto y = stem.forward(ctx, ad::make_leaf(tape, randn({14, 1000}, data)));
  CHECK(y.shape() == std::vector<int>{16, 500});
  auto y2 = stem.forward(ctx, ad::make_leaf(tape, randn({14, 101}, data)));
  CHECK(y2.shape() == std::vector<int>{16, 51});
}

TEST_CASE("stem at default initialization maps zero input to zero") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(3);
  layers::Stem<float> stem(store, cfg, rng);
  // Zero conv biases; BN is gamma=1, beta=0 at init.
  store.find("stem.dw.conv.b")->val = Tensor<float>::zeros({14});
  store.find("stem.pw.conv.b")->val = Tensor<float>::zeros({16});
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  auto y = stem.forward(ctx, ad::make_leaf(tape, Tensor<float>::zeros({14, 64})));
  for (float v : y.val().v) CHECK(v == 0.0f);
}

TEST_CASE("cair block preserves shape in non-downsampling form") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(4);
  layers::CairBlock<float> block(store, "b", 64, 64, 1, cfg, rng);
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(5);
  auto y = block.forward(ctx, ad::make_leaf(tape, randn({64, 128}, data)));
  CHECK(y.shape() == std::vector<int>{64, 128});
}

TEST_CASE("cair downsampling block halves length and lifts channels") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(6);
  layers::CairBlock<float> block(store, "b", 16, 32, 2, cfg, rng);
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(7);
  auto y = block.forward(ctx, ad::make_leaf(tape, randn({16, 50}, data)));
  CHECK(y.shape() == std::vector<int>{32, 25});
}

TEST_CASE("SE forced open equals the same block without SE") {
  ModelConfig cfg = tiny_config();
  Rng rng_a(8), rng_b(8);  // identical initialization draws
  ad::ParamStore<float> sa, sb;
  layers::CairBlock<float> with_se(sa, "b", 16, 16, 1, cfg, rng_a, true);
  layers::CairBlock<float> without_se(sb, "b", 16, 16, 1, cfg, rng_b, false);
  // The SE-free store has fewer entries; align shared parameters by name.
  for (std::size_t i = 0; i < sb.size(); ++i) {
    auto& e = sb.entry(i);
    e.node->val = sa.find(e.name)->val;
  }
  with_se.se()->force_open();

  Rng data(9);
  const auto x = randn({16, 30}, data);
  ad::Tape<float> ta, tb;
  RunContext<float> ca{ta}, cb{tb};
  auto ya = with_se.forward(ca, ad::make_leaf(ta, x));
  auto yb = without_se.forward(cb, ad::make_leaf(tb, x));
  REQUIRE(ya.shape() == yb.shape());
  for (std::size_t i = 0; i < ya.val().v.size(); ++i)
    CHECK(ya.val().v[i] == doctest::Approx(yb.val().v[i]).epsilon(1e-6));
}

TEST_CASE("shuffle inside the block matches the standalone op") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(10);
  layers::CairBlock<float> block(store, "blk", 16, 16, 1, cfg, rng);
  ad::Tape<float> tape;
  std::map<std::string, Tensor<float>> probe;
  RunContext<float> ctx{tape, false, nullptr, &probe};
  Rng data(11);
  block.forward(ctx, ad::make_leaf(tape, randn({16, 20}, data)));
  REQUIRE(probe.count("blk.concat"));
  REQUIRE(probe.count("blk.shuffled"));
  auto cat = ad::make_leaf(tape, probe["blk.concat"]);
  auto expected = ad::channel_shuffle(cat, cfg.shuffle_groups);
  const auto& got = probe["blk.shuffled"];
  REQUIRE(got.shape == expected.val().shape);
  for (std::size_t i = 0; i < got.v.size(); ++i) CHECK(got.v[i] == expected.val().v[i]);
}

TEST_CASE("hfga with closed gate is the identity") {
  ad::ParamStore<float> store;
  Rng rng(12);
  layers::HfgaBlock<float> block(store, "h", 8, 0, rng);
  CHECK(block.gate()->val.v[0] == 0.0f);
  Rng data(13);
  for (int iter = 0; iter < 20; ++iter) {
    ad::Tape<float> tape;
    RunContext<float> ctx{tape};
    const auto x = randn({8, 17}, data);
    auto y = block.forward(ctx, ad::make_leaf(tape, x));
    for (std::size_t i = 0; i < x.v.size(); ++i)
      CHECK(std::abs(y.val().v[i] - x.v[i]) <= 1e-7f);
  }
}

TEST_CASE("hfga on constant input adds a time-constant offset") {
  ad::ParamStore<float> store;
  Rng rng(14);
  layers::HfgaBlock<float> block(store, "h", 6, 0, rng);
  block.gate()->val.v[0] = 0.5f;
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  auto x = ad::make_leaf(tape, Tensor<float>::full({6, 24}, 0.8f));
  auto y = block.forward(ctx, ad::make_leaf(tape, x.val()));

  // With a zero high band, v carries only the bias; the attention-weighted
  // mean of identical vectors is that vector.
  const float* vb = store.find("h.v.b")->val.data();
  const float g = std::tanh(0.5f);
  for (int c = 0; c < 6; ++c)
    for (int l = 0; l < 24; ++l)
      CHECK(y.val().v[static_cast<std::size_t>(c * 24 + l)] ==
            doctest::Approx(0.8f + g * vb[c]).epsilon(1e-5));
}

TEST_CASE("hfga attention rows sum to one") {
  ad::ParamStore<float> store;
  Rng rng(15);
  layers::HfgaBlock<float> block(store, "h", 8, 0, rng);
  ad::Tape<float> tape;
  std::map<std::string, Tensor<float>> probe;
  RunContext<float> ctx{tape, false, nullptr, &probe};
  Rng data(16);
  block.forward(ctx, ad::make_leaf(tape, randn({8, 20}, data)));
  const auto& attn = probe["h.attention"];
  REQUIRE(attn.shape == std::vector<int>{20, 10});
  for (int r = 0; r < 20; ++r) {
    double total = 0.0;
    for (int c = 0; c < 10; ++c) total += attn.v[static_cast<std::size_t>(r * 10 + c)];
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("hfga output is unchanged by the max subtraction on moderate inputs") {
  ad::ParamStore<float> store;
  Rng rng(17);
  layers::HfgaBlock<float> block(store, "h", 8, 0, rng);
  block.gate()->val.v[0] = 0.7f;
  Rng data(18);
  for (int iter = 0; iter < 10; ++iter) {
    const auto x = randn({8, 26}, data);
    ad::Tape<float> tape;
    RunContext<float> ctx{tape};
    auto with_shift = block.forward(ctx, ad::make_leaf(tape, x), true);
    auto without_shift = block.forward(ctx, ad::make_leaf(tape, x), false);
    for (std::size_t i = 0; i < x.v.size(); ++i)
      CHECK(std::abs(with_shift.val().v[i] - without_shift.val().v[i]) <= 1e-6f);
  }
}

TEST_CASE("frequency network: closed gates and silent projectors pass stage 3 through") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(19);
  layers::FrequencyNetwork<float> net(store, cfg, rng);
  for (auto& p : net.projectors()) p.zero_fill();
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(20);
  const auto s1 = randn({16, 64}, data);
  const auto s2 = randn({32, 32}, data);
  const auto s3 = randn({64, 16}, data);
  auto f3 = net.forward(ctx, ad::make_leaf(tape, s1), ad::make_leaf(tape, s2),
                        ad::make_leaf(tape, s3));
  REQUIRE(f3.shape() == std::vector<int>{64, 16});
  for (std::size_t i = 0; i < s3.v.size(); ++i)
    CHECK(std::abs(f3.val().v[i] - s3.v[i]) <= 1e-6f);
}

TEST_CASE("frequency network: stage-1 perturbation reaches f3 through the projectors") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(21);
  layers::FrequencyNetwork<float> net(store, cfg, rng);
  Rng data(22);
  const auto s1 = randn({16, 64}, data);
  const auto s2 = randn({32, 32}, data);
  const auto s3 = randn({64, 16}, data);

  auto run = [&](const Tensor<float>& s1v) {
    ad::Tape<float> tape;
    RunContext<float> ctx{tape};
    return net
        .forward(ctx, ad::make_leaf(tape, s1v), ad::make_leaf(tape, s2),
                 ad::make_leaf(tape, s3))
        .val();
  };
  const auto base = run(s1);
  Tensor<float> bumped = s1;
  bumped.v[5] += 0.25f;
  const auto moved = run(bumped);
  double delta = 0.0;
  for (std::size_t i = 0; i < base.v.size(); ++i)
    delta += std::abs(static_cast<double>(moved.v[i]) - base.v[i]);
  CHECK(delta > 1e-4);
}

TEST_CASE("context fpn shape law for the default config") {
  ModelConfig cfg;
  cfg.num_writers = 3;
  ad::ParamStore<float> store;
  Rng rng(23);
  layers::ContextFpn<float> fpn(store, cfg, rng);
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(24);
  auto [f1, f2] = fpn.forward(ctx, ad::make_leaf(tape, randn({256, 125}, data)),
                              ad::make_leaf(tape, randn({128, 250}, data)),
                              ad::make_leaf(tape, randn({64, 500}, data)));
  CHECK(f1.shape() == std::vector<int>{256, 500});
  CHECK(f2.shape() == std::vector<int>{256, 250});

  CHECK_THROWS(fpn.forward(ctx, ad::make_leaf(tape, randn({256, 100}, data)),
                           ad::make_leaf(tape, randn({128, 250}, data)),
                           ad::make_leaf(tape, randn({64, 500}, data))));
}

TEST_CASE("context layer with bypassed GC and zero lateral reduces to selu(upsample)") {
  ModelConfig cfg = tiny_config();
  ad::ParamStore<float> store;
  Rng rng(25);
  layers::ContextLayer<float> layer(store, "cl", 32, 64, rng);
  layer.gc_deep().set_bypass(true);
  layer.gc_lat().set_bypass(true);
  layer.lateral().zero_fill();

  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(26);
  const auto deep = randn({64, 16}, data);
  auto out = layer.forward(ctx, ad::make_leaf(tape, deep),
                           ad::make_leaf(tape, Tensor<float>::zeros({32, 32})));
  auto expected = ad::selu(ad::upsample_linear2x(ad::make_leaf(tape, deep)));
  REQUIRE(out.shape() == expected.shape());
  for (std::size_t i = 0; i < out.val().v.size(); ++i)
    CHECK(out.val().v[i] == doctest::Approx(expected.val().v[i]).epsilon(1e-6));
}

TEST_CASE("gc block preserves sequence shape") {
  ad::ParamStore<float> store;
  Rng rng(27);
  layers::GcBlock<float> gc(store, "gc", 12, rng);
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(28);
  const auto x = randn({12, 33}, data);
  auto y = gc.forward(ctx, ad::make_leaf(tape, x));
  CHECK(y.shape() == std::vector<int>{12, 33});
}

TEST_CASE("selective pooling with uniform scores is the temporal mean") {
  ad::ParamStore<float> store;
  Rng rng(29);
  layers::SelectivePool<float> pool(store, "p", 10, rng);
  pool.score().zero_fill();
  ad::Tape<float> tape;
  RunContext<float> ctx{tape};
  Rng data(30);
  const auto x = randn({10, 21}, data);
  auto y = pool.forward(ctx, ad::make_leaf(tape, x));
  REQUIRE(y.shape() == std::vector<int>{10});
  for (int c = 0; c < 10; ++c) {
    double mean = 0.0;
    for (int l = 0; l < 21; ++l) mean += x.v[static_cast<std::size_t>(c * 21 + l)];
    mean /= 21.0;
    CHECK(y.val().v[static_cast<std::size_t>(c)] == doctest::Approx(mean).epsilon(1e-5));
  }
}

TEST_CASE("full forward: shapes, eval determinism") {
  ModelConfig cfg;
  cfg.num_writers = 7;
  DolphinModel<float> model(cfg, 777);
  Rng data(31);
  FeatureMatrix f = random_features(1000, data);
  ad::Tape<float> tape;
  tape.grad_enabled = false;
  RunContext<float> ctx{tape};
  auto out = model.forward(ctx, f);
  CHECK(out.f_t.shape() == std::vector<int>{256});
  CHECK(out.f_f.shape() == std::vector<int>{256});
  CHECK(out.logits.shape() == std::vector<int>{7});

  ad::Tape<float> tape2;
  tape2.grad_enabled = false;
  RunContext<float> ctx2{tape2};
  auto out2 = model.forward(ctx2, f);
  for (std::size_t i = 0; i < out.f_t.val().v.size(); ++i)
    CHECK(out.f_t.val().v[i] == out2.f_t.val().v[i]);
}

TEST_CASE("parameter count matches the hand-derived ledger") {
  ModelConfig cfg;
  cfg.num_writers = 100;
  DolphinModel<float> model(cfg, 1);
  std::map<std::string, std::int64_t> by_name;
  for (const auto& [name, count] : model.param_ledger()) by_name[name] += count;

  // Spot checks derived by hand from the block structure.
  CHECK(by_name["stem.dw.conv.w"] == 14 * 7);
  CHECK(by_name["stem.pw.conv.w"] == 14 * 64);
  // Stage-1 block: split width 32, expansion 4*64 = 256.
  CHECK(by_name["backbone.s1.b1.ir.expand.conv.w"] == 32 * 256);
  CHECK(by_name["backbone.s1.b1.ir.dw.conv.w"] == 256 * 3);
  CHECK(by_name["backbone.s1.b1.ir.se.w1"] == 256 * 32);
  CHECK(by_name["backbone.s1.b1.ir.contract.conv.w"] == 256 * 32);
  CHECK(by_name["backbone.s1.b1.out.conv.w"] == 3 * 64 * 64);
  CHECK(by_name["freq.hfga3.q.w"] == 256 * 256);
  CHECK(by_name["fpn.bottom.lateral.w"] == 128 * 256);
  CHECK(by_name["head.w1"] == 512 * 256);
  CHECK(by_name["head.classifier.w"] == 256 * 100);

  std::int64_t ledger_sum = 0;
  for (const auto& [name, count] : by_name)
    if (name.rfind("head.classifier", 0) != 0) ledger_sum += count;
  CHECK(ledger_sum == model.param_total_excluding_classifier());
  CHECK(model.param_total_excluding_classifier() == 2191862);
}

TEST_CASE("shape laws hold across random lengths and configs") {
  Rng rng(32);
  for (int iter = 0; iter < 8; ++iter) {
    ModelConfig cfg;
    const int base = 8 * rng.uniform_int(1, 4);
    cfg.stage_channels = {base, base * 2, base * 4};
    cfg.blocks_per_stage = {rng.uniform_int(1, 2), rng.uniform_int(1, 2),
                            rng.uniform_int(1, 2)};
    cfg.num_writers = rng.uniform_int(2, 9);
    cfg.dropout = 0.0;
    DolphinModel<float> model(cfg, rng.next_u64());
    const std::size_t L = static_cast<std::size_t>(rng.uniform_int(64, 400));
    Rng data(rng.next_u64());
    FeatureMatrix f = random_features(L, data);
    ad::Tape<float> tape;
    tape.grad_enabled = false;
    RunContext<float> ctx{tape};
    auto out = model.forward(ctx, f);
    CHECK(out.f_t.shape() == std::vector<int>{base * 4});
    CHECK(out.f_f.shape() == std::vector<int>{base * 4});
    CHECK(out.logits.shape() == std::vector<int>{cfg.num_writers});
  }
}

TEST_CASE("model config text round trip and validation") {
  ModelConfig cfg;
  cfg.num_writers = 42;
  ModelConfig back = ModelConfig::from_text(cfg.to_text());
  CHECK(back.stage_channels == cfg.stage_channels);
  CHECK(back.num_writers == 42);
  CHECK(back.dropout == cfg.dropout);

  ModelConfig bad;
  bad.num_writers = 2;
  bad.stage_channels = {64, 128, 127};
  CHECK_THROWS(bad.validate());
  ModelConfig bad2;
  bad2.num_writers = 2;
  bad2.dropout = 1.0;
  CHECK_THROWS(bad2.validate());
}

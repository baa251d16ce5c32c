#pragma once

#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "inkline/autodiff.hpp"
#include "inkline/optim.hpp"
#include "inkline/preprocess.hpp"

namespace inkline {

struct ModelConfig {
  int input_dim = 14;
  int stem_kernel = 7;
  std::vector<int> stage_channels = {64, 128, 256};
  std::vector<int> blocks_per_stage = {2, 2, 2};
  int ir_expansion = 4;  // expanded width = ir_expansion * block input width
  int se_reduction = 8;
  int attn_dim = 0;  // 0 means "stage channel width"
  int shuffle_groups = 2;
  double dropout = 0.1;
  int num_writers = 0;

  int embedding_dim() const { return stage_channels.back(); }

  void validate() const {
    if (stage_channels.size() != 3 || blocks_per_stage.size() != 3)
      throw std::runtime_error("model config: exactly 3 stages expected");
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      if (stage_channels[i] % 2 != 0)
        throw std::runtime_error("model config: stage channels must be even");
      if (i > 0 && stage_channels[i] <= stage_channels[i - 1])
        throw std::runtime_error("model config: stage channels must ascend");
      if (blocks_per_stage[i] < 1)
        throw std::runtime_error("model config: at least one block per stage");
    }
    if (input_dim < 1 || stem_kernel < 1 || ir_expansion < 1 || se_reduction < 1)
      throw std::runtime_error("model config: bad dimensions");
    if (shuffle_groups < 1) throw std::runtime_error("model config: bad shuffle groups");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::runtime_error("model config: dropout must lie in [0,1)");
    if (num_writers < 1) throw std::runtime_error("model config: num_writers must be >= 1");
    if (attn_dim != 0)
      for (int c : stage_channels)
        if (attn_dim != c)
          throw std::runtime_error(
              "model config: attn_dim must be 0 or equal every stage width");
  }

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
};

template <typename S>
struct RunContext {
  ad::Tape<S>& tape;
  bool train = false;
  Rng* rng = nullptr;                                     // dropout streams
  std::map<std::string, ad::Tensor<S>>* probe = nullptr;  // test hook

  void dump(const std::string& key, const ad::Var<S>& v) const {
    if (probe) (*probe)[key] = v.val();
  }
};

enum class Act { kNone, kRelu, kSelu };

namespace layers {

using ad::Var;

template <typename S>
Var<S> activate(Var<S> x, Act act) {
  switch (act) {
    case Act::kRelu: return ad::relu(x);
    case Act::kSelu: return ad::selu(x);
    case Act::kNone: return x;
  }
  return x;
}

template <typename S>
class Conv1d {
 public:
  Conv1d(ad::ParamStore<S>& store, const std::string& name, int cin, int cout,
         int kernel, int stride, int groups, Rng& rng)
      : stride_(stride), pad_(kernel / 2), groups_(groups) {
    const int fan_in = (cin / groups) * kernel;
    w_ = store.create(name + ".w",
                      ad::uniform_init<S>({cout, cin / groups, kernel}, fan_in, rng));
    b_ = store.create(name + ".b", ad::uniform_init<S>({cout}, fan_in, rng));
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    Var<S> w{w_, &ctx.tape};
    Var<S> b{b_, &ctx.tape};
    return ad::conv1d(x, w, &b, stride_, pad_, groups_);
  }

  ad::Node<S>* weight() { return w_; }
  ad::Node<S>* bias() { return b_; }

  void zero_fill() {
    for (auto& v : w_->val.v) v = S{0};
    for (auto& v : b_->val.v) v = S{0};
  }

 private:
  ad::Node<S>* w_;
  ad::Node<S>* b_;
  int stride_, pad_, groups_;
};

/// Channel-wise layer normalization at every time step. Sequences run through
/// the network one at a time, where batch statistics degenerate to
/// per-sequence statistics and strip exactly the per-writer style that
/// retrieval needs; position-wise normalization keeps that signal and behaves
/// identically in train and eval mode.
template <typename S>
class NormLayer {
 public:
  NormLayer(ad::ParamStore<S>& store, const std::string& name, int channels) {
    gamma_ = store.create(name + ".gamma", ad::Tensor<S>::full({channels}, S{1}));
    beta_ = store.create(name + ".beta", ad::Tensor<S>::zeros({channels}));
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    return ad::layernorm_channels(x, Var<S>{gamma_, &ctx.tape}, Var<S>{beta_, &ctx.tape});
  }

 private:
  ad::Node<S>* gamma_;
  ad::Node<S>* beta_;
};

/// Conv -> BatchNorm -> Activation.
template <typename S>
class Cba {
 public:
  Cba(ad::ParamStore<S>& store, const std::string& name, int cin, int cout, int kernel,
      int stride, int groups, Act act, Rng& rng)
      : conv_(store, name + ".conv", cin, cout, kernel, stride, groups, rng),
        norm_(store, name + ".norm", cout),
        act_(act) {}

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    return activate(norm_.forward(ctx, conv_.forward(ctx, x)), act_);
  }

  Conv1d<S>& conv() { return conv_; }

 private:
  Conv1d<S> conv_;
  NormLayer<S> norm_;
  Act act_;
};

/// Squeeze-and-excitation channel gate.
template <typename S>
class SeModule {
 public:
  SeModule(ad::ParamStore<S>& store, const std::string& name, int channels, int reduction,
           Rng& rng)
      : channels_(channels) {
    const int hidden = channels / reduction;
    if (hidden < 1) throw std::runtime_error("se module: reduction too large");
    w1_ = store.create(name + ".w1", ad::uniform_init<S>({channels, hidden}, channels, rng));
    b1_ = store.create(name + ".b1", ad::uniform_init<S>({hidden}, channels, rng));
    w2_ = store.create(name + ".w2", ad::uniform_init<S>({hidden, channels}, hidden, rng));
    b2_ = store.create(name + ".b2", ad::uniform_init<S>({channels}, hidden, rng));
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    Var<S> pooled = ad::global_avg_pool(x);
    Var<S> h = ad::relu(ad::add(ad::linear_vt(pooled, Var<S>{w1_, &ctx.tape}),
                                Var<S>{b1_, &ctx.tape}));
    Var<S> s = ad::sigmoid(ad::add(ad::linear_vt(h, Var<S>{w2_, &ctx.tape}),
                                   Var<S>{b2_, &ctx.tape}));
    return ad::scale_channels(x, s);
  }

  /// Test hook: forces the sigmoid output to exactly 1.
  void force_open() {
    for (auto& v : w2_->val.v) v = S{0};
    for (auto& v : b2_->val.v) v = S{50};
  }

 private:
  int channels_;
  ad::Node<S>* w1_;
  ad::Node<S>* b1_;
  ad::Node<S>* w2_;
  ad::Node<S>* b2_;
};

/// Channel Activation Inverted Residual block. The input is split over
/// channels; one half runs a 1-D inverted residual with an SE gate, the other
/// a 1x1 lateral conv. Concat, channel shuffle, a SELU CBA and dropout close
/// the block. The first block of a stage downsamples (stride-2 depthwise) and
/// lifts channels to the stage width.
template <typename S>
class CairBlock {
 public:
  CairBlock(ad::ParamStore<S>& store, const std::string& name, int cin, int cout,
            int stride, const ModelConfig& cfg, Rng& rng, bool with_se = true)
      : cin_(cin),
        cout_(cout),
        stride_(stride),
        groups_(cfg.shuffle_groups),
        dropout_(cfg.dropout),
        expand_(store, name + ".ir.expand", cin / 2, cfg.ir_expansion * cin, 1, 1, 1,
                Act::kRelu, rng),
        dw_(store, name + ".ir.dw", cfg.ir_expansion * cin, cfg.ir_expansion * cin, 3,
            stride, cfg.ir_expansion * cin, Act::kRelu, rng),
        se_(with_se ? std::make_unique<SeModule<S>>(store, name + ".ir.se",
                                                    cfg.ir_expansion * cin,
                                                    cfg.se_reduction, rng)
                    : nullptr),
        contract_(store, name + ".ir.contract", cfg.ir_expansion * cin, cout / 2, 1, 1, 1,
                  Act::kNone, rng),
        lateral_(store, name + ".lateral", cin / 2, cout / 2, 1, stride, 1, rng),
        out_(store, name + ".out", cout, cout, 3, 1, 1, Act::kSelu, rng),
        name_(name) {
    if (cin % 2 != 0 || cout % 2 != 0)
      throw std::runtime_error("cair block: odd channel count");
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    const int c = x.val().dim(0);
    if (c != cin_)
      throw std::runtime_error("cair block: expected " + std::to_string(cin_) +
                               " channels, got " + std::to_string(c));
    Var<S> x1 = ad::slice_channels(x, 0, c / 2);
    Var<S> x2 = ad::slice_channels(x, c / 2, c);

    Var<S> h = expand_.forward(ctx, x1);
    h = dw_.forward(ctx, h);
    if (se_) h = se_->forward(ctx, h);
    h = contract_.forward(ctx, h);
    if (stride_ == 1 && cin_ == cout_) h = ad::add(h, x1);

    Var<S> lat = lateral_.forward(ctx, x2);
    Var<S> cat = ad::concat_channels(h, lat);
    ctx.dump(name_ + ".concat", cat);
    Var<S> shuffled = ad::channel_shuffle(cat, groups_);
    ctx.dump(name_ + ".shuffled", shuffled);
    Var<S> y = out_.forward(ctx, shuffled);
    if (ctx.train && dropout_ > 0.0 && !ctx.rng)
      throw std::runtime_error("train-mode dropout needs an RNG");
    return ad::dropout(y, dropout_, ctx.train,
                       ctx.rng ? *ctx.rng : detail_null_rng());
  }

  SeModule<S>* se() { return se_.get(); }

 private:
  static Rng& detail_null_rng() {
    static Rng rng(0);
    return rng;
  }

  int cin_, cout_, stride_, groups_;
  double dropout_;
  Cba<S> expand_;
  Cba<S> dw_;
  std::unique_ptr<SeModule<S>> se_;
  Cba<S> contract_;
  Conv1d<S> lateral_;
  Cba<S> out_;
  std::string name_;
};

/// High Frequency Gated Attention: the temporal sequence queries its own Haar
/// high band through single-head cross-attention, gated by tanh of a learnable
/// scalar initialized at zero (so a fresh block is the identity).
template <typename S>
class HfgaBlock {
 public:
  HfgaBlock(ad::ParamStore<S>& store, const std::string& name, int channels, int attn_dim,
            Rng& rng)
      : channels_(channels),
        q_(store, name + ".q", channels, attn_dim == 0 ? channels : attn_dim, 1, 1, 1, rng),
        k_(store, name + ".k", channels, attn_dim == 0 ? channels : attn_dim, 1, 1, 1, rng),
        v_(store, name + ".v", channels, attn_dim == 0 ? channels : attn_dim, 1, 1, 1, rng),
        name_(name) {
    gate_ = store.create(name + ".gate", ad::Tensor<S>::zeros({1}));
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x, bool apply_max_shift = true) const {
    const int L = x.val().dim(1);
    if (L < 2) throw std::runtime_error("hfga block: sequence too short for DWT");
    Var<S> xh = ad::haar_high(x);
    Var<S> q = q_.forward(ctx, x);
    Var<S> k = k_.forward(ctx, xh);
    Var<S> v = v_.forward(ctx, xh);

    Var<S> w = ad::scale(ad::matmul(ad::transpose(q), k),
                         1.0 / std::sqrt(static_cast<double>(L)));
    if (apply_max_shift) w = ad::sub_rowmax(w);
    Var<S> attn = ad::softmax_lastdim(w);
    ctx.dump(name_ + ".attention", attn);
    Var<S> ya = ad::matmul(v, ad::transpose(attn));
    Var<S> gated = ad::scale_scalar(ya, ad::tanh_op(Var<S>{gate_, &ctx.tape}));
    return ad::add(gated, x);
  }

  ad::Node<S>* gate() { return gate_; }
  Conv1d<S>& v_proj() { return v_; }

 private:
  int channels_;
  Conv1d<S> q_;
  Conv1d<S> k_;
  Conv1d<S> v_;
  ad::Node<S>* gate_;
  std::string name_;
};

/// Depthwise-separable stride-2 conv aligning one stage's shape to the next.
template <typename S>
class Projector {
 public:
  Projector(ad::ParamStore<S>& store, const std::string& name, int cin, int cout, Rng& rng)
      : dw_(store, name + ".dw", cin, cin, 3, 2, cin, Act::kSelu, rng),
        pw_(store, name + ".pw", cin, cout, 1, 1, 1, Act::kSelu, rng) {}

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    return pw_.forward(ctx, dw_.forward(ctx, x));
  }

  /// Test hook: zero the convolutions so the projector emits silence.
  void zero_fill() {
    dw_.conv().zero_fill();
    pw_.conv().zero_fill();
  }

 private:
  Cba<S> dw_;
  Cba<S> pw_;
};

/// Frequency network: three HFGA blocks joined by projectors, with the
/// projected frequency stream injected additively into the next temporal
/// stage output before its HFGA.
template <typename S>
class FrequencyNetwork {
 public:
  FrequencyNetwork(ad::ParamStore<S>& store, const ModelConfig& cfg, Rng& rng) {
    const auto& ch = cfg.stage_channels;
    hfga_.emplace_back(store, "freq.hfga1", ch[0], cfg.attn_dim == 0 ? 0 : cfg.attn_dim, rng);
    hfga_.emplace_back(store, "freq.hfga2", ch[1], cfg.attn_dim == 0 ? 0 : cfg.attn_dim, rng);
    hfga_.emplace_back(store, "freq.hfga3", ch[2], cfg.attn_dim == 0 ? 0 : cfg.attn_dim, rng);
    proj_.emplace_back(store, "freq.proj1", ch[0], ch[1], rng);
    proj_.emplace_back(store, "freq.proj2", ch[1], ch[2], rng);
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> s1, Var<S> s2, Var<S> s3) const {
    Var<S> h1 = hfga_[0].forward(ctx, s1);
    Var<S> a1 = proj_[0].forward(ctx, h1);
    Var<S> h2 = hfga_[1].forward(ctx, ad::add(s2, a1));
    Var<S> a2 = proj_[1].forward(ctx, h2);
    return hfga_[2].forward(ctx, ad::add(s3, a2));
  }

  std::vector<HfgaBlock<S>>& blocks() { return hfga_; }
  std::vector<Projector<S>>& projectors() { return proj_; }

 private:
  std::vector<HfgaBlock<S>> hfga_;
  std::vector<Projector<S>> proj_;
};

/// Global Context block: softmax attention pooling over time, a bottleneck
/// transform, and a broadcast residual. Sequence shape is unchanged.
template <typename S>
class GcBlock {
 public:
  GcBlock(ad::ParamStore<S>& store, const std::string& name, int channels, Rng& rng,
          int ratio = 4)
      : attn_(store, name + ".attn", channels, 1, 1, 1, 1, rng) {
    const int hidden = std::max(1, channels / ratio);
    w1_ = store.create(name + ".w1", ad::uniform_init<S>({channels, hidden}, channels, rng));
    b1_ = store.create(name + ".b1", ad::uniform_init<S>({hidden}, channels, rng));
    w2_ = store.create(name + ".w2", ad::uniform_init<S>({hidden, channels}, hidden, rng));
    b2_ = store.create(name + ".b2", ad::uniform_init<S>({channels}, hidden, rng));
  }

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    if (bypass_) return x;
    const int L = x.val().dim(1);
    Var<S> scores = ad::reshape(attn_.forward(ctx, x), {L});
    Var<S> weights = ad::softmax_lastdim(scores);
    Var<S> context = ad::matvec(x, weights);
    Var<S> h = ad::relu(ad::add(ad::linear_vt(context, Var<S>{w1_, &ctx.tape}),
                                Var<S>{b1_, &ctx.tape}));
    Var<S> u = ad::add(ad::linear_vt(h, Var<S>{w2_, &ctx.tape}), Var<S>{b2_, &ctx.tape});
    return ad::add_bias(x, u);
  }

  /// Test hook: make the block the identity.
  void set_bypass(bool bypass) { bypass_ = bypass; }

 private:
  Conv1d<S> attn_;
  ad::Node<S>* w1_;
  ad::Node<S>* b1_;
  ad::Node<S>* w2_;
  ad::Node<S>* b2_;
  bool bypass_ = false;
};

/// One Context Layer of the FPN: upsample the deeper stream, lateral 1x1 conv
/// on the shallower one, a GC block on each, SELU on the sum.
template <typename S>
class ContextLayer {
 public:
  ContextLayer(ad::ParamStore<S>& store, const std::string& name, int lateral_in, int d1,
               Rng& rng)
      : lateral_(store, name + ".lateral", lateral_in, d1, 1, 1, 1, rng),
        gc_deep_(store, name + ".gc_deep", d1, rng),
        gc_lat_(store, name + ".gc_lat", d1, rng) {}

  Var<S> forward(RunContext<S>& ctx, Var<S> deep, Var<S> shallow) const {
    Var<S> up = ad::upsample_linear2x(deep);
    if (up.val().dim(1) != shallow.val().dim(1))
      throw std::runtime_error("context layer: length doubling violated (" +
                               std::to_string(deep.val().dim(1)) + " -> " +
                               std::to_string(up.val().dim(1)) + " vs " +
                               std::to_string(shallow.val().dim(1)) + ")");
    Var<S> lat = lateral_.forward(ctx, shallow);
    return ad::selu(ad::add(gc_deep_.forward(ctx, up), gc_lat_.forward(ctx, lat)));
  }

  GcBlock<S>& gc_deep() { return gc_deep_; }
  GcBlock<S>& gc_lat() { return gc_lat_; }
  Conv1d<S>& lateral() { return lateral_; }

 private:
  Conv1d<S> lateral_;
  GcBlock<S> gc_deep_;
  GcBlock<S> gc_lat_;
};

/// Two stacked Context Layers fusing the three backbone taps.
template <typename S>
class ContextFpn {
 public:
  ContextFpn(ad::ParamStore<S>& store, const ModelConfig& cfg, Rng& rng)
      : bottom_(store, "fpn.bottom", cfg.stage_channels[1], cfg.stage_channels[2], rng),
        top_(store, "fpn.top", cfg.stage_channels[0], cfg.stage_channels[2], rng) {}

  /// p1 is the deepest tap, p2 the middle, p4 the shallowest; returns
  /// (f1 = p5, f2 = p3).
  std::pair<Var<S>, Var<S>> forward(RunContext<S>& ctx, Var<S> p1, Var<S> p2,
                                    Var<S> p4) const {
    Var<S> p3 = bottom_.forward(ctx, p1, p2);
    Var<S> p5 = top_.forward(ctx, p3, p4);
    return {p5, p3};
  }

  ContextLayer<S>& bottom() { return bottom_; }
  ContextLayer<S>& top() { return top_; }

 private:
  ContextLayer<S> bottom_;
  ContextLayer<S> top_;
};

/// Attentive pooling over time: learned per-step score -> softmax -> weighted
/// sum. Uniform scores reduce it to the temporal mean.
template <typename S>
class SelectivePool {
 public:
  SelectivePool(ad::ParamStore<S>& store, const std::string& name, int channels, Rng& rng)
      : score_(store, name + ".score", channels, 1, 1, 1, 1, rng) {}

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    const int L = x.val().dim(1);
    Var<S> s = ad::reshape(score_.forward(ctx, x), {L});
    return ad::matvec(x, ad::softmax_lastdim(s));
  }

  Conv1d<S>& score() { return score_; }

 private:
  Conv1d<S> score_;
};

template <typename S>
struct HeadOutput {
  Var<S> f_t;
  Var<S> f_f;
  Var<S> logits;
};

/// Pooling head: three Selective Pooling layers and the projection MLP
/// producing f_T, logits and f_F.
template <typename S>
class Head {
 public:
  Head(ad::ParamStore<S>& store, const ModelConfig& cfg, Rng& rng)
      : dropout_(cfg.dropout),
        pool1_(store, "head.pool1", cfg.embedding_dim(), rng),
        pool2_(store, "head.pool2", cfg.embedding_dim(), rng),
        pool3_(store, "head.pool3", cfg.embedding_dim(), rng) {
    const int d1 = cfg.embedding_dim();
    w1_ = store.create("head.w1", ad::uniform_init<S>({2 * d1, d1}, 2 * d1, rng));
    w3_ = store.create("head.w3", ad::uniform_init<S>({d1, d1}, d1, rng));
    wl_ = store.create("head.classifier.w",
                       ad::uniform_init<S>({d1, cfg.num_writers}, d1, rng));
  }

  HeadOutput<S> forward(RunContext<S>& ctx, Var<S> f1, Var<S> f2, Var<S> f3) const {
    Var<S> f1p = pool1_.forward(ctx, f1);
    Var<S> f2p = pool2_.forward(ctx, f2);
    Var<S> f3p = pool3_.forward(ctx, f3);
    Rng* rng = ctx.rng;
    if (ctx.train && dropout_ > 0.0 && !rng)
      throw std::runtime_error("train-mode dropout needs an RNG");
    static Rng null_rng(0);
    Rng& r = rng ? *rng : null_rng;
    Var<S> f_t = ad::dropout(ad::linear_vt(ad::concat_vec(f1p, f2p), Var<S>{w1_, &ctx.tape}),
                             dropout_, ctx.train, r);
    Var<S> logits = ad::linear_vt(f_t, Var<S>{wl_, &ctx.tape});
    Var<S> f_f = ad::dropout(ad::linear_vt(f3p, Var<S>{w3_, &ctx.tape}), dropout_,
                             ctx.train, r);
    return {f_t, f_f, logits};
  }

  SelectivePool<S>& pool1() { return pool1_; }
  SelectivePool<S>& pool2() { return pool2_; }
  SelectivePool<S>& pool3() { return pool3_; }

 private:
  double dropout_;
  SelectivePool<S> pool1_;
  SelectivePool<S> pool2_;
  SelectivePool<S> pool3_;
  ad::Node<S>* w1_;
  ad::Node<S>* w3_;
  ad::Node<S>* wl_;
};

/// Depthwise separable stem, kernel 7, stride 2, lifting 14 input functions to
/// the first stage width.
template <typename S>
class Stem {
 public:
  Stem(ad::ParamStore<S>& store, const ModelConfig& cfg, Rng& rng)
      : dw_(store, "stem.dw", cfg.input_dim, cfg.input_dim, cfg.stem_kernel, 2,
            cfg.input_dim, Act::kSelu, rng),
        pw_(store, "stem.pw", cfg.input_dim, cfg.stage_channels[0], 1, 1, 1, Act::kSelu,
            rng) {}

  Var<S> forward(RunContext<S>& ctx, Var<S> x) const {
    return pw_.forward(ctx, dw_.forward(ctx, x));
  }

 private:
  Cba<S> dw_;
  Cba<S> pw_;
};

}  // namespace layers

template <typename S>
struct ForwardOutput {
  ad::Var<S> f_t;     // d1
  ad::Var<S> f_f;     // d1
  ad::Var<S> logits;  // num_writers
};

/// The DOLPHIN network: stem, CAIR temporal backbone, HFGA frequency network,
/// Context-Aware FPN and pooling head. An instance in eval mode is immutable
/// and shareable across threads; training requires exclusive access.
template <typename S>
class DolphinModel {
 public:
  explicit DolphinModel(const ModelConfig& cfg, std::uint64_t init_seed = 1)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    stem_ = std::make_unique<layers::Stem<S>>(store_, cfg_, rng);
    const auto& ch = cfg_.stage_channels;
    int prev = ch[0];
    for (std::size_t s = 0; s < ch.size(); ++s) {
      std::vector<std::unique_ptr<layers::CairBlock<S>>> blocks;
      for (int b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        const bool first = b == 0;
        const std::string name =
            "backbone.s" + std::to_string(s + 1) + ".b" + std::to_string(b + 1);
        const int cin = first ? prev : ch[s];
        const int stride = (first && s > 0) ? 2 : 1;
        blocks.push_back(std::make_unique<layers::CairBlock<S>>(store_, name, cin, ch[s],
                                                                stride, cfg_, rng));
      }
      stages_.push_back(std::move(blocks));
      prev = ch[s];
    }
    freq_ = std::make_unique<layers::FrequencyNetwork<S>>(store_, cfg_, rng);
    fpn_ = std::make_unique<layers::ContextFpn<S>>(store_, cfg_, rng);
    head_ = std::make_unique<layers::Head<S>>(store_, cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore<S>& params() { return store_; }

  /// Rounds a sequence length down to the multiple of 8 the three stride-2
  /// halvings need for the FPN's exact length-doubling law.
  static std::size_t usable_length(std::size_t L) { return (L / 8) * 8; }

  ad::Var<S> input_from_features(ad::Tape<S>& tape, const FeatureMatrix& f,
                                 bool requires_grad = false) const {
    const std::size_t L = usable_length(f.rows);
    if (L < 16)
      throw std::runtime_error("sequence too short for forward: L = " +
                               std::to_string(f.rows));
    ad::Tensor<S> x({static_cast<int>(FeatureMatrix::kChannels), static_cast<int>(L)});
    for (std::size_t c = 0; c < FeatureMatrix::kChannels; ++c)
      for (std::size_t l = 0; l < L; ++l)
        x.v[c * L + l] = static_cast<S>(f.at(l, c));
    return ad::make_leaf(tape, std::move(x), requires_grad);
  }

  ForwardOutput<S> forward(RunContext<S>& ctx, const FeatureMatrix& features) const {
    return forward_var(ctx, input_from_features(ctx.tape, features));
  }

  ForwardOutput<S> forward_var(RunContext<S>& ctx, ad::Var<S> x) const {
    ad::Var<S> h = stem_->forward(ctx, x);
    std::vector<ad::Var<S>> taps;
    for (const auto& stage : stages_) {
      for (const auto& block : stage) h = block->forward(ctx, h);
      taps.push_back(h);
    }
    ctx.dump("stage1", taps[0]);
    ctx.dump("stage2", taps[1]);
    ctx.dump("stage3", taps[2]);
    ad::Var<S> f3 = freq_->forward(ctx, taps[0], taps[1], taps[2]);
    ctx.dump("f3", f3);
    auto [f1, f2] = fpn_->forward(ctx, taps[2], taps[1], taps[0]);
    ctx.dump("f1", f1);
    ctx.dump("f2", f2);
    auto out = head_->forward(ctx, f1, f2, f3);
    return {out.f_t, out.f_f, out.logits};
  }

  /// Per-parameter ledger: (name, count). The classifier is listed too; the
  /// headline total excludes it, matching how parameters are reported.
  std::vector<std::pair<std::string, std::int64_t>> param_ledger() const {
    std::vector<std::pair<std::string, std::int64_t>> out;
    for (std::size_t i = 0; i < store_.size(); ++i) {
      const auto& e = store_.entry(i);
      if (!e.trainable) continue;
      out.emplace_back(e.name, e.node->val.numel());
    }
    return out;
  }

  std::int64_t param_total_excluding_classifier() const {
    return store_.trainable_count("head.classifier");
  }
  std::int64_t classifier_param_count() const {
    return store_.trainable_count() - param_total_excluding_classifier();
  }

  // Test hooks.
  layers::FrequencyNetwork<S>& frequency_network() { return *freq_; }
  layers::ContextFpn<S>& fpn() { return *fpn_; }
  layers::Head<S>& head() { return *head_; }
  layers::CairBlock<S>& cair_block(std::size_t stage, std::size_t block) {
    return *stages_[stage][block];
  }

 private:
  ModelConfig cfg_;
  ad::ParamStore<S> store_;
  std::unique_ptr<layers::Stem<S>> stem_;
  std::vector<std::vector<std::unique_ptr<layers::CairBlock<S>>>> stages_;
  std::unique_ptr<layers::FrequencyNetwork<S>> freq_;
  std::unique_ptr<layers::ContextFpn<S>> fpn_;
  std::unique_ptr<layers::Head<S>> head_;
};

inline std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "input_dim = " << input_dim << "\n";
  out << "stem_kernel = " << stem_kernel << "\n";
  out << "stage_channels = ";
  for (std::size_t i = 0; i < stage_channels.size(); ++i)
    out << stage_channels[i] << (i + 1 < stage_channels.size() ? "," : "\n");
  out << "blocks_per_stage = ";
  for (std::size_t i = 0; i < blocks_per_stage.size(); ++i)
    out << blocks_per_stage[i] << (i + 1 < blocks_per_stage.size() ? "," : "\n");
  out << "ir_expansion = " << ir_expansion << "\n";
  out << "se_reduction = " << se_reduction << "\n";
  out << "attn_dim = " << attn_dim << "\n";
  out << "shuffle_groups = " << shuffle_groups << "\n";
  out << "dropout = " << dropout << "\n";
  out << "num_writers = " << num_writers << "\n";
  return out.str();
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char ch : s + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  return out;
}

}  // namespace detail

inline ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "input_dim") cfg.input_dim = std::stoi(value);
    else if (key == "stem_kernel") cfg.stem_kernel = std::stoi(value);
    else if (key == "stage_channels") cfg.stage_channels = detail::parse_int_list(value);
    else if (key == "blocks_per_stage") cfg.blocks_per_stage = detail::parse_int_list(value);
    else if (key == "ir_expansion") cfg.ir_expansion = std::stoi(value);
    else if (key == "se_reduction") cfg.se_reduction = std::stoi(value);
    else if (key == "attn_dim") cfg.attn_dim = std::stoi(value);
    else if (key == "shuffle_groups") cfg.shuffle_groups = std::stoi(value);
    else if (key == "dropout") cfg.dropout = std::stod(value);
    else if (key == "num_writers") cfg.num_writers = std::stoi(value);
  }
  return cfg;
}

}  // namespace inkline

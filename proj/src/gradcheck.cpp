#include "inkline/gradcheck.hpp"

#include <cmath>

namespace inkline {

namespace {

using ad::Tensor;
using ad::Var;

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.v) v = rng.uniform(lo, hi);
  return t;
}

/// Values in +-[0.25, 1.0]; keeps kinked activations away from their kinks.
Tensor<double> rand_tensor_offzero(std::vector<int> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.v) {
    const double mag = rng.uniform(0.25, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// loss = sum(op_out * weights); `weights` is the last leaf so FD covers it.
template <typename F>
auto weighted(F op) {
  return [op](auto& tape, const auto& xs) {
    (void)tape;
    auto out = op(tape, xs);
    return ad::sum_all(ad::mul(out, xs.back()));
  };
}

void check_elementwise_ops(GradCheckReport& rep) {
  Rng rng(101);
  auto x = rand_tensor_offzero({3, 8}, rng);
  auto y = rand_tensor_offzero({3, 8}, rng);
  auto w = rand_tensor({3, 8}, rng);

  check_scenario(rep, "add", {x, y, w}, weighted([](auto&, const auto& xs) {
                   return ad::add(xs[0], xs[1]);
                 }));
  check_scenario(rep, "sub", {x, y, w}, weighted([](auto&, const auto& xs) {
                   return ad::sub(xs[0], xs[1]);
                 }));
  check_scenario(rep, "mul", {x, y, w}, weighted([](auto&, const auto& xs) {
                   return ad::mul(xs[0], xs[1]);
                 }));
  check_scenario(rep, "add_n", {x, y, w}, weighted([](auto&, const auto& xs) {
                   return ad::add_n(std::vector{xs[0], xs[1], xs[0]});
                 }));
  check_scenario(rep, "scale", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::scale(xs[0], -1.7);
                 }));
  check_scenario(rep, "add_const", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::add_const(xs[0], 0.37);
                 }));
  check_scenario(rep, "relu", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::relu(xs[0]);
                 }));
  check_scenario(rep, "selu", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::selu(xs[0]);
                 }));
  check_scenario(rep, "tanh", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::tanh_op(xs[0]);
                 }));
  check_scenario(rep, "sigmoid", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::sigmoid(xs[0]);
                 }));
  check_scenario(rep, "exp", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::exp_op(xs[0]);
                 }));
  check_scenario(rep, "softplus", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::softplus(xs[0]);
                 }));

  auto pos = rand_tensor({3, 8}, rng, 0.3, 1.5);
  check_scenario(rep, "log", {pos, w}, weighted([](auto&, const auto& xs) {
                   return ad::log_op(xs[0]);
                 }));
  check_scenario(rep, "sqrt", {pos, w}, weighted([](auto&, const auto& xs) {
                   return ad::sqrt_op(xs[0]);
                 }));
  check_scenario(rep, "rsqrt", {pos, w}, weighted([](auto&, const auto& xs) {
                   return ad::rsqrt(xs[0], 1e-8);
                 }));
}

void check_shape_ops(GradCheckReport& rep) {
  Rng rng(202);
  auto x = rand_tensor({4, 6}, rng);
  auto w24 = rand_tensor({24}, rng);
  auto wmat = rand_tensor({6, 4}, rng);

  check_scenario(rep, "reshape", {x, w24}, weighted([](auto&, const auto& xs) {
                   return ad::reshape(xs[0], {24});
                 }));
  check_scenario(rep, "transpose", {x, wmat}, weighted([](auto&, const auto& xs) {
                   return ad::transpose(xs[0]);
                 }));
  check_scenario(rep, "pick", {rand_tensor({7}, rng), rand_tensor({1}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::pick(xs[0], 3); }));
  check_scenario(rep, "gather2d", {x, rand_tensor({3}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::gather2d(xs[0], {{0, 1}, {2, 5}, {3, 0}});
                 }));
  check_scenario(rep, "stack_rows",
                 {rand_tensor({5}, rng), rand_tensor({5}, rng), rand_tensor({3, 5}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::stack_rows(std::vector{xs[0], xs[1], xs[0]});
                 }));
  check_scenario(rep, "slice_channels", {x, rand_tensor({2, 6}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::slice_channels(xs[0], 1, 3);
                 }));
  check_scenario(rep, "concat_channels",
                 {x, rand_tensor({2, 6}, rng), rand_tensor({6, 6}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::concat_channels(xs[0], xs[1]);
                 }));
  check_scenario(rep, "concat_vec",
                 {rand_tensor({4}, rng), rand_tensor({3}, rng), rand_tensor({7}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::concat_vec(xs[0], xs[1]);
                 }));
  check_scenario(rep, "channel_shuffle", {rand_tensor({6, 5}, rng), rand_tensor({6, 5}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::channel_shuffle(xs[0], 2);
                 }));
}

void check_linalg_ops(GradCheckReport& rep) {
  Rng rng(303);
  check_scenario(rep, "matmul",
                 {rand_tensor({3, 4}, rng), rand_tensor({4, 5}, rng), rand_tensor({3, 5}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::matmul(xs[0], xs[1]); }));
  check_scenario(rep, "matvec",
                 {rand_tensor({4, 6}, rng), rand_tensor({6}, rng), rand_tensor({4}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::matvec(xs[0], xs[1]); }));
  check_scenario(rep, "linear_vt",
                 {rand_tensor({5}, rng), rand_tensor({5, 3}, rng), rand_tensor({3}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::linear_vt(xs[0], xs[1]); }));
  check_scenario(rep, "sum_all", {rand_tensor({4, 4}, rng), rand_tensor({1}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::sum_all(xs[0]); }));
  check_scenario(rep, "mean_all", {rand_tensor({4, 4}, rng), rand_tensor({1}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::mean_all(xs[0]); }));
  check_scenario(rep, "l2_normalize",
                 {rand_tensor_offzero({6}, rng), rand_tensor({6}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::l2_normalize(xs[0]); }));
}

void check_softmax_ops(GradCheckReport& rep) {
  Rng rng(404);
  auto x = rand_tensor({3, 6}, rng, -2.0, 2.0);
  auto w = rand_tensor({3, 6}, rng);
  check_scenario(rep, "softmax", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::softmax_lastdim(xs[0]);
                 }));
  check_scenario(rep, "sub_rowmax+softmax", {x, w}, weighted([](auto&, const auto& xs) {
                   return ad::softmax_lastdim(ad::sub_rowmax(xs[0]));
                 }));
  check_scenario(rep, "logsumexp",
                 {rand_tensor({7}, rng, -2.0, 2.0), rand_tensor({1}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::logsumexp_vec(xs[0]); }));
  check_scenario(rep, "log_softmax",
                 {rand_tensor({7}, rng, -2.0, 2.0), rand_tensor({7}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::log_softmax_vec(xs[0]); }));
}

void check_sequence_ops(GradCheckReport& rep) {
  Rng rng(505);
  auto x = rand_tensor({4, 10}, rng);

  check_scenario(rep, "conv1d k3",
                 {x, rand_tensor({3, 4, 3}, rng), rand_tensor({3}, rng), rand_tensor({3, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::conv1d(xs[0], xs[1], xs[2], 1, 1, 1);
                 }));
  check_scenario(rep, "conv1d k7 s2",
                 {x, rand_tensor({2, 4, 7}, rng), rand_tensor({2}, rng), rand_tensor({2, 5}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::conv1d(xs[0], xs[1], xs[2], 2, 3, 1);
                 }));
  check_scenario(rep, "conv1d k1",
                 {x, rand_tensor({5, 4, 1}, rng), rand_tensor({5}, rng), rand_tensor({5, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::conv1d(xs[0], xs[1], xs[2], 1, 0, 1);
                 }));
  check_scenario(rep, "conv1d depthwise s2",
                 {x, rand_tensor({4, 1, 3}, rng), rand_tensor({4}, rng), rand_tensor({4, 5}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::conv1d(xs[0], xs[1], xs[2], 2, 1, 4);
                 }));
  check_scenario(rep, "conv1d groups2",
                 {x, rand_tensor({6, 2, 3}, rng), rand_tensor({6}, rng), rand_tensor({6, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::conv1d(xs[0], xs[1], xs[2], 1, 1, 2);
                 }));
  check_scenario(rep, "add_bias", {x, rand_tensor({4}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::add_bias(xs[0], xs[1]); }));
  check_scenario(rep, "scale_channels",
                 {x, rand_tensor_offzero({4}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::scale_channels(xs[0], xs[1]);
                 }));
  check_scenario(rep, "scale_scalar", {x, rand_tensor({1}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::scale_scalar(xs[0], xs[1]);
                 }));
  check_scenario(rep, "global_avg_pool", {x, rand_tensor({4}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::global_avg_pool(xs[0]); }));
  check_scenario(rep, "global_max_pool", {x, rand_tensor({4}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::global_max_pool(xs[0]); }));
  check_scenario(rep, "upsample_linear2x", {x, rand_tensor({4, 20}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::upsample_linear2x(xs[0]);
                 }));
  check_scenario(rep, "haar_high", {x, rand_tensor({4, 5}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::haar_high(xs[0]); }));
  check_scenario(rep, "haar_high odd", {rand_tensor({4, 9}, rng), rand_tensor({4, 4}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::haar_high(xs[0]); }));
  check_scenario(rep, "haar_low", {x, rand_tensor({4, 5}, rng)},
                 weighted([](auto&, const auto& xs) { return ad::haar_low(xs[0]); }));
  check_scenario(rep, "dropout (fixed mask)", {x, rand_tensor({4, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   Rng mask_rng(777);
                   return ad::dropout(xs[0], 0.3, true, mask_rng);
                 }));

  // BatchNorm with fresh local buffers per evaluation (pure scenario).
  check_scenario(rep, "batchnorm train",
                 {x, rand_tensor_offzero({4}, rng), rand_tensor({4}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto& tape, const auto& xs) {
                   using St = std::remove_cvref_t<decltype(xs[0].val().v[0])>;
                   Tensor<St> rm = Tensor<St>::zeros({4});
                   Tensor<St> rv = Tensor<St>::full({4}, St{1});
                   (void)tape;
                   return ad::batchnorm1d(xs[0], xs[1], xs[2], rm, rv, true);
                 }));
  check_scenario(rep, "batchnorm eval",
                 {x, rand_tensor_offzero({4}, rng), rand_tensor({4}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto& tape, const auto& xs) {
                   using St = std::remove_cvref_t<decltype(xs[0].val().v[0])>;
                   Tensor<St> rm = Tensor<St>::full({4}, St{0.2});
                   Tensor<St> rv = Tensor<St>::full({4}, St{1.5});
                   (void)tape;
                   return ad::batchnorm1d(xs[0], xs[1], xs[2], rm, rv, false);
                 }));
  check_scenario(rep, "layernorm_channels",
                 {x, rand_tensor_offzero({4}, rng), rand_tensor({4}, rng), rand_tensor({4, 10}, rng)},
                 weighted([](auto&, const auto& xs) {
                   return ad::layernorm_channels(xs[0], xs[1], xs[2]);
                 }));
}

void check_losses(GradCheckReport& rep) {
  Rng rng(606);
  const std::vector<int> labels{0, 0, 1, 1};

  check_scenario(rep, "circle_loss",
                 {rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng),
                  rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng)},
                 [labels](auto&, const auto& xs) {
                   return *circle_loss(std::vector{xs[0], xs[1], xs[2], xs[3]}, labels);
                 });

  Tensor<double> lookup_init = rand_tensor({3, 6}, rng);
  check_scenario(rep, "oim_loss",
                 {rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng),
                  rand_tensor_offzero({6}, rng)},
                 [lookup_init](auto&, const auto& xs) {
                   using St = std::remove_cvref_t<decltype(xs[0].val().v[0])>;
                   OimState<St> state;
                   state.lookup = lookup_init.template cast<St>();
                   return oim_loss(std::vector{xs[0], xs[1], xs[2]}, {0, 1, 2}, state);
                 });

  check_scenario(rep, "id_loss",
                 {rand_tensor({5}, rng, -2.0, 2.0), rand_tensor({5}, rng, -2.0, 2.0)},
                 [](auto&, const auto& xs) {
                   return id_loss(std::vector{xs[0], xs[1]}, {1, 3}, IdParams{0.1});
                 });

  Tensor<double> lookup2 = rand_tensor({2, 6}, rng);
  check_scenario(rep, "total_loss",
                 {rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng),
                  rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng),
                  rand_tensor_offzero({6}, rng), rand_tensor_offzero({6}, rng),
                  rand_tensor({2}, rng), rand_tensor({2}, rng), rand_tensor({2}, rng)},
                 [lookup2](auto&, const auto& xs) {
                   using St = std::remove_cvref_t<decltype(xs[0].val().v[0])>;
                   OimState<St> state;
                   state.lookup = lookup2.template cast<St>();
                   auto out = total_loss(std::vector{xs[0], xs[1], xs[2]},
                                         std::vector{xs[3], xs[4], xs[5]},
                                         std::vector{xs[6], xs[7], xs[8]}, {0, 0, 1},
                                         state);
                   return out->total;
                 });
}

// ---------------------------------------------------------------------------
// Parameter-space checks on paired float/double modules
// ---------------------------------------------------------------------------

struct ProbeGroup {
  std::string prefix;
  int count;
};

/// Finite-difference check over randomly probed parameter coordinates of
/// paired double/float modules. The piecewise-linear activations make the
/// network non-smooth on a dense set, where central differences are not a
/// valid oracle; each probe is therefore validated with a second step size
/// (a derivative kink inside the stencil shows up as step-size dependence)
/// and resampled when the two estimates disagree.
template <typename LossD, typename LossF>
void check_params(GradCheckReport& rep, const std::string& name,
                  ad::ParamStore<double>& sd, ad::ParamStore<float>& sf,
                  const std::vector<ProbeGroup>& groups, Rng& rng, LossD loss_d,
                  LossF loss_f, double h = 1e-5) {
  // Evaluate both engines at the same float-representable point.
  for (std::size_t i = 0; i < sd.size(); ++i)
    sd.entry(i).node->val = sf.entry(i).node->val.template cast<double>();

  sd.zero_grad();
  sf.zero_grad();
  {
    ad::Tape<double> tape;
    ad::backward(loss_d(tape).node);
  }
  {
    ad::Tape<float> tape;
    ad::backward(loss_f(tape).node);
  }
  double f0;
  {
    ad::Tape<double> tape;
    tape.grad_enabled = false;
    f0 = loss_d(tape).val().v[0];
  }
  const double noise_floor = 1e-9 * std::max(1.0, std::abs(f0));

  auto eval_at = [&](std::size_t entry, std::size_t coord, double delta) {
    auto& node = *sd.entry(entry).node;
    const double orig = node.val.v[coord];
    node.val.v[coord] = orig + delta;
    ad::Tape<double> tape;
    tape.grad_enabled = false;
    const double f = loss_d(tape).val().v[0];
    node.val.v[coord] = orig;
    return f;
  };

  std::vector<double> fd_vals, an_d, an_f;
  int rejected = 0;
  bool exhausted = false;
  for (const auto& group : groups) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < sd.size(); ++i) {
      const auto& e = sd.entry(i);
      if (!e.trainable) continue;
      if (!group.prefix.empty() && e.name.rfind(group.prefix, 0) != 0) continue;
      candidates.push_back(i);
    }
    if (candidates.empty()) continue;
    int accepted = 0;
    for (int attempt = 0; accepted < group.count && attempt < 15 * group.count;
         ++attempt) {
      const std::size_t entry = candidates[rng.uniform_index(candidates.size())];
      const auto numel = static_cast<std::size_t>(sd.entry(entry).node->val.numel());
      const std::size_t coord = rng.uniform_index(numel);

      const double fd1 = (eval_at(entry, coord, h) - eval_at(entry, coord, -h)) / (2.0 * h);
      const double fd2 =
          (eval_at(entry, coord, h / 2) - eval_at(entry, coord, -h / 2)) / h;
      const double an = sd.entry(entry).node->grad.v.empty()
                            ? 0.0
                            : sd.entry(entry).node->grad.v[coord];
      const double gap_limit =
          std::max(0.5e-6 * std::max(std::abs(fd2), std::abs(an)), noise_floor);
      if (std::abs(fd1 - fd2) > gap_limit) {
        ++rejected;
        continue;
      }
      fd_vals.push_back(fd2);
      an_d.push_back(an);
      an_f.push_back(sf.entry(entry).node->grad.v.empty()
                         ? 0.0
                         : static_cast<double>(sf.entry(entry).node->grad.v[coord]));
      ++accepted;
    }
    if (accepted < group.count) exhausted = true;
  }

  const double scale = gradcheck_detail::grad_scale(fd_vals);
  double err_d = 0.0, err_f = 0.0;
  for (std::size_t i = 0; i < fd_vals.size(); ++i) {
    err_d = std::max(err_d, gradcheck_detail::rel_err(an_d[i], fd_vals[i], scale));
    err_f = std::max(err_f, gradcheck_detail::rel_err(an_f[i], fd_vals[i], scale));
  }
  if (exhausted) err_d = err_f = 1.0;  // could not find enough smooth probe points
  rep.results.push_back({name + " [f64]", err_d, 1e-6, err_d < 1e-6});
  rep.results.push_back({name + " [f32]", err_f, 1e-4, err_f < 1e-4});
}

ModelConfig small_block_config() {
  ModelConfig cfg;
  cfg.stage_channels = {16, 32, 64};
  cfg.blocks_per_stage = {1, 1, 1};
  cfg.dropout = 0.0;
  cfg.num_writers = 4;
  return cfg;
}

void check_cair_block(GradCheckReport& rep) {
  const ModelConfig cfg = small_block_config();
  ad::ParamStore<double> sd;
  ad::ParamStore<float> sf;
  Rng rd(42), rf(42);
  layers::CairBlock<double> bd(sd, "blk", 16, 16, 1, cfg, rd);
  layers::CairBlock<float> bf(sf, "blk", 16, 16, 1, cfg, rf);

  Rng data_rng(7);
  const auto x = rand_tensor({16, 12}, data_rng);
  const auto w = rand_tensor({16, 12}, data_rng);

  auto loss_d = [&](ad::Tape<double>& tape) {
    RunContext<double> ctx{tape, true};
    auto out = bd.forward(ctx, ad::make_leaf(tape, x, false));
    return ad::sum_all(ad::mul(out, ad::make_leaf(tape, w, false)));
  };
  auto loss_f = [&](ad::Tape<float>& tape) {
    RunContext<float> ctx{tape, true};
    auto out = bf.forward(ctx, ad::make_leaf(tape, x.cast<float>(), false));
    return ad::sum_all(ad::mul(out, ad::make_leaf(tape, w.cast<float>(), false)));
  };

  Rng probe_rng(99);
  check_params(rep, "cair_block params", sd, sf, {{"", 24}}, probe_rng, loss_d, loss_f);
}

void check_hfga_block(GradCheckReport& rep) {
  ad::ParamStore<double> sd;
  ad::ParamStore<float> sf;
  Rng rd(43), rf(43);
  layers::HfgaBlock<double> bd(sd, "hfga", 12, 0, rd);
  layers::HfgaBlock<float> bf(sf, "hfga", 12, 0, rf);
  bd.gate()->val.v[0] = 0.3;
  bf.gate()->val.v[0] = 0.3f;

  Rng data_rng(8);
  const auto x = rand_tensor({12, 14}, data_rng);
  const auto w = rand_tensor({12, 14}, data_rng);

  auto loss_d = [&](ad::Tape<double>& tape) {
    RunContext<double> ctx{tape, true};
    auto out = bd.forward(ctx, ad::make_leaf(tape, x, false));
    return ad::sum_all(ad::mul(out, ad::make_leaf(tape, w, false)));
  };
  auto loss_f = [&](ad::Tape<float>& tape) {
    RunContext<float> ctx{tape, true};
    auto out = bf.forward(ctx, ad::make_leaf(tape, x.cast<float>(), false));
    return ad::sum_all(ad::mul(out, ad::make_leaf(tape, w.cast<float>(), false)));
  };

  Rng probe_rng(100);
  check_params(rep, "hfga_block params", sd, sf, {{"", 24}}, probe_rng, loss_d, loss_f);
}

void check_end_to_end(GradCheckReport& rep) {
  ModelConfig cfg;
  cfg.dropout = 0.0;
  cfg.num_writers = 2;
  DolphinModel<double> md(cfg, 4242);
  DolphinModel<float> mf(cfg, 4242);
  // Open the attention gates so the frequency path carries gradient.
  for (auto& b : md.frequency_network().blocks()) b.gate()->val.v[0] = 0.2;
  for (auto& b : mf.frequency_network().blocks()) b.gate()->val.v[0] = 0.2f;

  Rng data_rng(11);
  FeatureMatrix feat;
  feat.rows = 64;
  feat.values.resize(64 * FeatureMatrix::kChannels);
  for (auto& v : feat.values) v = data_rng.uniform(-1.0, 1.0);
  const int d1 = cfg.embedding_dim();
  const Tensor<double> wt = rand_tensor({d1}, data_rng);
  const Tensor<double> wf = rand_tensor({d1}, data_rng);
  const Tensor<double> wl = rand_tensor({cfg.num_writers}, data_rng);

  // One full forward, scalarized against fixed weights over all three outputs.
  auto build = [&](auto& model, auto& tape) {
    using St = std::remove_cvref_t<decltype(model.params().entry(0).node->val.v[0])>;
    RunContext<St> ctx{tape, true};
    auto out = model.forward(ctx, feat);
    auto dot = [&](Var<St> a, const Tensor<double>& w) {
      return ad::sum_all(ad::mul(a, ad::make_leaf(tape, w.template cast<St>(), false)));
    };
    return ad::add(ad::add(dot(out.f_t, wt), dot(out.f_f, wf)), dot(out.logits, wl));
  };
  auto loss_d = [&](ad::Tape<double>& tape) { return build(md, tape); };
  auto loss_f = [&](ad::Tape<float>& tape) { return build(mf, tape); };

  Rng probe_rng(123);
  check_params(rep, "end_to_end 64-length", md.params(), mf.params(),
               {{"stem.", 20},
                {"backbone.", 20},
                {"freq.hfga", 20},
                {"freq.proj", 20},
                {"fpn.", 20},
                {"head.", 20}},
               probe_rng, loss_d, loss_f);
}

}  // namespace

GradCheckReport run_gradient_checks() {
  GradCheckReport rep;
  check_elementwise_ops(rep);
  check_shape_ops(rep);
  check_linalg_ops(rep);
  check_softmax_ops(rep);
  check_sequence_ops(rep);
  check_losses(rep);
  check_cair_block(rep);
  check_hfga_block(rep);
  check_end_to_end(rep);
  return rep;
}

}  // namespace inkline

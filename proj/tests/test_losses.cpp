#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "inkline/common.hpp"
#include "inkline/losses.hpp"

using namespace inkline;
using ad::Tensor;
using ad::Var;

namespace {

Tensor<double> vec(std::initializer_list<double> vals) {
  std::vector<double> v(vals);
  return Tensor<double>({static_cast<int>(v.size())}, v);
}

Tensor<double> randn(std::vector<int> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.v) v = rng.normal();
  return t;
}

/// Direct scalar evaluation of the circle objective from the pairwise cosine
/// similarities (independent of the autodiff path).
double circle_oracle(const std::vector<Tensor<double>>& embeddings,
                     const std::vector<int>& labels, double m, double gamma) {
  const std::size_t B = embeddings.size();
  std::vector<std::vector<double>> unit(B);
  for (std::size_t i = 0; i < B; ++i) {
    double norm = 0.0;
    for (double v : embeddings[i].v) norm += v * v;
    norm = std::sqrt(norm);
    for (double v : embeddings[i].v) unit[i].push_back(v / norm);
  }
  double sum_pos = 0.0, sum_neg = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < unit[i].size(); ++d) s += unit[i][d] * unit[j][d];
      if (labels[i] == labels[j]) {
        const double alpha = std::max(0.0, 1.0 + m - s);
        sum_pos += std::exp(-gamma * alpha * (s - (1.0 - m)));
      } else {
        const double alpha = std::max(0.0, s + m);
        sum_neg += std::exp(gamma * alpha * (s - m));
      }
    }
  return std::log(1.0 + sum_neg * sum_pos);
}

std::vector<Var<double>> as_leaves(ad::Tape<double>& tape,
                                   const std::vector<Tensor<double>>& ts,
                                   bool grad = false) {
  std::vector<Var<double>> out;
  for (const auto& t : ts) out.push_back(ad::make_leaf(tape, t, grad));
  return out;
}

}  // namespace

TEST_CASE("circle loss: aligned positive and antipodal negatives, by direct evaluation") {
  // cos(pos) = 1, cos(neg) = -1 twice: alpha_p = 0.25, both negative terms
  // have alpha_n = 0, so the objective is log(1 + 2 * exp(-2)).
  std::vector<Tensor<double>> e{vec({2.0, 0.0}), vec({0.5, 0.0}), vec({-3.0, 0.0})};
  const std::vector<int> labels{0, 0, 1};
  ad::Tape<double> tape;
  auto loss = circle_loss(as_leaves(tape, e), labels);
  REQUIRE(loss.has_value());
  const double expected = std::log(1.0 + 2.0 * std::exp(-2.0));
  CHECK(loss->val().v[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(loss->val().v[0] == doctest::Approx(circle_oracle(e, labels, 0.25, 32.0)).epsilon(1e-12));
}

TEST_CASE("circle loss matches the scalar oracle on random batches") {
  Rng rng(100);
  for (int iter = 0; iter < 50; ++iter) {
    const int B = rng.uniform_int(2, 8);
    std::vector<Tensor<double>> e;
    std::vector<int> labels;
    for (int i = 0; i < B; ++i) {
      e.push_back(randn({6}, rng));
      labels.push_back(rng.uniform_int(0, 2));
    }
    ad::Tape<double> tape;
    auto loss = circle_loss(as_leaves(tape, e), labels);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = i + 1; j < labels.size(); ++j)
        (labels[i] == labels[j] ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) {
      CHECK_FALSE(loss.has_value());
      continue;
    }
    REQUIRE(loss.has_value());
    CHECK(loss->val().v[0] ==
          doctest::Approx(circle_oracle(e, labels, 0.25, 32.0)).epsilon(1e-9));
    CHECK(loss->val().v[0] >= 0.0);
  }
}

TEST_CASE("circle loss limit: gamma -> 0 gives log(1 + |P||N|)") {
  std::vector<Tensor<double>> e{vec({1.0, 0.2}), vec({0.3, 1.0}), vec({-1.0, 0.4})};
  const std::vector<int> labels{0, 0, 1};  // one positive, two negative pairs
  ad::Tape<double> tape;
  auto loss = circle_loss(as_leaves(tape, e), labels, CircleParams{0.25, 1e-12});
  REQUIRE(loss.has_value());
  CHECK(loss->val().v[0] == doctest::Approx(std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("circle loss is permutation and scale invariant") {
  Rng rng(101);
  std::vector<Tensor<double>> e;
  std::vector<int> labels{0, 1, 0, 1, 2};
  for (int i = 0; i < 5; ++i) e.push_back(randn({5}, rng));

  ad::Tape<double> tape;
  auto base = circle_loss(as_leaves(tape, e), labels);

  std::vector<Tensor<double>> perm{e[3], e[0], e[4], e[2], e[1]};
  std::vector<int> perm_labels{1, 0, 2, 0, 1};
  auto permuted = circle_loss(as_leaves(tape, perm), perm_labels);
  CHECK(base->val().v[0] == doctest::Approx(permuted->val().v[0]).epsilon(1e-12));

  std::vector<Tensor<double>> scaled = e;
  for (auto& t : scaled)
    for (auto& v : t.v) v *= 7.5;
  auto scaled_loss = circle_loss(as_leaves(tape, scaled), labels);
  CHECK(base->val().v[0] == doctest::Approx(scaled_loss->val().v[0]).epsilon(1e-9));
}

TEST_CASE("circle loss skip-batch signal") {
  ad::Tape<double> tape;
  std::vector<Tensor<double>> e{vec({1, 0}), vec({0, 1})};
  CHECK_FALSE(circle_loss(as_leaves(tape, e), {0, 0}).has_value());  // no negatives
  CHECK_FALSE(circle_loss(as_leaves(tape, e), {0, 1}).has_value());  // no positives
}

TEST_CASE("oim loss with one-hot lookup rows follows the closed-form softmax") {
  OimState<double> state;
  state.lookup = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  ad::Tape<double> tape;
  std::vector<Tensor<double>> f{vec({1.0, 0.0, 0.0})};
  auto loss = oim_loss(as_leaves(tape, f), {0}, state);
  // logits = (1, 0, 0): -log softmax_0 = log(1 + 2 e^{-1}).
  const double expected = std::log(1.0 + 2.0 * std::exp(-1.0));
  CHECK(loss.val().v[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("oim momentum 1 freezes the lookup; rows stay unit after updates") {
  Rng rng(102);
  OimState<double> frozen = OimState<double>::random_init(4, 6, 55);
  frozen.momentum = 1.0;
  const Tensor<double> before = frozen.lookup;
  ad::Tape<double> tape;
  std::vector<Tensor<double>> f{randn({6}, rng)};
  oim_loss(as_leaves(tape, f), {2}, frozen);
  for (std::size_t i = 0; i < before.v.size(); ++i)
    CHECK(frozen.lookup.v[i] == doctest::Approx(before.v[i]).epsilon(1e-12));

  OimState<double> state = OimState<double>::random_init(4, 6, 56);
  for (int iter = 0; iter < 1000; ++iter) {
    Tensor<double> sample = randn({6}, rng);
    double norm = 0.0;
    for (double v : sample.v) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : sample.v) v /= norm;
    state.update_row(rng.uniform_int(0, 3), sample.data());
  }
  for (int r = 0; r < 4; ++r) {
    double norm = 0.0;
    for (int c = 0; c < 6; ++c) {
      const double v = state.lookup.v[static_cast<std::size_t>(r * 6 + c)];
      norm += v * v;
    }
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
  }
}

TEST_CASE("oim: identical samples get identical per-sample losses") {
  Rng rng(103);
  OimState<double> state = OimState<double>::random_init(3, 5, 57);
  const Tensor<double> f = randn({5}, rng);
  ad::Tape<double> tape;
  OimState<double> s1 = state;
  auto single = oim_loss(as_leaves(tape, {f}), {1}, s1);
  OimState<double> s2 = state;
  auto doubled = oim_loss(as_leaves(tape, {f, f}), {1, 1}, s2);
  CHECK(doubled.val().v[0] == doctest::Approx(single.val().v[0]).epsilon(1e-12));
}

TEST_CASE("oim rejects out-of-range labels") {
  OimState<double> state = OimState<double>::random_init(3, 4, 58);
  ad::Tape<double> tape;
  std::vector<Tensor<double>> f{vec({1, 0, 0, 0})};
  CHECK_THROWS(oim_loss(as_leaves(tape, f), {3}, state));
}

TEST_CASE("id loss with no smoothing equals plain cross entropy") {
  Rng rng(104);
  for (int iter = 0; iter < 20; ++iter) {
    Tensor<double> logits = randn({6}, rng);
    const int label = rng.uniform_int(0, 5);
    ad::Tape<double> tape;
    auto loss = id_loss(as_leaves(tape, {logits}), {label}, IdParams{0.0});
    double lse = 0.0, mx = logits.v[0];
    for (double v : logits.v) mx = std::max(mx, v);
    for (double v : logits.v) lse += std::exp(v - mx);
    const double expected = -(logits.v[static_cast<std::size_t>(label)] - mx - std::log(lse));
    CHECK(loss.val().v[0] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("id loss on uniform logits is log(N) for any smoothing") {
  ad::Tape<double> tape;
  Tensor<double> logits = Tensor<double>::full({5}, 0.3);
  for (double eps : {0.0, 0.1, 0.4}) {
    auto loss = id_loss(as_leaves(tape, {logits}), {2}, IdParams{eps});
    CHECK(loss.val().v[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
}

TEST_CASE("id loss scalar oracle: eps 0.1, 4 classes, peaked logits") {
  ad::Tape<double> tape;
  Tensor<double> logits = vec({10.0, 0.0, 0.0, 0.0});
  auto loss = id_loss(as_leaves(tape, {logits}), {0}, IdParams{0.1});
  // Smoothed target (0.9, 1/30, 1/30, 1/30) against log softmax.
  double lse = 0.0;
  for (double v : logits.v) lse += std::exp(v - 10.0);
  const double ls0 = -std::log(lse);
  const double ls_other = -10.0 - std::log(lse);
  const double expected = -(0.9 * ls0 + 3.0 * (0.1 / 3.0) * ls_other);
  CHECK(loss.val().v[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("id loss gradient vanishes at the smoothed target distribution") {
  const int n = 4;
  const double eps = 0.1;
  std::vector<double> target(n, eps / (n - 1));
  target[1] = 1.0 - eps;
  Tensor<double> logits({n});
  for (int i = 0; i < n; ++i) logits.v[static_cast<std::size_t>(i)] = std::log(target[static_cast<std::size_t>(i)]);
  ad::Tape<double> tape;
  auto leaf = ad::make_leaf(tape, logits, true);
  auto loss = id_loss(std::vector<Var<double>>{leaf}, {1}, IdParams{eps});
  ad::backward(loss.node);
  for (int i = 0; i < n; ++i) CHECK(std::abs(leaf.node->grad.v[static_cast<std::size_t>(i)]) <= 1e-9);
}

TEST_CASE("total loss equals the sum of its parts") {
  Rng rng(105);
  std::vector<Tensor<double>> ft, ff, lg;
  std::vector<int> labels{0, 0, 1, 1};
  for (int i = 0; i < 4; ++i) {
    ft.push_back(randn({5}, rng));
    ff.push_back(randn({5}, rng));
    lg.push_back(randn({2}, rng));
  }
  OimState<double> state = OimState<double>::random_init(2, 5, 59);

  ad::Tape<double> tape;
  OimState<double> s_total = state;
  auto breakdown = total_loss(as_leaves(tape, ft), as_leaves(tape, ff),
                              as_leaves(tape, lg), labels, s_total);
  REQUIRE(breakdown.has_value());

  OimState<double> s_again = state;
  auto c = circle_loss(as_leaves(tape, ft), labels);
  auto o = oim_loss(as_leaves(tape, ff), labels, s_again);
  auto d = id_loss(as_leaves(tape, lg), labels);
  const double sum = c->val().v[0] + o.val().v[0] + d.val().v[0];
  CHECK(breakdown->total.val().v[0] == doctest::Approx(sum).epsilon(1e-12));
  CHECK(breakdown->circle == doctest::Approx(c->val().v[0]));
  CHECK(breakdown->oim == doctest::Approx(o.val().v[0]));
  CHECK(breakdown->id == doctest::Approx(d.val().v[0]));
}

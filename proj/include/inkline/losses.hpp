#pragma once

#include <optional>
#include <vector>

#include "inkline/autodiff.hpp"
#include "inkline/common.hpp"

namespace inkline {

struct CircleParams {
  double m = 0.25;
  double gamma = 32.0;
};

struct IdParams {
  double epsilon = 0.1;
};

/// Momentum-updated lookup table of per-writer prototypes; rows stay unit
/// norm. The update is not differentiated.
template <typename S>
struct OimState {
  ad::Tensor<S> lookup;  // {num_writers, dim}
  double momentum = 0.5;

  static OimState random_init(int num_writers, int dim, std::uint64_t seed) {
    OimState st;
    st.lookup = ad::Tensor<S>({num_writers, dim});
    Rng rng(seed);
    for (int r = 0; r < num_writers; ++r) {
      double norm = 0.0;
      S* row = st.lookup.data() + static_cast<std::size_t>(r) * dim;
      for (int c = 0; c < dim; ++c) {
        row[c] = static_cast<S>(rng.normal());
        norm += static_cast<double>(row[c]) * static_cast<double>(row[c]);
      }
      const S inv = static_cast<S>(1.0 / std::sqrt(std::max(norm, 1e-30)));
      for (int c = 0; c < dim; ++c) row[c] *= inv;
    }
    return st;
  }

  void update_row(int label, const S* f) {
    const int dim = lookup.dim(1);
    S* row = lookup.data() + static_cast<std::size_t>(label) * dim;
    double norm = 0.0;
    for (int c = 0; c < dim; ++c) {
      row[c] = static_cast<S>(momentum * row[c] + (1.0 - momentum) * f[c]);
      norm += static_cast<double>(row[c]) * static_cast<double>(row[c]);
    }
    const S inv = static_cast<S>(1.0 / std::sqrt(std::max(norm, 1e-30)));
    for (int c = 0; c < dim; ++c) row[c] *= inv;
  }
};

/// Circle loss over all within-batch pairs of cosine similarities, computed
/// through a log-sum-exp form so large gamma stays finite. Returns nothing
/// when the batch lacks a positive or a negative pair (skip-batch signal).
/// Embeddings are normalized inside the loss.
template <typename S>
std::optional<ad::Var<S>> circle_loss(const std::vector<ad::Var<S>>& embeddings,
                                      const std::vector<int>& labels,
                                      const CircleParams& p = {}) {
  const std::size_t B = embeddings.size();
  if (B < 2 || labels.size() != B) return std::nullopt;
  std::vector<std::pair<int, int>> pos, neg;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j)
      (labels[i] == labels[j] ? pos : neg)
          .emplace_back(static_cast<int>(i), static_cast<int>(j));
  if (pos.empty() || neg.empty()) return std::nullopt;

  std::vector<ad::Var<S>> normalized;
  normalized.reserve(B);
  for (const auto& e : embeddings) normalized.push_back(ad::l2_normalize(e));
  ad::Var<S> E = ad::stack_rows(normalized);
  ad::Var<S> sims = ad::matmul(E, ad::transpose(E));

  ad::Var<S> sp = ad::gather2d(sims, pos);
  ad::Var<S> sn = ad::gather2d(sims, neg);

  // alpha_p = [1 + m - s_p]_+, alpha_n = [s_n + m]_+ (Eq. hinges, no detach).
  ad::Var<S> alpha_p = ad::relu(ad::add_const(ad::scale(sp, -1.0), 1.0 + p.m));
  ad::Var<S> alpha_n = ad::relu(ad::add_const(sn, p.m));
  // delta_p = 1 - m, delta_n = m.
  ad::Var<S> tp = ad::scale(ad::mul(alpha_p, ad::add_const(sp, -(1.0 - p.m))), -p.gamma);
  ad::Var<S> tn = ad::scale(ad::mul(alpha_n, ad::add_const(sn, -p.m)), p.gamma);
  return ad::softplus(ad::add(ad::logsumexp_vec(tn), ad::logsumexp_vec(tp)));
}

/// OIM loss: softmax of similarities against the lookup table, negative log
/// likelihood of the writer row, batch mean. The lookup rows of the batch
/// labels are refreshed afterwards with the (normalized) frequency embeddings.
template <typename S>
ad::Var<S> oim_loss(const std::vector<ad::Var<S>>& f_f, const std::vector<int>& labels,
                    OimState<S>& state) {
  if (f_f.empty() || labels.size() != f_f.size())
    throw std::runtime_error("oim loss: empty batch or label mismatch");
  ad::Tape<S>& tape = *f_f[0].tape;
  const int n_classes = state.lookup.dim(0);
  ad::Var<S> table = ad::make_leaf(tape, state.lookup, false);

  std::vector<ad::Var<S>> terms;
  std::vector<ad::Var<S>> normalized;
  for (std::size_t i = 0; i < f_f.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes)
      throw std::runtime_error("oim loss: label " + std::to_string(labels[i]) +
                               " out of range for " + std::to_string(n_classes) +
                               " writers");
    ad::Var<S> fn = ad::l2_normalize(f_f[i]);
    normalized.push_back(fn);
    ad::Var<S> logits = ad::matvec(table, fn);
    terms.push_back(ad::scale(ad::pick(ad::log_softmax_vec(logits), labels[i]), -1.0));
  }
  ad::Var<S> loss = ad::scale(ad::add_n(terms), 1.0 / static_cast<double>(terms.size()));
  for (std::size_t i = 0; i < f_f.size(); ++i)
    state.update_row(labels[i], normalized[i].val().data());
  return loss;
}

/// Label-smoothed cross entropy over writer logits, batch mean.
template <typename S>
ad::Var<S> id_loss(const std::vector<ad::Var<S>>& logits, const std::vector<int>& labels,
                   const IdParams& p = {}) {
  if (logits.empty() || labels.size() != logits.size())
    throw std::runtime_error("id loss: empty batch or label mismatch");
  const int n_classes = logits[0].val().dim(0);
  if (n_classes < 2) throw std::runtime_error("id loss: needs >= 2 classes");
  const double off = p.epsilon / static_cast<double>(n_classes - 1);
  std::vector<ad::Var<S>> terms;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    ad::Var<S> ls = ad::log_softmax_vec(logits[i]);
    ad::Var<S> target_term = ad::scale(ad::pick(ls, labels[i]), -(1.0 - p.epsilon - off));
    ad::Var<S> uniform_term = ad::scale(ad::sum_all(ls), -off);
    terms.push_back(ad::add(target_term, uniform_term));
  }
  return ad::scale(ad::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

template <typename S>
struct LossBreakdown {
  ad::Var<S> total;
  double circle = 0.0;
  double oim = 0.0;
  double id = 0.0;
};

/// Unweighted sum of the three objectives; empty when circle signals a skip.
template <typename S>
std::optional<LossBreakdown<S>> total_loss(const std::vector<ad::Var<S>>& f_t,
                                           const std::vector<ad::Var<S>>& f_f,
                                           const std::vector<ad::Var<S>>& logits,
                                           const std::vector<int>& labels,
                                           OimState<S>& oim_state,
                                           const CircleParams& circle_p = {},
                                           const IdParams& id_p = {}) {
  auto circ = circle_loss(f_t, labels, circle_p);
  if (!circ) return std::nullopt;
  ad::Var<S> oim = oim_loss(f_f, labels, oim_state);
  ad::Var<S> id = id_loss(logits, labels, id_p);
  LossBreakdown<S> out{ad::add(ad::add(*circ, oim), id),
                       static_cast<double>(circ->val().v[0]),
                       static_cast<double>(oim.val().v[0]),
                       static_cast<double>(id.val().v[0])};
  return out;
}

}  // namespace inkline

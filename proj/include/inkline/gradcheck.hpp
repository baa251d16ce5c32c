#pragma once

#include <functional>
#include <string>
#include <vector>

#include "inkline/autodiff.hpp"
#include "inkline/losses.hpp"
#include "inkline/model.hpp"

namespace inkline {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;

  bool all_pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return true;
  }
};

namespace gradcheck_detail {

/// Per-coordinate relative error, floored at the gradient scale of the whole
/// leaf so near-zero coordinates are judged in absolute terms at that scale.
inline double rel_err(double analytic, double fd, double scale) {
  const double denom = std::max({std::abs(analytic), std::abs(fd), scale, 1e-12});
  return std::abs(analytic - fd) / denom;
}

inline double grad_scale(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s = std::max(s, std::abs(x));
  return s > 0.0 ? s : 1e-6;
}

/// Analytic leaf gradients of a scalar scenario built by `build` in scalar
/// type S, at the given (double-valued) leaf inputs.
template <typename S, typename Build>
std::vector<ad::Tensor<double>> analytic_grads(const std::vector<ad::Tensor<double>>& inputs,
                                               Build&& build) {
  ad::Tape<S> tape;
  std::vector<ad::Var<S>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs)
    leaves.push_back(ad::make_leaf(tape, t.template cast<S>(), true));
  ad::Var<S> loss = build(tape, leaves);
  if (loss.val().numel() != 1) throw std::runtime_error("gradcheck scenario must be scalar");
  ad::backward(loss.node);
  std::vector<ad::Tensor<double>> grads;
  for (auto& l : leaves) {
    if (l.node->grad.v.empty())
      grads.push_back(ad::Tensor<double>::zeros(l.val().shape));
    else
      grads.push_back(l.node->grad.template cast<double>());
  }
  return grads;
}

template <typename Build>
double scenario_value(const std::vector<ad::Tensor<double>>& inputs, Build&& build) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(ad::make_leaf(tape, t, false));
  return build(tape, leaves).val().v[0];
}

/// Central finite differences over every element of every leaf input.
template <typename Build>
std::vector<ad::Tensor<double>> fd_grads(std::vector<ad::Tensor<double>> inputs,
                                         Build&& build, double h) {
  std::vector<ad::Tensor<double>> grads;
  for (std::size_t li = 0; li < inputs.size(); ++li) {
    ad::Tensor<double> g = ad::Tensor<double>::zeros(inputs[li].shape);
    for (std::size_t k = 0; k < inputs[li].v.size(); ++k) {
      const double orig = inputs[li].v[k];
      inputs[li].v[k] = orig + h;
      const double fp = scenario_value(inputs, build);
      inputs[li].v[k] = orig - h;
      const double fm = scenario_value(inputs, build);
      inputs[li].v[k] = orig;
      g.v[k] = (fp - fm) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace gradcheck_detail

/// Checks one op scenario: double-engine analytic gradients against double
/// central differences (tolerance 1e-6), and float-engine analytic gradients
/// against the same reference (tolerance 1e-4).
template <typename Build>
void check_scenario(GradCheckReport& report, const std::string& name,
                    const std::vector<ad::Tensor<double>>& inputs, Build&& build,
                    double h = 1e-6) {
  namespace gd = gradcheck_detail;
  const auto fd = gd::fd_grads(inputs, build, h);
  const auto an_d = gd::analytic_grads<double>(inputs, build);
  const auto an_f = gd::analytic_grads<float>(inputs, build);

  double err_d = 0.0, err_f = 0.0;
  for (std::size_t li = 0; li < fd.size(); ++li) {
    const double scale = gd::grad_scale(fd[li].v);
    for (std::size_t k = 0; k < fd[li].v.size(); ++k) {
      err_d = std::max(err_d, gd::rel_err(an_d[li].v[k], fd[li].v[k], scale));
      err_f = std::max(err_f, gd::rel_err(an_f[li].v[k], fd[li].v[k], scale));
    }
  }
  report.results.push_back({name + " [f64]", err_d, 1e-6, err_d < 1e-6});
  report.results.push_back({name + " [f32]", err_f, 1e-4, err_f < 1e-4});
}

/// Runs finite-difference checks for every registered op, the CAIR and HFGA
/// blocks, all three losses, and one end-to-end 64-length forward.
GradCheckReport run_gradient_checks();

}  // namespace inkline

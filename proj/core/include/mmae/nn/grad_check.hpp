#pragma once

// Central finite-difference verification of analytic gradients. Runs in
// double precision; the callable rebuilds the graph from the current
// parameter values on every invocation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/nn/tensor.hpp"

namespace mmae::nn {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;
};

// rel = |a - n| / max(1e-8, |a| + |n|)
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// Per coordinate the step is picked from `steps` by closest agreement with
// the analytic value: small h is roundoff-limited on near-zero gradients,
// large h is truncation-limited where the perturbation crosses a ReLU kink,
// and no single step serves both regimes (classic adaptive-step central FD).
inline GradCheckReport grad_check(
    const std::function<Tensor<double>()>& f,
    std::vector<std::pair<std::string, Tensor<double>>> params,
    std::vector<double> steps) {
  if (steps.empty()) throw ConfigError("grad_check: no step sizes");
  for (auto& [name, p] : params) p.zero_grad();
  Tensor<double> loss = f();
  if (!std::isfinite(loss.item()))
    throw NonFiniteLoss("grad_check: loss not finite");
  backward(loss);

  std::vector<std::vector<double>> analytic(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    if (p.has_grad())
      analytic[i].assign(p.raw()->grad.begin(), p.raw()->grad.end());
    else
      analytic[i].assign(p.numel(), 0.0);
    p.zero_grad();
  }

  GradCheckReport rep;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& val = params[i].second.data();
    for (size_t j = 0; j < val.size(); ++j) {
      double orig = val[j];
      double a = analytic[i][j];
      double numeric = 0.0;
      bool first = true;
      for (double h : steps) {
        double fp, fm;
        {
          NoGradGuard ng;
          val[j] = orig + h;
          fp = f().item();
          val[j] = orig - h;
          fm = f().item();
        }
        val[j] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
          throw NonFiniteLoss("grad_check: perturbed loss not finite");
        double n = (fp - fm) / (2.0 * h);
        if (first || std::abs(a - n) < std::abs(a - numeric)) numeric = n;
        first = false;
      }
      double rel = grad_rel_err(a, numeric);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[i].first;
        rep.worst_index = static_cast<int64_t>(j);
      }
      rep.max_abs_err = std::max(rep.max_abs_err, std::abs(a - numeric));
      ++rep.coords_checked;
    }
  }
  return rep;
}

inline GradCheckReport grad_check(
    const std::function<Tensor<double>()>& f,
    std::vector<std::pair<std::string, Tensor<double>>> params,
    double h = 1e-4) {
  return grad_check(f, std::move(params), std::vector<double>{h});
}

}  // namespace mmae::nn

#pragma once

// Central finite-difference check of analytic gradients. The loss closure
// must be deterministic in the parameters (dropout off or seed-pinned).

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "slotnav/nn.hpp"
#include "slotnav/tensor.hpp"

namespace slotnav {

struct GradCheckEntry {
  std::string path;
  double max_rel_err = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string worst_path;
};

/// Relative error with a floor so that near-zero gradient pairs compare on
/// an absolute scale.
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// loss_fn rebuilds the autodiff graph from the current parameter values and
/// returns the scalar loss. sign_flip, when set, negates the analytic
/// gradient of that parameter path before comparison (negative-control hook).
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                         ParamStore& params, double step, double tolerance,
                                         const std::string& sign_flip = "") {
  GradCheckReport report;
  params.zero_grads();
  backward(loss_fn());
  std::map<std::string, std::vector<double>> analytic;
  for (auto& [path, t] : params) analytic[path] = t.grad();
  if (!sign_flip.empty()) {
    auto it = analytic.find(sign_flip);
    if (it == analytic.end())
      throw std::invalid_argument("finite_diff_check: unknown sign_flip path " + sign_flip);
    for (auto& g : it->second) g = -g;
  }

  const auto eval = [&]() -> double {
    NoGradGuard ng;
    return loss_fn().item();
  };

  for (auto& [path, t] : params) {
    GradCheckEntry entry;
    entry.path = path;
    auto& vals = t.value();
    const auto& g = analytic[path];
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double lp = eval();
      vals[i] = keep - step;
      const double lm = eval();
      vals[i] = keep;
      const double numeric = (lp - lm) / (2.0 * step);
      if (!std::isfinite(numeric) || !std::isfinite(g[i])) {
        entry.finite = false;
        entry.max_rel_err = std::numeric_limits<double>::infinity();
        break;
      }
      entry.max_rel_err = std::max(entry.max_rel_err, grad_rel_err(g[i], numeric));
    }
    if (entry.max_rel_err > report.max_rel_err || report.entries.empty()) {
      report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
      if (entry.max_rel_err >= report.max_rel_err) report.worst_path = path;
    }
    report.entries.push_back(std::move(entry));
  }
  report.passed = std::isfinite(report.max_rel_err) && report.max_rel_err < tolerance;
  return report;
}

}  // namespace slotnav

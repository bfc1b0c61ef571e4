// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "convstyle/autodiff.hpp"

namespace convstyle {

/// A differentiable scalar objective of a parameter set. It must build its
/// graph on the supplied tape and return a length-1 value.
using ScalarObjective = std::function<Var(Tape&, ParamStore&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
  std::size_t kinks_refined = 0;
};

inline double relative_gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline double evaluate_objective(const ScalarObjective& f, ParamStore& params) {
  Tape tape;
  const double v = f(tape, params).value().item();
  if (!std::isfinite(v)) throw NumericError("gradient check: objective is not finite");
  return v;
}

struct GradCheckOptions {
  /// When > 0, tensors with more entries are checked on a seeded random subset.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0;
  /// Expected ratio analytic / numeric; -lambda for a gradient reversal.
  double numeric_scale = 1.0;
  /// Failing entries are re-estimated at eps / 10. If that estimate moves
  /// away from the eps one, a relu kink sits inside [x - eps, x + eps] and the
  /// one-sided difference from the smooth side is used instead. A genuine
  /// gradient bug survives the refinement.
  bool refine_kinks = true;
};

/// Compare taped gradients of `f` at `point` against central differences.
/// Returns the worst entry by |a - n| / max(1e-8, |a| + |n|).
inline GradCheckResult gradient_check(const ScalarObjective& f, ParamStore point, double eps,
                                      const GradCheckOptions& opt = {}) {
  if (!(eps > 0.0)) throw ConfigError("gradient check: eps must be positive");
  point.zero_grad();
  {
    Tape tape;
    Var loss = f(tape, point);
    if (!std::isfinite(loss.value().item()))
      throw NumericError("gradient check: objective is not finite");
    tape.backward(loss);
  }
  const double f0 = evaluate_objective(f, point);
  GradCheckResult res;
  for (const auto& name : point.names()) {
    Tensor& value = point.value(name);
    const Tensor analytic = point.grad(name);
    std::vector<std::size_t> entries(value.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (opt.max_entries_per_param > 0 && entries.size() > opt.max_entries_per_param) {
      Rng rng(hash_string(opt.sample_seed, name));
      rng.shuffle(entries);
      entries.resize(opt.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    for (const std::size_t i : entries) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = evaluate_objective(f, point);
      value[i] = saved - eps;
      const double down = evaluate_objective(f, point);
      value[i] = saved;
      double numeric = opt.numeric_scale * (up - down) / (2.0 * eps);
      double err = relative_gradient_error(analytic[i], numeric);
      if (opt.refine_kinks && err >= 1e-4) {
        const double fine = eps / 10.0;
        value[i] = saved + fine;
        const double up2 = evaluate_objective(f, point);
        value[i] = saved - fine;
        const double down2 = evaluate_objective(f, point);
        value[i] = saved;
        const double numeric2 = opt.numeric_scale * (up2 - down2) / (2.0 * fine);
        // Smooth objectives agree across the two step sizes to O(eps^2), up
        // to cancellation roundoff of order |f| * 2^-52 / step.
        const double roundoff = 1e3 * std::abs(f0) * std::numeric_limits<double>::epsilon() / fine;
        if (relative_gradient_error(numeric, numeric2) > 1e-4 && std::abs(numeric - numeric2) > roundoff) {
          // The kink lies on the side whose one-sided slope changes with the
          // step; the other side is smooth and gives the derivative.
          const double fwd1 = (up - f0) / eps, fwd2 = (up2 - f0) / fine;
          const double bwd1 = (f0 - down) / eps, bwd2 = (f0 - down2) / fine;
          const bool use_fwd = std::abs(fwd1 - fwd2) <= std::abs(bwd1 - bwd2);
          numeric = opt.numeric_scale * (use_fwd ? fwd2 : bwd2);
          err = relative_gradient_error(analytic[i], numeric);
          ++res.kinks_refined;
        }
      }
      ++res.entries_checked;
      if (res.worst_param.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = name;
        res.worst_index = i;
        res.analytic = analytic[i];
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace convstyle

#pragma once

// Central finite-difference gradient verification. Only the forward value of
// the loss is used, so the check is independent of the backward closures.

#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "cadg/tensor.hpp"

namespace cadg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the gradients already accumulated in `params` against central
/// differences of `loss_fn` with step `h`. Parameter values are restored.
inline GradCheckResult check_gradients(std::span<Tensor> params,
                                       const std::function<double()>& loss_fn, double h = 1e-4,
                                       double floor = 1e-6) {
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].data();
    auto grad = params[p].grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn();
      data[i] = saved - h;
      const double down = loss_fn();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(grad[i], numeric, floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p;
        result.worst_index = i;
      }
      ++result.entries_checked;
    }
  }
  return result;
}

}  // namespace cadg

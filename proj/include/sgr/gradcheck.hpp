// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgr/tape.hpp"

namespace sgr {

// ‖a − b‖ / max(‖a‖, ‖b‖), with 0 when both vanish.
inline double relative_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "relative_error");
  const double den = std::max(norm(a), norm(b));
  if (den == 0.0) return 0.0;
  return norm(sub(a, b)) / den;
}

struct GradCheck {
  double rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// Compares `analytic` against central differences of f. When `kinks` is
// given, coordinates whose ±margin perturbation flips the returned ReLU
// pattern are skipped and excluded from the comparison.
inline GradCheck check_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                const Tensor& analytic, double h = 1e-5,
                                const std::function<std::vector<char>(const Tensor&)>& kinks = {},
                                double margin = 1e-3) {
  require_same_shape(x, analytic, "check_gradient");
  GradCheck out;
  std::vector<char> keep(x.size(), 1);
  if (kinks) {
    const std::vector<char> base = kinks(x);
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = xp[i];
      xp[i] = orig + margin;
      const bool flip_up = kinks(xp) != base;
      xp[i] = orig - margin;
      const bool flip_dn = kinks(xp) != base;
      xp[i] = orig;
      if (flip_up || flip_dn) keep[i] = 0;
    }
  }
  Tensor numeric = finite_diff_grad(f, x, h);
  Tensor a_kept(Shape{x.size()}), n_kept(Shape{x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep[i]) {
      ++out.skipped;
      continue;
    }
    a_kept[i] = analytic[i];
    n_kept[i] = numeric[i];
    ++out.checked;
  }
  out.rel_err = relative_error(a_kept, n_kept);
  return out;
}

}  // namespace sgr

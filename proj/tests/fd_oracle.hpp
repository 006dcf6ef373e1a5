#pragma once

// Central finite-difference gradient oracle, independent of the autodiff tape.

#include <algorithm>
#include <cmath>
#include <functional>

#include "smi/tensor/tensor.hpp"

namespace smi::testing {

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-6) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (Index i = 0; i < x.numel(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i − b_i| / max |b|: relative to the gradient scale, so
/// near-zero components do not blow up the ratio.
inline double max_rel_error(const Tensor& analytic, const Tensor& numeric) {
  double scale = 1e-12;
  for (double v : numeric.values()) scale = std::max(scale, std::abs(v));
  double worst = 0.0;
  for (Index i = 0; i < numeric.numel(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace smi::testing

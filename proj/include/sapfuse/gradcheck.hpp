#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "sapfuse/ops.hpp"

namespace sapfuse {

template <typename T>
using ScalarFunction = std::function<double(const BasicTensor<T>&)>;

/// Central-difference check of an analytic gradient.
///
/// Returns max_i |analytic_i − numeric_i| / max(1e-8, |numeric_i|) with
/// numeric_i = (f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps).
template <typename T>
double check_gradient(const ScalarFunction<T>& f, const BasicTensor<T>& analytic,
                      const BasicTensor<T>& x, double eps) {
  if (analytic.shape() != x.shape()) {
    throw DimensionError("check_gradient: gradient shape " + shape_string(analytic.shape()) +
                         " vs point shape " + shape_string(x.shape()));
  }
  BasicTensor<T> probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = probe[i];
    probe[i] = static_cast<T>(saved + eps);
    const double up = f(probe);
    probe[i] = static_cast<T>(saved - eps);
    const double down = f(probe);
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw EvaluationError("check_gradient: non-finite function value at coordinate " +
                            std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) /
                       std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Same check for a function that carries its own vector-Jacobian product;
/// the analytic gradient is vjp(1)[0].
template <typename T>
double check_gradient(const std::function<GradPair<T>(const BasicTensor<T>&)>& f,
                      const BasicTensor<T>& x, double eps) {
  const GradPair<T> at = f(x);
  if (at.value.size() != 1) throw DimensionError("check_gradient: function must be scalar");
  const BasicTensor<T> analytic = at.vjp(BasicTensor<T>::scalar(T(1))).at(0);
  const ScalarFunction<T> value = [&f](const BasicTensor<T>& p) {
    return static_cast<double>(f(p).value[0]);
  };
  return check_gradient<T>(value, analytic, x, eps);
}

}  // namespace sapfuse

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "prototransfer/errors.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

/// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h for every element.
template <class T, class Fn>
BasicTensor<T> finite_diff_gradient(Fn&& fn, const BasicTensor<T>& at, T h) {
  if (!(h > T{0})) throw ContractError("finite_diff_gradient: step h must be positive");
  BasicTensor<T> x = at;
  BasicTensor<T> g(at.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = x[i];
    x[i] = orig + h;
    const double fp = static_cast<double>(fn(static_cast<const BasicTensor<T>&>(x)));
    x[i] = orig - h;
    const double fm = static_cast<double>(fn(static_cast<const BasicTensor<T>&>(x)));
    x[i] = orig;
    g[i] = static_cast<T>((fp - fm) / (2.0 * static_cast<double>(h)));
  }
  return g;
}

/// |a - b| / max(|a|, |b|), or 0 when both magnitudes fall under `floor` and
/// the absolute difference does too.
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double diff = std::abs(a - b);
  if (diff <= floor) return 0.0;
  return diff / std::max({std::abs(a), std::abs(b), floor});
}

template <class T>
double max_relative_error(const BasicTensor<T>& a, const BasicTensor<T>& b,
                          double floor = 1e-6) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_relative_error: shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, relative_error(a[i], b[i], floor));
  }
  return worst;
}

}  // namespace prototransfer

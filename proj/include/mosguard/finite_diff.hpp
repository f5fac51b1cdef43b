#pragma once

// Central-difference gradient oracle. Kept free of the tape so that it can
// check every differentiable path independently.

#include <cstddef>
#include <functional>
#include <span>

#include "mosguard/tensor.hpp"

namespace mosguard {

using ScalarFn = std::function<double(const Tensor&)>;

inline Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& x, double h = 1e-5) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = fn(probe);
    probe[i] = orig - h;
    const double down = fn(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Central difference of fn along a single coordinate.
inline double finite_diff_coord(const ScalarFn& fn, const Tensor& x, std::size_t i, double h = 1e-5) {
  Tensor probe = x;
  probe[i] = x[i] + h;
  const double up = fn(probe);
  probe[i] = x[i] - h;
  const double down = fn(probe);
  return (up - down) / (2.0 * h);
}

/// Central difference of fn along direction dir (same shape as x).
inline double finite_diff_directional(const ScalarFn& fn, const Tensor& x, const Tensor& dir, double h = 1e-5) {
  Tensor up = x, down = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    up[i] += h * dir[i];
    down[i] -= h * dir[i];
  }
  return (fn(up) - fn(down)) / (2.0 * h);
}

}  // namespace mosguard

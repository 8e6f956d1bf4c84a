#pragma once

// Central finite-difference oracle for autodiff tests. Independent of the
// backward implementations: it only ever calls forward passes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "floorgen/tensor.hpp"

namespace floorgen::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic grads of `f` (a scalar-valued function of the inputs)
/// with central differences at up to `max_entries` coordinates per input.
inline GradCheck check_gradients(const std::function<ag::Tensor()>& f, std::vector<ag::Tensor> inputs, double h = 1e-5,
                                 std::size_t max_entries = 40, double abs_floor = 1e-7) {
  for (auto& x : inputs) x.zero_grad();
  f().backward();
  GradCheck out;
  for (auto& x : inputs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    const std::size_t n = x.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = x.data()[i];
      x.mutable_data()[i] = orig + h;
      double fp;
      double fm;
      {
        ag::NoGradGuard g;
        fp = f().item();
        x.mutable_data()[i] = orig - h;
        fm = f().item();
      }
      x.mutable_data()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), abs_floor});
      out.max_abs_error = std::max(out.max_abs_error, err);
      // Entries whose true gradient is numerically zero are judged absolutely.
      const double rel = std::max(std::abs(numeric), std::abs(analytic[i])) < abs_floor ? 0.0 : err / denom;
      out.max_rel_error = std::max(out.max_rel_error, rel);
      ++out.checked;
    }
  }
  return out;
}

inline ag::Tensor random_tensor(ag::Shape s, unsigned seed, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(ag::numel(s));
  unsigned x = seed * 2654435761u + 12345u;
  for (double& e : v) {
    x = x * 1664525u + 1013904223u;
    e = scale * ((static_cast<double>(x >> 8) / static_cast<double>(1u << 24)) * 2.0 - 1.0);
  }
  return ag::Tensor::from(std::move(s), std::move(v), requires_grad);
}

}  // namespace floorgen::testing

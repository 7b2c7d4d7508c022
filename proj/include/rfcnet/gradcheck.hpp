// Central-difference verification of reverse-mode gradients.
#pragma once

#include <cmath>
#include <functional>

#include "rfcnet/core.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

/// Compares the analytic gradient of the scalar `f()` with central
/// differences taken on `wrt`, which `f` must read through (usually by
/// closure). Returns the max over coordinates of
/// |analytic - numeric| / max(1e-3, |analytic| + |numeric|).
///
/// The denominator floor makes the score an absolute error for coordinates
/// whose gradient is near zero. That is deliberate: evaluating `f` in
/// 64-bit carries rounding jitter of order 1e-14, so the difference
/// quotient has an absolute noise floor around 1e-8 no matter how well
/// eps is chosen, and a pure relative score would diverge on near-zero
/// gradients even when the analytic gradient is exact. With the floor, a
/// reported error of 1e-4 still certifies |analytic - numeric| <= 1e-7 on
/// those coordinates, well below any plausible implementation bug.
/// 64-bit elements only; float rounding drowns the difference quotient.
template <typename T>
T grad_check(const std::function<Tensor<T>()>& f, Tensor<T> wrt, T eps) {
  static_assert(std::is_same_v<T, double>, "grad_check requires 64-bit elements");
  wrt.set_requires_grad(true);
  wrt.zero_grad();

  Tensor<T> loss = f();
  if (loss.numel() != 1) throw ArgumentError("grad_check: f must be scalar-valued");
  loss.backward();

  std::vector<T> analytic(wrt.numel(), T(0));
  if (!wrt.grad().empty())
    std::copy(wrt.grad().begin(), wrt.grad().end(), analytic.begin());

  T worst = T(0);
  auto values = wrt.data();
  for (std::int64_t i = 0; i < wrt.numel(); ++i) {
    const T saved = values[i];
    values[i] = saved + eps;
    const T up = f().data()[0];
    values[i] = saved - eps;
    const T down = f().data()[0];
    values[i] = saved;
    const T numeric = (up - down) / (2 * eps);
    const T denom = std::max(T(1e-3), std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace rfc

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "advclr/tape.hpp"
#include "advclr/tensor.hpp"

namespace advclr {

/// `fn` builds a scalar on a fresh tape from the leaf it is handed.
template <class F, class T>
concept TapeScalarFn = requires(F f, Tape<T>& t, Var x) {
  { f(t, x) } -> std::convertible_to<Var>;
};

/// Max over `coords` of |analytic - central difference| / max(1, |analytic|).
template <class T, class F>
  requires TapeScalarFn<F, T>
T grad_check(F&& fn, const Tensor<T>& point, T h, std::span<const std::size_t> coords) {
  Tensor<T> analytic;
  {
    Tape<T> tape;
    Var x = tape.leaf(point, true);
    Var y = fn(tape, x);
    if (!std::isfinite(tape.value(y).item())) {
      throw NumericError("grad_check: non-finite function value");
    }
    analytic = tape.backward(y).take(x);
  }
  auto eval = [&](const Tensor<T>& p) {
    Tape<T> tape;
    Var x = tape.leaf(p, false);
    const T v = tape.value(fn(tape, x)).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  T worst = 0;
  Tensor<T> probe = point;
  for (std::size_t i : coords) {
    if (i >= point.size()) throw std::out_of_range("grad_check: coordinate out of range");
    const T orig = probe[i];
    probe[i] = orig + h;
    const T up = eval(probe);
    probe[i] = orig - h;
    const T down = eval(probe);
    probe[i] = orig;
    const T numeric = (up - down) / (T{2} * h);
    const T a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(T{1}, std::abs(a)));
  }
  return worst;
}

/// Checks every coordinate.
template <class T, class F>
  requires TapeScalarFn<F, T>
T grad_check(F&& fn, const Tensor<T>& point, T h) {
  std::vector<std::size_t> all(point.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return grad_check(std::forward<F>(fn), point, h, std::span<const std::size_t>(all));
}

}  // namespace advclr

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advclr/model.hpp"

namespace advclr {

/// lr0 * (1 + cos(pi * step / total_steps)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace detail {
inline void require_len(const char* op, std::size_t a, std::size_t b) {
  if (a != b) shape_fail(op, std::to_string(a) + " vs " + std::to_string(b) + " elements");
}
}  // namespace detail

/// v <- momentum * v + g;  p <- p - lr * v
template <class T>
void sgd_momentum_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity,
                         T lr, T momentum) {
  detail::require_len("sgd_momentum_step", param.size(), grad.size());
  detail::require_len("sgd_momentum_step", param.size(), velocity.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam; `step` is the 1-based index of this update.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::size_t step, T lr, const AdamHyper& h = {}) {
  detail::require_len("adam_step", param.size(), grad.size());
  detail::require_len("adam_step", param.size(), m.size());
  detail::require_len("adam_step", param.size(), v.size());
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
    v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
    const double mhat = static_cast<double>(m[i]) / c1;
    const double vhat = static_cast<double>(v[i]) / c2;
    param[i] -= static_cast<T>(static_cast<double>(lr) * mhat / (std::sqrt(vhat) + h.eps));
  }
}

/// Per-parameter accumulators mirroring ModelParams::entries.
template <class T>
struct OptimizerState {
  std::vector<Tensor<T>> first;   // SGD velocity or Adam first moment
  std::vector<Tensor<T>> second;  // Adam second moment
  std::size_t step = 0;

  void ensure(const ModelParams<T>& p, bool with_second) {
    if (first.size() != p.entries.size()) {
      first.clear();
      for (const auto& e : p.entries) first.emplace_back(e.value.shape());
    }
    if (with_second && second.size() != p.entries.size()) {
      second.clear();
      for (const auto& e : p.entries) second.emplace_back(e.value.shape());
    }
  }
};

namespace detail {
template <class T>
void check_grads(const ModelParams<T>& p, const std::vector<Tensor<T>>& grads, const char* op) {
  if (grads.size() != p.entries.size()) {
    shape_fail(op, std::to_string(grads.size()) + " gradients for " +
                       std::to_string(p.entries.size()) + " parameters");
  }
}
}  // namespace detail

/// Updates every trainable parameter; frozen parameters and buffers are left
/// untouched. An empty gradient entry means "no gradient" and skips it.
template <class T>
void sgd_momentum_step(ModelParams<T>& p, const std::vector<Tensor<T>>& grads,
                       OptimizerState<T>& state, T lr, T momentum) {
  detail::check_grads(p, grads, "sgd_momentum_step");
  state.ensure(p, false);
  ++state.step;
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    if (!p.trainable(i) || grads[i].empty()) continue;
    sgd_momentum_update<T>(p.entries[i].value.data(), grads[i].data(), state.first[i].data(), lr,
                           momentum);
  }
}

template <class T>
void adam_step(ModelParams<T>& p, const std::vector<Tensor<T>>& grads, OptimizerState<T>& state,
               T lr, const AdamHyper& h = {}) {
  detail::check_grads(p, grads, "adam_step");
  state.ensure(p, true);
  ++state.step;
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    if (!p.trainable(i) || grads[i].empty()) continue;
    adam_update<T>(p.entries[i].value.data(), grads[i].data(), state.first[i].data(),
                   state.second[i].data(), state.step, lr, h);
  }
}

}  // namespace advclr

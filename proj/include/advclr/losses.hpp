#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advclr/ops.hpp"
#include "advclr/tape.hpp"

namespace advclr {

inline constexpr double kDefaultTemperature = 0.1;

/// Cosine of the angle between two nonzero vectors.
template <class T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    shape_fail("cosine_sim", std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  T dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == T{0} || nb == T{0}) throw NumericError("cosine_sim: zero vector");
  const T c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, T{-1}, T{1});
}

namespace detail {

template <class T>
void require_unit_rows(const char* op, const Tensor<T>& z) {
  const std::size_t d = z.dim(1);
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    T sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += z[i * d + j] * z[i * d + j];
    if (std::abs(std::sqrt(sq) - T{1}) > T(1e-4)) {
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(i) +
                                  " is not unit-norm");
    }
  }
}

inline void require_temperature(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive loss: temperature must be > 0");
}

}  // namespace detail

/// Per-anchor InfoNCE terms (B). Anchor i is scored against its positive
/// and against every pool row whose owner differs from i; rows owned by i
/// (its own views) are excluded from the negatives. All rows unit-norm.
template <class T>
Var info_nce_terms(Tape<T>& t, Var anchor, Var positive, Var pool,
                   std::span<const std::size_t> pool_owner, T tau) {
  detail::require_temperature(tau);
  detail::require_rank("info_nce", t.shape(anchor), 2);
  detail::require_same("info_nce", t.shape(anchor), t.shape(positive));
  detail::require_rank("info_nce", t.shape(pool), 2);
  const std::size_t b = t.shape(anchor)[0];
  const std::size_t m = t.shape(pool)[0];
  if (t.shape(pool)[1] != t.shape(anchor)[1]) {
    shape_fail("info_nce", "pool " + shape_str(t.shape(pool)) + " vs anchors " +
                               shape_str(t.shape(anchor)));
  }
  if (pool_owner.size() != m) {
    shape_fail("info_nce", std::to_string(pool_owner.size()) + " owners for " +
                               std::to_string(m) + " pool rows");
  }
  detail::require_unit_rows("info_nce", t.value(anchor));
  detail::require_unit_rows("info_nce", t.value(positive));
  detail::require_unit_rows("info_nce", t.value(pool));

  const T inv_tau = T{1} / tau;
  Var pos = scale(t, rowwise_dot(t, anchor, positive), inv_tau);
  Var sims = scale(t, matmul(t, anchor, transpose(t, pool)), inv_tau);
  Var logits = concat(t, {reshape(t, pos, {b, 1}), sims}, 1);
  std::vector<std::uint8_t> mask(b * (m + 1), 0);
  for (std::size_t i = 0; i < b; ++i) {
    mask[i * (m + 1)] = 1;
    for (std::size_t j = 0; j < m; ++j) mask[i * (m + 1) + 1 + j] = pool_owner[j] != i;
  }
  return sub(t, masked_logsumexp(t, logits, mask), pos);
}

/// Mean InfoNCE over anchors with an explicit negative pool.
template <class T>
Var info_nce(Tape<T>& t, Var anchor, Var positive, Var pool,
             std::span<const std::size_t> pool_owner, T tau = static_cast<T>(kDefaultTemperature)) {
  return mean(t, info_nce_terms(t, anchor, positive, pool, pool_owner, tau));
}

/// Mean InfoNCE where the negatives of anchor i are the anchor and positive
/// rows of every other image.
template <class T>
Var info_nce(Tape<T>& t, Var anchor, Var positive, T tau = static_cast<T>(kDefaultTemperature)) {
  detail::require_rank("info_nce", t.shape(anchor), 2);
  const std::size_t b = t.shape(anchor)[0];
  std::vector<std::size_t> owner(2 * b);
  for (std::size_t i = 0; i < b; ++i) owner[i] = owner[b + i] = i;
  Var pool = concat(t, {anchor, positive}, 0);
  return info_nce(t, anchor, positive, pool, owner, tau);
}

/// Mean of the clean/PGD and clean/CW InfoNCE terms. The clean view anchors
/// both; the negatives are all three views of every other image.
template <class T>
Var adv_contrastive(Tape<T>& t, Var z_orig, Var z_pgd, Var z_cw,
                    T tau = static_cast<T>(kDefaultTemperature)) {
  detail::require_same("adv_contrastive", t.shape(z_orig), t.shape(z_pgd));
  detail::require_same("adv_contrastive", t.shape(z_orig), t.shape(z_cw));
  const std::size_t b = t.shape(z_orig)[0];
  std::vector<std::size_t> owner(3 * b);
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t i = 0; i < b; ++i) owner[v * b + i] = i;
  Var pool = concat(t, {z_orig, z_pgd, z_cw}, 0);
  Var l_pgd = info_nce(t, z_orig, z_pgd, pool, owner, tau);
  Var l_cw = info_nce(t, z_orig, z_cw, pool, owner, tau);
  return scale(t, add(t, l_pgd, l_cw), T{0.5});
}

/// Mean negative log-likelihood of the labels under softmax(logits).
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const std::size_t> labels) {
  detail::require_rank("cross_entropy", t.shape(logits), 2);
  const std::size_t c = t.shape(logits)[1];
  for (auto y : labels) {
    if (y >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " >= " +
                              std::to_string(c) + " classes");
    }
  }
  return scale(t, mean(t, pick(t, log_softmax(t, logits), labels)), T{-1});
}

}  // namespace advclr

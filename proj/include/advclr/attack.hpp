#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advclr/losses.hpp"
#include "advclr/model.hpp"
#include "advclr/ops.hpp"

namespace advclr {

enum class AttackKind { fgsm, pgd, cw };

enum class Objective {
  supervised_ce,      // cross-entropy against the true label
  supervised_margin,  // Carlini-Wagner logit margin
  embedding_repel,    // push the projection away from the clean projection
  contrastive,        // InfoNCE of clean anchors vs. perturbed positives
};

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
  }
  return "?";
}

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::supervised_ce: return "supervised_ce";
    case Objective::supervised_margin: return "supervised_margin";
    case Objective::embedding_repel: return "embedding_repel";
    case Objective::contrastive: return "contrastive";
  }
  return "?";
}

inline AttackKind attack_kind_from_string(std::string_view s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "cw") return AttackKind::cw;
  throw std::invalid_argument("unknown attack kind '" + std::string(s) + "'");
}

inline Objective objective_from_string(std::string_view s) {
  for (auto o : {Objective::supervised_ce, Objective::supervised_margin,
                 Objective::embedding_repel, Objective::contrastive}) {
    if (s == to_string(o)) return o;
  }
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

struct ObjectiveMode {
  Objective variant = Objective::supervised_ce;
  // embedding_repel: compare against the most similar other clean image
  // (margin form) when the batch has more than one image.
  bool use_negatives = true;
  double temperature = kDefaultTemperature;  // contrastive

  bool supervised() const {
    return variant == Objective::supervised_ce || variant == Objective::supervised_margin;
  }
  bool separable() const { return variant != Objective::contrastive; }
};

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double epsilon = 0.03;
  double step_size = 0.0075;
  std::size_t num_steps = 10;
  bool random_start = false;
  ObjectiveMode objective{};
  double kappa = 0.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (num_steps < 1) throw std::invalid_argument("attack: num_steps must be >= 1");
    if (kind != AttackKind::fgsm && epsilon > 0.0 && !(step_size > 0.0)) {
      throw std::invalid_argument("attack: step_size must be > 0 for iterative attacks");
    }
    if (kind == AttackKind::cw && objective.variant != Objective::supervised_margin &&
        objective.variant != Objective::embedding_repel) {
      throw std::invalid_argument("attack: cw requires the supervised_margin or embedding_repel objective");
    }
  }

  /// Evaluation-time defaults.
  static AttackConfig fgsm(double eps) {
    return {AttackKind::fgsm, eps, eps, 1, false, {Objective::supervised_ce}, 0.0};
  }
  static AttackConfig pgd(double eps, std::size_t steps = 10, bool random_start = true) {
    return {AttackKind::pgd, eps, eps / 4.0, steps, random_start, {Objective::supervised_ce}, 0.0};
  }
  static AttackConfig cw(double eps, std::size_t steps = 10, double kappa = 0.0) {
    return {AttackKind::cw, eps, eps / 4.0, steps, false, {Objective::supervised_margin}, kappa};
  }
};

/// What an objective needs beyond the images: labels for the supervised
/// variants, clean reference projections (B, proj_dim) for the embedding
/// variants. `mode` selects normalization statistics; `seed` drives the
/// random start.
template <class T>
struct AttackContext {
  std::span<const std::size_t> labels{};
  const Tensor<T>* reference = nullptr;
  Mode mode = Mode::eval;
  std::uint64_t seed = 0;
};

/// Per-sample objective terms (B) on the tape; larger is better for the
/// attacker.
template <class T>
Var attack_objective_terms(ModelGraph<T>& g, Var x, const ObjectiveMode& mode, T kappa,
                           const AttackContext<T>& ctx) {
  auto& t = g.tape();
  const std::size_t b = t.shape(x)[0];
  if (mode.supervised()) {
    if (ctx.labels.size() != b) {
      throw std::invalid_argument(std::string("attack objective ") + to_string(mode.variant) +
                                  ": needs one label per image");
    }
    Var logits = g.classify(g.encode(x));
    if (mode.variant == Objective::supervised_ce) {
      return scale(t, pick(t, log_softmax(t, logits), ctx.labels), T{-1});
    }
    const std::size_t c = t.shape(logits)[1];
    if (c < 2) throw std::invalid_argument("attack objective supervised_margin: needs >= 2 classes");
    std::vector<std::uint8_t> others(b * c, 1);
    for (std::size_t i = 0; i < b; ++i) {
      if (ctx.labels[i] >= c) throw std::out_of_range("attack objective: label out of range");
      others[i * c + ctx.labels[i]] = 0;
    }
    // min(max_{j!=y} Z_j - Z_y, kappa)
    Var margin = sub(t, masked_rowmax(t, logits, others), pick(t, logits, ctx.labels));
    return scale(t, maximum_scalar(t, scale(t, margin, T{-1}), -kappa), T{-1});
  }
  if (!ctx.reference) {
    throw std::invalid_argument(std::string("attack objective ") + to_string(mode.variant) +
                                ": needs reference embeddings");
  }
  const auto& ref_v = *ctx.reference;
  if (ref_v.rank() != 2 || ref_v.dim(0) != b) {
    shape_fail("attack objective", "reference " + shape_str(ref_v.shape()) + " for batch of " +
                                       std::to_string(b));
  }
  Var z = g.project(g.encode(x));
  Var ref = t.leaf(ref_v);
  if (mode.variant == Objective::embedding_repel) {
    Var pos = rowwise_dot(t, z, ref);
    if (!mode.use_negatives || b < 2) return scale(t, pos, T{-1});
    // -max(cos(z, ref_i) - max_{j!=i} cos(z, ref_j), -kappa)
    Var sims = matmul(t, z, transpose(t, ref));
    std::vector<std::uint8_t> off(b * b, 1);
    for (std::size_t i = 0; i < b; ++i) off[i * b + i] = 0;
    Var gap = sub(t, pos, masked_rowmax(t, sims, off));
    return scale(t, maximum_scalar(t, gap, -kappa), T{-1});
  }
  std::vector<std::size_t> owner(2 * b);
  for (std::size_t i = 0; i < b; ++i) owner[i] = owner[b + i] = i;
  Var pool = concat(t, {ref, z}, 0);
  return info_nce_terms(t, ref, z, pool, owner, static_cast<T>(mode.temperature));
}

/// Scalar objective to ascend: the sum of per-sample terms, or the batch
/// mean for the contrastive objective.
template <class T>
Var attack_objective(ModelGraph<T>& g, Var x, const ObjectiveMode& mode, T kappa,
                     const AttackContext<T>& ctx) {
  Var terms = attack_objective_terms(g, x, mode, kappa, ctx);
  return mode.separable() ? sum(g.tape(), terms) : mean(g.tape(), terms);
}

template <class T>
struct ObjectiveValue {
  T total = 0;
  std::vector<T> per_sample;
  Tensor<T> input_grad;  // empty unless requested
};

template <class T>
ObjectiveValue<T> evaluate_objective(const ModelParams<T>& params, const Tensor<T>& x,
                                     const ObjectiveMode& mode, T kappa,
                                     const AttackContext<T>& ctx, bool want_grad) {
  Tape<T> tape;
  ModelGraph<T> g(tape, params, ctx.mode, false);
  Var xv = tape.leaf(x, want_grad);
  Var terms = attack_objective_terms(g, xv, mode, kappa, ctx);
  Var total = mode.separable() ? sum(tape, terms) : mean(tape, terms);
  ObjectiveValue<T> out;
  out.total = tape.value(total).item();
  const auto& tv = tape.value(terms);
  out.per_sample.assign(tv.data().begin(), tv.data().end());
  if (want_grad) {
    out.input_grad = tape.backward(total).take(xv);
    if (!out.input_grad.all_finite()) throw NumericError("attack: non-finite input gradient");
  }
  return out;
}

/// clamp(x_adv, x_ref - eps, x_ref + eps), then clamp to [0, 1].
template <class T>
Tensor<T> project_linf(const Tensor<T>& x_adv, const Tensor<T>& x_ref, T epsilon) {
  if (x_adv.shape() != x_ref.shape()) {
    shape_fail("project_linf", shape_str(x_adv.shape()) + " vs " + shape_str(x_ref.shape()));
  }
  Tensor<T> out = x_adv;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T r = x_ref[i];
    // Pull rounded bounds back inside so |out - r| <= eps holds in T arithmetic.
    T lo = r - epsilon, hi = r + epsilon;
    while (r - lo > epsilon) lo = std::nextafter(lo, r);
    while (hi - r > epsilon) hi = std::nextafter(hi, r);
    out[i] = std::clamp(out[i], lo, hi);
    out[i] = std::clamp(out[i], T{0}, T{1});
    if (std::max(T{0}, lo) <= std::min(T{1}, hi)) {
      out[i] = std::clamp(out[i], std::max(T{0}, lo), std::min(T{1}, hi));
    }
  }
  return out;
}

namespace detail {

template <class T>
T sign(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

template <class T>
Tensor<T> sign_step(const Tensor<T>& x, const Tensor<T>& grad, T step) {
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step * sign(grad[i]);
  return out;
}

}  // namespace detail

/// One signed-gradient step of size epsilon, clipped to the valid range.
template <class T>
Tensor<T> fgsm(const ModelParams<T>& params, const Tensor<T>& x, const AttackConfig& cfg,
               const AttackContext<T>& ctx) {
  cfg.validate();
  if (cfg.kind != AttackKind::fgsm) throw std::invalid_argument("fgsm: config kind is not fgsm");
  const T eps = static_cast<T>(cfg.epsilon);
  if (eps == T{0}) return x;
  const auto ov = evaluate_objective(params, x, cfg.objective, static_cast<T>(cfg.kappa), ctx, true);
  return project_linf(detail::sign_step(x, ov.input_grad, eps), x, eps);
}

/// Projected signed-gradient ascent. Returns, per sample (or per batch for
/// the non-separable contrastive objective), the iterate with the highest
/// objective among the num_steps iterates produced.
template <class T>
Tensor<T> pgd(const ModelParams<T>& params, const Tensor<T>& x, const AttackConfig& cfg,
              const AttackContext<T>& ctx) {
  cfg.validate();
  if (cfg.kind == AttackKind::fgsm) throw std::invalid_argument("pgd: config kind is fgsm");
  const T eps = static_cast<T>(cfg.epsilon);
  const T step = static_cast<T>(cfg.step_size);
  const T kappa = static_cast<T>(cfg.kappa);
  if (eps == T{0}) return x;
  const std::size_t b = x.dim(0);
  const std::size_t per = b ? x.size() / b : 0;

  Tensor<T> cur = x;
  if (cfg.random_start) {
    std::mt19937_64 rng(ctx.seed);
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (auto& v : cur.data()) v += static_cast<T>(u(rng));
    cur = project_linf(cur, x, eps);
  }

  Tensor<T> best = x;
  std::vector<T> best_obj(b, -std::numeric_limits<T>::infinity());
  T best_total = -std::numeric_limits<T>::infinity();
  auto consider = [&](const Tensor<T>& cand, const ObjectiveValue<T>& ov) {
    if (cfg.objective.separable()) {
      for (std::size_t i = 0; i < b; ++i) {
        if (ov.per_sample[i] >= best_obj[i]) {
          best_obj[i] = ov.per_sample[i];
          std::copy_n(cand.ptr() + i * per, per, best.ptr() + i * per);
        }
      }
    } else if (ov.total >= best_total) {
      best_total = ov.total;
      best = cand;
    }
  };

  for (std::size_t k = 0; k < cfg.num_steps; ++k) {
    auto ov = evaluate_objective(params, cur, cfg.objective, kappa, ctx, true);
    if (k > 0) consider(cur, ov);
    cur = project_linf(detail::sign_step(cur, ov.input_grad, step), x, eps);
  }
  consider(cur, evaluate_objective(params, cur, cfg.objective, kappa, ctx, false));
  return best;
}

/// Carlini-Wagner margin loss under the L-infinity ball, optimized like PGD.
template <class T>
Tensor<T> cw(const ModelParams<T>& params, const Tensor<T>& x, const AttackConfig& cfg,
             const AttackContext<T>& ctx) {
  if (cfg.kind != AttackKind::cw) throw std::invalid_argument("cw: config kind is not cw");
  return pgd(params, x, cfg, ctx);
}

template <class T>
Tensor<T> run_attack(const ModelParams<T>& params, const Tensor<T>& x, const AttackConfig& cfg,
                     const AttackContext<T>& ctx) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(params, x, cfg, ctx);
    case AttackKind::pgd: return pgd(params, x, cfg, ctx);
    case AttackKind::cw: return cw(params, x, cfg, ctx);
  }
  throw std::invalid_argument("run_attack: unknown kind");
}

}  // namespace advclr

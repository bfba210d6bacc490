#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advclr/ops.hpp"
#include "advclr/tape.hpp"
#include "advclr/tensor.hpp"

namespace advclr {

enum class EncoderKind : std::uint32_t { toy_conv = 0, resnet_small = 1 };

inline const char* to_string(EncoderKind k) {
  return k == EncoderKind::toy_conv ? "toy_conv" : "resnet_small";
}

inline EncoderKind encoder_kind_from_string(std::string_view s) {
  if (s == "toy_conv") return EncoderKind::toy_conv;
  if (s == "resnet_small") return EncoderKind::resnet_small;
  throw std::invalid_argument("unknown encoder kind '" + std::string(s) + "'");
}

struct EncoderSpec {
  EncoderKind kind = EncoderKind::toy_conv;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t embedding_dim = 64;  // equals widths.back()
  std::size_t depth = 1;           // residual blocks per stage (resnet_small)
  std::size_t in_channels = 3;
  std::size_t image_size = 8;

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("encoder spec: widths must be nonempty");
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("encoder spec: zero width");
    if (embedding_dim < 1) throw std::invalid_argument("encoder spec: embedding_dim must be >= 1");
    if (embedding_dim != widths.back()) {
      throw std::invalid_argument("encoder spec: embedding_dim " + std::to_string(embedding_dim) +
                                  " must equal the last width " + std::to_string(widths.back()));
    }
    if (in_channels == 0 || image_size == 0) {
      throw std::invalid_argument("encoder spec: empty input geometry");
    }
    if (kind == EncoderKind::resnet_small && depth == 0) {
      throw std::invalid_argument("encoder spec: resnet_small needs depth >= 1");
    }
  }

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

enum class Scope : std::uint8_t { encoder = 0, projection = 1, classifier = 2 };

template <class T>
struct Parameter {
  std::string name;
  Scope scope = Scope::encoder;
  Tensor<T> value;
  bool frozen = false;
  bool buffer = false;  // running statistics; never touched by optimizers
};

inline constexpr std::size_t kProjectionDim = 128;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kRunningStatMomentum = 0.1;

/// Encoder, projection head and classifier weights plus the freeze mask.
template <class T>
struct ModelParams {
  EncoderSpec spec;
  std::size_t num_classes = 0;
  std::size_t projection_dim = kProjectionDim;
  std::uint64_t seed = 0;
  std::vector<Parameter<T>> entries;

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].name == name) return i;
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }

  Parameter<T>& at(std::string_view name) { return entries[index(name)]; }
  const Parameter<T>& at(std::string_view name) const { return entries[index(name)]; }

  bool trainable(std::size_t i) const { return !entries[i].frozen && !entries[i].buffer; }

  std::size_t count(Scope scope, bool include_buffers = false) const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.scope == scope && (include_buffers || !e.buffer)) n += e.value.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out{spec, num_classes, projection_dim, seed, {}};
    for (const auto& e : entries)
      out.entries.push_back({e.name, e.scope, e.value.template cast<U>(), e.frozen, e.buffer});
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.spec == b.spec) || a.num_classes != b.num_classes ||
        a.projection_dim != b.projection_dim || a.seed != b.seed ||
        a.entries.size() != b.entries.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
      const auto& x = a.entries[i];
      const auto& y = b.entries[i];
      if (x.name != y.name || x.scope != y.scope || x.frozen != y.frozen ||
          x.buffer != y.buffer || !(x.value == y.value)) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

template <class T>
class ParamBuilder {
 public:
  ParamBuilder(ModelParams<T>& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  void normal(std::string name, Scope scope, Shape shape, double stddev) {
    Tensor<T> v(std::move(shape));
    std::normal_distribution<double> d(0.0, stddev);
    for (auto& x : v.data()) x = static_cast<T>(d(rng_));
    p_.entries.push_back({std::move(name), scope, std::move(v), false, false});
  }

  void constant(std::string name, Scope scope, Shape shape, T value, bool buffer = false) {
    p_.entries.push_back({std::move(name), scope, Tensor<T>(std::move(shape), value), false, buffer});
  }

  void conv(const std::string& name, std::size_t out, std::size_t in) {
    normal(name + ".w", Scope::encoder, {out, in, 3, 3}, std::sqrt(2.0 / (in * 9.0)));
  }

  void norm(const std::string& name, std::size_t ch) {
    constant(name + ".gamma", Scope::encoder, {ch}, T{1});
    constant(name + ".beta", Scope::encoder, {ch}, T{0});
    constant(name + ".running_mean", Scope::encoder, {ch}, T{0}, true);
    constant(name + ".running_var", Scope::encoder, {ch}, T{1}, true);
  }

  void dense(const std::string& name, Scope scope, std::size_t in, std::size_t out, double gain) {
    normal(name + ".w", scope, {in, out}, std::sqrt(gain / static_cast<double>(in)));
    constant(name + ".b", scope, {out}, T{0});
  }

 private:
  ModelParams<T>& p_;
  std::mt19937_64 rng_;
};

}  // namespace detail

/// Fan-in scaled normal weights, zero biases, identity normalization.
template <class T = float>
ModelParams<T> init_params(const EncoderSpec& spec, std::size_t num_classes, std::uint64_t seed) {
  spec.validate();
  if (num_classes < 1) throw std::invalid_argument("init_params: num_classes must be >= 1");
  ModelParams<T> p{spec, num_classes, kProjectionDim, seed, {}};
  detail::ParamBuilder<T> b(p, seed);
  const auto& w = spec.widths;
  if (spec.kind == EncoderKind::toy_conv) {
    std::size_t in = spec.in_channels;
    for (std::size_t s = 0; s < w.size(); ++s) {
      const std::string n = "enc.block" + std::to_string(s);
      b.conv(n + ".conv", w[s], in);
      b.norm(n + ".bn", w[s]);
      in = w[s];
    }
  } else {
    b.conv("enc.stem.conv", w[0], spec.in_channels);
    b.norm("enc.stem.bn", w[0]);
    for (std::size_t s = 0; s < w.size(); ++s) {
      const std::string st = "enc.stage" + std::to_string(s);
      if (s > 0) {
        b.conv(st + ".down.conv", w[s], w[s - 1]);
        b.norm(st + ".down.bn", w[s]);
      }
      for (std::size_t k = 0; k < spec.depth; ++k) {
        const std::string blk = st + ".res" + std::to_string(k);
        b.conv(blk + ".conv1", w[s], w[s]);
        b.norm(blk + ".bn1", w[s]);
        b.conv(blk + ".conv2", w[s], w[s]);
        b.norm(blk + ".bn2", w[s]);
      }
    }
  }
  const std::size_t e = spec.embedding_dim;
  b.dense("proj.fc1", Scope::projection, e, e, 2.0);
  b.dense("proj.fc2", Scope::projection, e, p.projection_dim, 1.0);
  b.dense("cls", Scope::classifier, e, num_classes, 1.0);
  return p;
}

/// Returns a copy with the freeze flag of every parameter in `scope` set.
template <class T>
ModelParams<T> set_freeze(ModelParams<T> params, Scope scope, bool frozen) {
  for (auto& e : params.entries)
    if (e.scope == scope) e.frozen = frozen;
  return params;
}

enum class Mode { train, eval };

/// Batch statistics observed by a train-mode forward pass, destined for the
/// running-average buffers.
template <class T>
struct BatchNormStat {
  std::size_t mean_index;
  std::size_t var_index;
  Tensor<T> mean;
  Tensor<T> var;  // biased
  std::size_t count;
};

/// Binds a parameter set to a tape and builds the encoder, projection and
/// classifier sub-graphs. Parameters become leaves on first use; they
/// require grad only when `param_grads` is set and they are trainable.
template <class T>
class ModelGraph {
 public:
  ModelGraph(Tape<T>& tape, const ModelParams<T>& params, Mode mode, bool param_grads = false)
      : t_(tape), p_(params), mode_(mode), param_grads_(param_grads),
        vars_(params.entries.size()) {}

  Tape<T>& tape() noexcept { return t_; }
  Mode mode() const noexcept { return mode_; }

  Var param(std::size_t i) {
    if (!vars_[i].valid()) {
      vars_[i] = t_.leaf(p_.entries[i].value, param_grads_ && p_.trainable(i));
    }
    return vars_[i];
  }
  Var param(std::string_view name) { return param(p_.index(name)); }

  /// Uses `v` in place of parameter i; `v` must have the parameter's shape.
  void bind(std::size_t i, Var v) {
    if (t_.shape(v) != p_.entries[i].value.shape()) {
      shape_fail("bind", p_.entries[i].name + " expects " + shape_str(p_.entries[i].value.shape()) +
                             ", got " + shape_str(t_.shape(v)));
    }
    vars_[i] = v;
  }

  /// Handle of parameter i if it was used in this graph.
  Var bound(std::size_t i) const { return vars_[i]; }

  /// (N, C, H, W) images -> (N, embedding_dim).
  Var encode(Var x) {
    const auto& s = t_.shape(x);
    const auto& sp = p_.spec;
    if (s.size() != 4 || s[1] != sp.in_channels || s[2] != sp.image_size || s[3] != sp.image_size) {
      shape_fail("encode", "expected (N, " + std::to_string(sp.in_channels) + ", " +
                               std::to_string(sp.image_size) + ", " + std::to_string(sp.image_size) +
                               "), got " + shape_str(s));
    }
    Var h = x;
    if (sp.kind == EncoderKind::toy_conv) {
      for (std::size_t s2 = 0; s2 < sp.widths.size(); ++s2) {
        const std::string n = "enc.block" + std::to_string(s2);
        h = relu(t_, norm(n + ".bn", conv2d(t_, h, param(n + ".conv.w"), 2, 1)));
      }
    } else {
      h = relu(t_, norm("enc.stem.bn", conv2d(t_, h, param("enc.stem.conv.w"), 1, 1)));
      for (std::size_t s2 = 0; s2 < sp.widths.size(); ++s2) {
        const std::string st = "enc.stage" + std::to_string(s2);
        if (s2 > 0) {
          h = relu(t_, norm(st + ".down.bn", conv2d(t_, h, param(st + ".down.conv.w"), 2, 1)));
        }
        for (std::size_t k = 0; k < sp.depth; ++k) {
          const std::string blk = st + ".res" + std::to_string(k);
          Var r = relu(t_, norm(blk + ".bn1", conv2d(t_, h, param(blk + ".conv1.w"), 1, 1)));
          r = norm(blk + ".bn2", conv2d(t_, r, param(blk + ".conv2.w"), 1, 1));
          h = relu(t_, add(t_, h, r));
        }
      }
    }
    return global_avg_pool(t_, h);
  }

  /// Two-layer MLP head followed by row normalization.
  Var project(Var emb) {
    check_embedding("project", emb);
    Var h = relu(t_, dense("proj.fc1", emb));
    return l2_normalize(t_, dense("proj.fc2", h));
  }

  /// Linear map embeddings -> logits.
  Var classify(Var emb) {
    check_embedding("classify", emb);
    return dense("cls", emb);
  }

  const std::vector<BatchNormStat<T>>& batch_stats() const noexcept { return stats_; }

 private:
  void check_embedding(const char* op, Var emb) const {
    const auto& s = t_.shape(emb);
    if (s.size() != 2 || s[1] != p_.spec.embedding_dim) {
      shape_fail(op, "expected (N, " + std::to_string(p_.spec.embedding_dim) + "), got " +
                         shape_str(s));
    }
  }

  Var dense(const std::string& name, Var x) {
    return add_bias(t_, matmul(t_, x, param(name + ".w")), param(name + ".b"));
  }

  Var norm(const std::string& name, Var x) {
    const T eps = static_cast<T>(kBatchNormEps);
    Var gamma = param(name + ".gamma");
    Var beta = param(name + ".beta");
    const std::size_t mi = p_.index(name + ".running_mean");
    const std::size_t vi = p_.index(name + ".running_var");
    if (mode_ == Mode::train) {
      BatchNormStat<T> st{mi, vi, {}, {}, 0};
      const auto& s = t_.shape(x);
      st.count = s[0] * s[2] * s[3];
      Var z = batch_standardize(t_, x, eps, &st.mean, &st.var);
      stats_.push_back(std::move(st));
      return batch_affine(t_, z, gamma, beta);
    }
    const auto& rm = p_.entries[mi].value;
    const auto& rv = p_.entries[vi].value;
    Tensor<T> sc(rm.shape()), sh(rm.shape());
    for (std::size_t c = 0; c < rm.size(); ++c) {
      sc[c] = T{1} / std::sqrt(rv[c] + eps);
      sh[c] = -rm[c] * sc[c];
    }
    Var z = batch_affine(t_, x, t_.leaf(std::move(sc)), t_.leaf(std::move(sh)));
    return batch_affine(t_, z, gamma, beta);
  }

  Tape<T>& t_;
  const ModelParams<T>& p_;
  Mode mode_;
  bool param_grads_;
  std::vector<Var> vars_;
  std::vector<BatchNormStat<T>> stats_;
};

/// Folds train-mode batch statistics into the running buffers.
template <class T>
void apply_batch_stats(ModelParams<T>& params, const std::vector<BatchNormStat<T>>& stats,
                       T momentum = static_cast<T>(kRunningStatMomentum)) {
  for (const auto& st : stats) {
    if (params.entries[st.mean_index].frozen) continue;
    auto& rm = params.entries[st.mean_index].value;
    auto& rv = params.entries[st.var_index].value;
    const T unbias = st.count > 1 ? static_cast<T>(st.count) / static_cast<T>(st.count - 1) : T{1};
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (T{1} - momentum) * rm[c] + momentum * st.mean[c];
      rv[c] = (T{1} - momentum) * rv[c] + momentum * st.var[c] * unbias;
    }
  }
}

/// Convenience eval-mode forwards without gradients.
template <class T>
Tensor<T> encode_eval(const ModelParams<T>& params, const Tensor<T>& images) {
  Tape<T> tape;
  ModelGraph<T> g(tape, params, Mode::eval);
  return tape.value(g.encode(tape.leaf(images)));
}

template <class T>
Tensor<T> logits_eval(const ModelParams<T>& params, const Tensor<T>& images) {
  Tape<T> tape;
  ModelGraph<T> g(tape, params, Mode::eval);
  return tape.value(g.classify(g.encode(tape.leaf(images))));
}

}  // namespace advclr

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "advclr/tape.hpp"
#include "advclr/tensor.hpp"

namespace advclr {

namespace detail {

// C(M,N) (+)= op(A) * op(B). Row-major; the transposed operand is stored in
// its untransposed layout.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        if (av == T{0}) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored (k, m)
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = arow[i];
        if (av == T{0}) continue;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // B stored (n, k)
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        crow[j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
    }
  }
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " +
                       shape_str(s));
  }
}

inline void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, shape_str(a) + " vs " + shape_str(b));
}

// (outer, channels, inner) decomposition for per-channel ops on (N,C) or
// (N,C,H,W).
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

inline ChannelLayout channel_layout(const char* op, const Shape& s) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  shape_fail(op, "expected (N,C) or (N,C,H,W), got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t cols() const { return n * oh * ow; }
};

// col layout: (C*k*k, N*OH*OW)
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t np = g.cols();
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* xp = x + (n * g.c + c) * g.h * g.w;
          T* out = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 &&
                                  iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              out[oy * g.ow + ox] = inside ? xp[iy * g.w + ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t np = g.cols();
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* xp = dx + (n * g.c + c) * g.h * g.w;
          const T* in = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              xp[iy * g.w + ix] += in[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  detail::require_same("add", t.shape(a), t.shape(b));
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record("add", std::move(out), {a, b},
                  [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
                    for (Var in : {a, b}) {
                      if (auto* d = t.grad_slot(in)) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                      }
                    }
                  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  detail::require_same("sub", t.shape(a), t.shape(b));
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record("sub", std::move(out), {a, b},
                  [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                    }
                    if (auto* d = t.grad_slot(b)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
                    }
                  });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  detail::require_same("mul", t.shape(a), t.shape(b));
  Tensor<T> out = t.value(a);
  const auto& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record("mul", std::move(out), {a, b},
                  [a, b](Tape<T>& t, Var, const Tensor<T>& g) {
                    const auto& av = t.value(a);
                    const auto& bv = t.value(b);
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * bv[i];
                    }
                    if (auto* d = t.grad_slot(b)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * av[i];
                    }
                  });
}

/// Scalar-times-tensor.
template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.data()) v *= s;
  return t.record("scale", std::move(out), {a},
                  [a, s](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += s * g[i];
                    }
                  });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return t.record("relu", std::move(out), {a},
                  [a](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      const auto& x = t.value(a);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        if (x[i] > T{0}) (*d)[i] += g[i];
                      }
                    }
                  });
}

/// Elementwise max(x, floor). Gradient flows only where x > floor.
template <class T>
Var maximum_scalar(Tape<T>& t, Var a, T floor) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.data()) v = v > floor ? v : floor;
  return t.record("maximum_scalar", std::move(out), {a},
                  [a, floor](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      const auto& x = t.value(a);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        if (x[i] > floor) (*d)[i] += g[i];
                      }
                    }
                  });
}

template <class T>
Var reshape(Tape<T>& t, Var a, Shape shape) {
  Tensor<T> out = t.value(a).reshaped(std::move(shape));
  return t.record("reshape", std::move(out), {a},
                  [a](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& as = t.shape(a);
  const auto& bs = t.shape(b);
  detail::require_rank("matmul", as, 2);
  detail::require_rank("matmul", bs, 2);
  if (as[1] != bs[0]) {
    shape_fail("matmul", "inner dims differ: " + shape_str(as) + " x " +
                             shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor<T> out({m, n});
  detail::gemm(false, false, m, n, k, t.value(a).ptr(), t.value(b).ptr(),
               out.ptr(), false);
  return t.record("matmul", std::move(out), {a, b},
                  [a, b, m, n, k](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      // dA = G * B^T
                      detail::gemm(false, true, m, k, n, g.ptr(),
                                   t.value(b).ptr(), d->ptr(), true);
                    }
                    if (auto* d = t.grad_slot(b)) {
                      // dB = A^T * G
                      detail::gemm(true, false, k, n, m, t.value(a).ptr(),
                                   g.ptr(), d->ptr(), true);
                    }
                  });
}

template <class T>
Var transpose(Tape<T>& t, Var a) {
  const auto& s = t.shape(a);
  detail::require_rank("transpose", s, 2);
  const std::size_t r = s[0], c = s[1];
  const auto& x = t.value(a);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return t.record("transpose", std::move(out), {a},
                  [a, r, c](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          (*d)[i * c + j] += g[j * r + i];
                    }
                  });
}

/// NCHW convolution with weights (O, C, k, k) and zero padding.
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, std::size_t stride = 1,
           std::size_t pad = 0) {
  const auto& xs = t.shape(x);
  const auto& ws = t.shape(w);
  detail::require_rank("conv2d", xs, 4);
  detail::require_rank("conv2d", ws, 4);
  if (ws[1] != xs[1]) {
    shape_fail("conv2d", "input channels " + std::to_string(xs[1]) +
                             " != weight channels " + std::to_string(ws[1]));
  }
  if (ws[2] != ws[3]) shape_fail("conv2d", "kernel must be square, got " + shape_str(ws));
  if (stride == 0) shape_fail("conv2d", "stride must be >= 1");
  const std::size_t k = ws[2];
  if (xs[2] + 2 * pad < k || xs[3] + 2 * pad < k) {
    shape_fail("conv2d", "kernel " + std::to_string(k) + " larger than padded input " +
                             shape_str(xs));
  }
  detail::ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ws[0], k, stride, pad,
                           (xs[2] + 2 * pad - k) / stride + 1,
                           (xs[3] + 2 * pad - k) / stride + 1};
  const std::size_t np = geo.cols();
  const std::size_t plane = geo.oh * geo.ow;
  auto col = std::make_shared<std::vector<T>>(geo.patch() * np);
  detail::im2col(geo, t.value(x).ptr(), col->data());
  std::vector<T> y(geo.o * np);
  detail::gemm(false, false, geo.o, np, geo.patch(), t.value(w).ptr(),
               col->data(), y.data(), false);
  Tensor<T> out({geo.n, geo.o, geo.oh, geo.ow});
  for (std::size_t o = 0; o < geo.o; ++o)
    for (std::size_t n = 0; n < geo.n; ++n)
      std::copy_n(y.data() + o * np + n * plane, plane,
                  out.ptr() + (n * geo.o + o) * plane);
  return t.record(
      "conv2d", std::move(out), {x, w},
      [x, w, geo, col](Tape<T>& t, Var, const Tensor<T>& g) {
        const std::size_t np = geo.cols();
        const std::size_t plane = geo.oh * geo.ow;
        std::vector<T> gy(geo.o * np);
        for (std::size_t o = 0; o < geo.o; ++o)
          for (std::size_t n = 0; n < geo.n; ++n)
            std::copy_n(g.ptr() + (n * geo.o + o) * plane, plane,
                        gy.data() + o * np + n * plane);
        if (auto* d = t.grad_slot(w)) {
          detail::gemm(false, true, geo.o, geo.patch(), np, gy.data(),
                       col->data(), d->ptr(), true);
        }
        if (auto* d = t.grad_slot(x)) {
          std::vector<T> dcol(geo.patch() * np);
          detail::gemm(true, false, geo.patch(), np, geo.o, t.value(w).ptr(),
                       gy.data(), dcol.data(), false);
          detail::col2im_add(geo, dcol.data(), d->ptr());
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and per-channel ops

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
template <class T>
Var max_pool2(Tape<T>& t, Var x) {
  const auto& s = t.shape(x);
  detail::require_rank("max_pool2", s, 4);
  if (s[2] < 2 || s[3] < 2) shape_fail("max_pool2", "spatial dims < 2 in " + shape_str(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
  const auto& xv = t.value(x);
  Tensor<T> out({n, c, oh, ow});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        out[o] = src[best];
        (*arg)[o] = p * h * w + best;
      }
    }
  }
  return t.record("max_pool2", std::move(out), {x},
                  [x, arg](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[(*arg)[i]] += g[i];
                    }
                  });
}

/// (N,C,H,W) -> (N,C)
template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
  const auto& s = t.shape(x);
  detail::require_rank("global_avg_pool", s, 4);
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  const auto& xv = t.value(x);
  Tensor<T> out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc / static_cast<T>(hw);
  }
  return t.record("global_avg_pool", std::move(out), {x},
                  [x, n, c, hw](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      const T inv = T{1} / static_cast<T>(hw);
                      for (std::size_t p = 0; p < n * c; ++p)
                        for (std::size_t i = 0; i < hw; ++i) (*d)[p * hw + i] += g[p] * inv;
                    }
                  });
}

/// y = x * scale[c] + shift[c] on (N,C) or (N,C,H,W).
template <class T>
Var batch_affine(Tape<T>& t, Var x, Var scale_v, Var shift_v) {
  const auto L = detail::channel_layout("batch_affine", t.shape(x));
  const auto& sc = t.value(scale_v);
  const auto& sh = t.value(shift_v);
  if (sc.shape() != Shape{L.channels} || sh.shape() != Shape{L.channels}) {
    shape_fail("batch_affine", "scale/shift " + shape_str(sc.shape()) + "/" +
                                   shape_str(sh.shape()) + " do not match " +
                                   std::to_string(L.channels) + " channels");
  }
  Tensor<T> out = t.value(x);
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t c = 0; c < L.channels; ++c) {
      T* p = out.ptr() + (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) p[i] = p[i] * sc[c] + sh[c];
    }
  return t.record(
      "batch_affine", std::move(out), {x, scale_v, shift_v},
      [x, scale_v, shift_v, L](Tape<T>& t, Var, const Tensor<T>& g) {
        const auto& xv = t.value(x);
        const auto& sc = t.value(scale_v);
        auto* dx = t.grad_slot(x);
        auto* ds = t.grad_slot(scale_v);
        auto* db = t.grad_slot(shift_v);
        for (std::size_t o = 0; o < L.outer; ++o)
          for (std::size_t c = 0; c < L.channels; ++c) {
            const std::size_t base = (o * L.channels + c) * L.inner;
            T gs = 0, gb = 0;
            for (std::size_t i = 0; i < L.inner; ++i) {
              const T gi = g[base + i];
              if (dx) (*dx)[base + i] += gi * sc[c];
              gs += gi * xv[base + i];
              gb += gi;
            }
            if (ds) (*ds)[c] += gs;
            if (db) (*db)[c] += gb;
          }
      });
}

/// Per-channel bias on (N,C) or (N,C,H,W).
template <class T>
Var add_bias(Tape<T>& t, Var x, Var bias) {
  const auto L = detail::channel_layout("add_bias", t.shape(x));
  const auto& b = t.value(bias);
  if (b.shape() != Shape{L.channels}) {
    shape_fail("add_bias", "bias " + shape_str(b.shape()) + " does not match " +
                               std::to_string(L.channels) + " channels");
  }
  Tensor<T> out = t.value(x);
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t c = 0; c < L.channels; ++c) {
      T* p = out.ptr() + (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) p[i] += b[c];
    }
  return t.record("add_bias", std::move(out), {x, bias},
                  [x, bias, L](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
                    }
                    if (auto* d = t.grad_slot(bias)) {
                      for (std::size_t o = 0; o < L.outer; ++o)
                        for (std::size_t c = 0; c < L.channels; ++c) {
                          const T* p = g.ptr() + (o * L.channels + c) * L.inner;
                          T s = 0;
                          for (std::size_t i = 0; i < L.inner; ++i) s += p[i];
                          (*d)[c] += s;
                        }
                    }
                  });
}

/// Standardizes each channel with the statistics of the current batch.
/// Writes the batch mean and (biased) variance to the optional outputs.
template <class T>
Var batch_standardize(Tape<T>& t, Var x, T eps, Tensor<T>* mean_out = nullptr,
                      Tensor<T>* var_out = nullptr) {
  const auto L = detail::channel_layout("batch_standardize", t.shape(x));
  const std::size_t m = L.outer * L.inner;
  if (m < 2) {
    shape_fail("batch_standardize", "need at least 2 values per channel, got " +
                                        shape_str(t.shape(x)));
  }
  const auto& xv = t.value(x);
  Tensor<T> mean({L.channels}), var({L.channels});
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T* p = xv.ptr() + (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) mean[c] += p[i];
    }
  for (auto& v : mean.data()) v /= static_cast<T>(m);
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T* p = xv.ptr() + (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        const T d = p[i] - mean[c];
        var[c] += d * d;
      }
    }
  for (auto& v : var.data()) v /= static_cast<T>(m);
  auto inv_std = std::make_shared<std::vector<T>>(L.channels);
  for (std::size_t c = 0; c < L.channels; ++c) (*inv_std)[c] = T{1} / std::sqrt(var[c] + eps);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const std::size_t base = (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i)
        out[base + i] = (xv[base + i] - mean[c]) * (*inv_std)[c];
    }
  if (mean_out) *mean_out = mean;
  if (var_out) *var_out = var;
  return t.record(
      "batch_standardize", std::move(out), {x},
      [x, L, m, inv_std](Tape<T>& t, Var self, const Tensor<T>& g) {
        auto* d = t.grad_slot(x);
        if (!d) return;
        const auto& y = t.value(self);
        std::vector<T> sum_g(L.channels, T{0}), sum_gy(L.channels, T{0});
        for (std::size_t o = 0; o < L.outer; ++o)
          for (std::size_t c = 0; c < L.channels; ++c) {
            const std::size_t base = (o * L.channels + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              sum_g[c] += g[base + i];
              sum_gy[c] += g[base + i] * y[base + i];
            }
          }
        const T inv_m = T{1} / static_cast<T>(m);
        for (std::size_t o = 0; o < L.outer; ++o)
          for (std::size_t c = 0; c < L.channels; ++c) {
            const std::size_t base = (o * L.channels + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              (*d)[base + i] += (*inv_std)[c] *
                                (g[base + i] - inv_m * sum_g[c] - inv_m * y[base + i] * sum_gy[c]);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Row-wise ops on (B, D)

/// Row-wise log-softmax of logits.
template <class T>
Var log_softmax(Tape<T>& t, Var x) {
  const auto& s = t.shape(x);
  detail::require_rank("log_softmax", s, 2);
  const std::size_t b = s[0], c = s[1];
  Tensor<T> out = t.value(x);
  for (std::size_t i = 0; i < b; ++i) {
    T* row = out.ptr() + i * c;
    const T mx = *std::max_element(row, row + c);
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
  }
  return t.record("log_softmax", std::move(out), {x},
                  [x, b, c](Tape<T>& t, Var self, const Tensor<T>& g) {
                    auto* d = t.grad_slot(x);
                    if (!d) return;
                    const auto& y = t.value(self);
                    for (std::size_t i = 0; i < b; ++i) {
                      T gs = 0;
                      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                      for (std::size_t j = 0; j < c; ++j)
                        (*d)[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gs;
                    }
                  });
}

/// out[i] = x[i, index[i]]
template <class T>
Var pick(Tape<T>& t, Var x, std::span<const std::size_t> index) {
  const auto& s = t.shape(x);
  detail::require_rank("pick", s, 2);
  if (index.size() != s[0]) {
    shape_fail("pick", std::to_string(index.size()) + " indices for " + shape_str(s));
  }
  for (auto j : index) {
    if (j >= s[1]) throw std::out_of_range("pick: index " + std::to_string(j) +
                                           " >= " + std::to_string(s[1]));
  }
  const std::size_t c = s[1];
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor<T> out({s[0]});
  for (std::size_t i = 0; i < s[0]; ++i) out[i] = t.value(x)[i * c + idx[i]];
  return t.record("pick", std::move(out), {x},
                  [x, c, idx = std::move(idx)](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (std::size_t i = 0; i < idx.size(); ++i) (*d)[i * c + idx[i]] += g[i];
                    }
                  });
}

/// Divides each row by its Euclidean norm. A zero row is an error.
template <class T>
Var l2_normalize(Tape<T>& t, Var x) {
  const auto& s = t.shape(x);
  detail::require_rank("l2_normalize", s, 2);
  const std::size_t b = s[0], dim = s[1];
  Tensor<T> out = t.value(x);
  auto norms = std::make_shared<std::vector<T>>(b);
  for (std::size_t i = 0; i < b; ++i) {
    T* row = out.ptr() + i * dim;
    T sq = 0;
    for (std::size_t j = 0; j < dim; ++j) sq += row[j] * row[j];
    const T nrm = std::sqrt(sq);
    if (!(nrm > std::numeric_limits<T>::min())) {
      throw NumericError("l2_normalize: row " + std::to_string(i) +
                         " has zero norm");
    }
    (*norms)[i] = nrm;
    for (std::size_t j = 0; j < dim; ++j) row[j] /= nrm;
  }
  return t.record("l2_normalize", std::move(out), {x},
                  [x, b, dim, norms](Tape<T>& t, Var self, const Tensor<T>& g) {
                    auto* d = t.grad_slot(x);
                    if (!d) return;
                    const auto& y = t.value(self);
                    for (std::size_t i = 0; i < b; ++i) {
                      T dot = 0;
                      for (std::size_t j = 0; j < dim; ++j) dot += y[i * dim + j] * g[i * dim + j];
                      for (std::size_t j = 0; j < dim; ++j)
                        (*d)[i * dim + j] += (g[i * dim + j] - y[i * dim + j] * dot) / (*norms)[i];
                    }
                  });
}

/// (B,D),(B,D) -> (B): per-row inner products.
template <class T>
Var rowwise_dot(Tape<T>& t, Var a, Var b) {
  detail::require_same("rowwise_dot", t.shape(a), t.shape(b));
  detail::require_rank("rowwise_dot", t.shape(a), 2);
  const std::size_t rows = t.shape(a)[0], dim = t.shape(a)[1];
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Tensor<T> out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < dim; ++j) s += av[i * dim + j] * bv[i * dim + j];
    out[i] = s;
  }
  return t.record("rowwise_dot", std::move(out), {a, b},
                  [a, b, rows, dim](Tape<T>& t, Var, const Tensor<T>& g) {
                    const auto& av = t.value(a);
                    const auto& bv = t.value(b);
                    if (auto* d = t.grad_slot(a)) {
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < dim; ++j) (*d)[i * dim + j] += g[i] * bv[i * dim + j];
                    }
                    if (auto* d = t.grad_slot(b)) {
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < dim; ++j) (*d)[i * dim + j] += g[i] * av[i * dim + j];
                    }
                  });
}

/// (B,M) -> (B): log-sum-exp over the entries of each row whose mask byte is
/// nonzero. Every row needs at least one selected entry.
template <class T>
Var masked_logsumexp(Tape<T>& t, Var x, std::span<const std::uint8_t> mask) {
  const auto& s = t.shape(x);
  detail::require_rank("masked_logsumexp", s, 2);
  if (mask.size() != s[0] * s[1]) {
    shape_fail("masked_logsumexp", "mask of " + std::to_string(mask.size()) +
                                       " entries for " + shape_str(s));
  }
  const std::size_t b = s[0], m = s[1];
  const auto& xv = t.value(x);
  auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  Tensor<T> out({b});
  for (std::size_t i = 0; i < b; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if ((*keep)[i * m + j]) mx = std::max(mx, xv[i * m + j]);
    if (mx == -std::numeric_limits<T>::infinity()) {
      shape_fail("masked_logsumexp", "row " + std::to_string(i) + " selects no entries");
    }
    T acc = 0;
    for (std::size_t j = 0; j < m; ++j)
      if ((*keep)[i * m + j]) acc += std::exp(xv[i * m + j] - mx);
    out[i] = mx + std::log(acc);
  }
  return t.record("masked_logsumexp", std::move(out), {x},
                  [x, b, m, keep](Tape<T>& t, Var self, const Tensor<T>& g) {
                    auto* d = t.grad_slot(x);
                    if (!d) return;
                    const auto& xv = t.value(x);
                    const auto& y = t.value(self);
                    for (std::size_t i = 0; i < b; ++i)
                      for (std::size_t j = 0; j < m; ++j)
                        if ((*keep)[i * m + j])
                          (*d)[i * m + j] += g[i] * std::exp(xv[i * m + j] - y[i]);
                  });
}

/// (B,M) -> (B): maximum over the selected entries of each row. The
/// gradient goes to the first maximizer.
template <class T>
Var masked_rowmax(Tape<T>& t, Var x, std::span<const std::uint8_t> mask) {
  const auto& s = t.shape(x);
  detail::require_rank("masked_rowmax", s, 2);
  if (mask.size() != s[0] * s[1]) {
    shape_fail("masked_rowmax", "mask of " + std::to_string(mask.size()) +
                                    " entries for " + shape_str(s));
  }
  const std::size_t b = s[0], m = s[1];
  const auto& xv = t.value(x);
  std::vector<std::size_t> arg(b, m);
  Tensor<T> out({b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j] && (arg[i] == m || xv[i * m + j] > xv[i * m + arg[i]])) arg[i] = j;
    if (arg[i] == m) shape_fail("masked_rowmax", "row " + std::to_string(i) + " selects no entries");
    out[i] = xv[i * m + arg[i]];
  }
  return t.record("masked_rowmax", std::move(out), {x},
                  [x, m, arg = std::move(arg)](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (std::size_t i = 0; i < arg.size(); ++i) (*d)[i * m + arg[i]] += g[i];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Reductions and structure

template <class T>
Var sum(Tape<T>& t, Var x) {
  const auto& xv = t.value(x);
  T acc = 0;
  for (auto v : xv.data()) acc += v;
  return t.record("sum", Tensor<T>::scalar(acc), {x},
                  [x](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (auto& v : d->data()) v += g[0];
                    }
                  });
}

template <class T>
Var mean(Tape<T>& t, Var x) {
  const auto& xv = t.value(x);
  if (xv.empty()) shape_fail("mean", "empty input");
  T acc = 0;
  for (auto v : xv.data()) acc += v;
  const T n = static_cast<T>(xv.size());
  return t.record("mean", Tensor<T>::scalar(acc / n), {x},
                  [x, n](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (auto& v : d->data()) v += g[0] / n;
                    }
                  });
}

/// Concatenation along axis 0 (any rank) or axis 1 (rank 2).
template <class T>
Var concat(Tape<T>& t, const std::vector<Var>& parts, std::size_t axis = 0) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape first = t.shape(parts[0]);
  if (axis == 0) {
    Shape out_shape = first;
    out_shape[0] = 0;
    for (Var p : parts) {
      const auto& s = t.shape(p);
      if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
        shape_fail("concat", "axis 0: " + shape_str(s) + " vs " + shape_str(first));
      }
      out_shape[0] += s[0];
    }
    std::vector<T> buf;
    buf.reserve(shape_numel(out_shape));
    for (Var p : parts) {
      const auto& v = t.value(p);
      buf.insert(buf.end(), v.data().begin(), v.data().end());
    }
    return t.record("concat", Tensor<T>(out_shape, std::move(buf)), parts,
                    [parts](Tape<T>& t, Var, const Tensor<T>& g) {
                      std::size_t off = 0;
                      for (Var p : parts) {
                        const std::size_t n = t.value(p).size();
                        if (auto* d = t.grad_slot(p)) {
                          for (std::size_t i = 0; i < n; ++i) (*d)[i] += g[off + i];
                        }
                        off += n;
                      }
                    });
  }
  if (axis != 1 || first.size() != 2) {
    shape_fail("concat", "axis " + std::to_string(axis) + " unsupported for " + shape_str(first));
  }
  const std::size_t rows = first[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& s = t.shape(p);
    if (s.size() != 2 || s[0] != rows) {
      shape_fail("concat", "axis 1: " + shape_str(s) + " vs " + shape_str(first));
    }
    widths.push_back(s[1]);
    total += s[1];
  }
  Tensor<T> out({rows, total});
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = t.value(parts[k]);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(v.ptr() + i * widths[k], widths[k], out.ptr() + i * total + col);
    col += widths[k];
  }
  return t.record("concat", std::move(out), parts,
                  [parts, widths, rows, total](Tape<T>& t, Var, const Tensor<T>& g) {
                    std::size_t col = 0;
                    for (std::size_t k = 0; k < parts.size(); ++k) {
                      if (auto* d = t.grad_slot(parts[k])) {
                        for (std::size_t i = 0; i < rows; ++i)
                          for (std::size_t j = 0; j < widths[k]; ++j)
                            (*d)[i * widths[k] + j] += g[i * total + col + j];
                      }
                      col += widths[k];
                    }
                  });
}

/// Rows [begin, end) along axis 0.
template <class T>
Var slice_rows(Tape<T>& t, Var x, std::size_t begin, std::size_t end) {
  const auto& s = t.shape(x);
  if (s.empty() || begin > end || end > s[0]) {
    shape_fail("slice_rows", "rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                                 ") of " + shape_str(s));
  }
  const std::size_t per = s[0] ? t.value(x).size() / s[0] : 0;
  Shape os = s;
  os[0] = end - begin;
  const auto& v = t.value(x);
  Tensor<T> out(os, std::vector<T>(v.ptr() + begin * per, v.ptr() + end * per));
  return t.record("slice_rows", std::move(out), {x},
                  [x, begin, per](Tape<T>& t, Var, const Tensor<T>& g) {
                    if (auto* d = t.grad_slot(x)) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*d)[begin * per + i] += g[i];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Kind-dispatched entry point

enum class OpKind {
  add,
  mul,
  matmul,
  conv2d,
  relu,
  max_pool2,
  global_avg_pool,
  batch_affine,
  log_softmax,
  sum,
  mean,
  concat,
  l2_normalize,
};

struct OpAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t axis = 0;
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::max_pool2: return "max_pool2";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::batch_affine: return "batch_affine";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat: return "concat";
    case OpKind::l2_normalize: return "l2_normalize";
  }
  return "?";
}

template <class T>
Var forward_eval(Tape<T>& t, OpKind kind, const std::vector<Var>& in,
                 const OpAttrs& attrs = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      shape_fail(op_name(kind), "expected " + std::to_string(n) + " inputs, got " +
                                    std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: arity(2); return add(t, in[0], in[1]);
    case OpKind::mul: arity(2); return mul(t, in[0], in[1]);
    case OpKind::matmul: arity(2); return matmul(t, in[0], in[1]);
    case OpKind::conv2d: arity(2); return conv2d(t, in[0], in[1], attrs.stride, attrs.pad);
    case OpKind::relu: arity(1); return relu(t, in[0]);
    case OpKind::max_pool2: arity(1); return max_pool2(t, in[0]);
    case OpKind::global_avg_pool: arity(1); return global_avg_pool(t, in[0]);
    case OpKind::batch_affine: arity(3); return batch_affine(t, in[0], in[1], in[2]);
    case OpKind::log_softmax: arity(1); return log_softmax(t, in[0]);
    case OpKind::sum: arity(1); return sum(t, in[0]);
    case OpKind::mean: arity(1); return mean(t, in[0]);
    case OpKind::concat: return concat(t, in, attrs.axis);
    case OpKind::l2_normalize: arity(1); return l2_normalize(t, in[0]);
  }
  shape_fail("forward_eval", "unknown op");
}

}  // namespace advclr

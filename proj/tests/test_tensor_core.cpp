#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "advclr/gradcheck.hpp"
#include "advclr/ops.hpp"

using namespace advclr;

namespace {

TensorD random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Values bounded away from zero so relu kinks stay outside the FD stencil.
TensorD away_from_zero(Shape s, std::mt19937_64& rng) {
  TensorD t = random_tensor(std::move(s), rng);
  for (auto& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

// Scalar probe <op(x), R> for a fixed random R, so every output coordinate
// contributes to the gradient.
template <class Op>
double check_op(Op op, const TensorD& point, std::uint64_t seed) {
  TensorD weights;
  return grad_check<double>(
      [&](Tape<double>& t, Var x) {
        Var y = op(t, x);
        if (weights.empty()) {
          std::mt19937_64 rng(seed);
          weights = random_tensor(t.shape(y), rng);
        }
        return sum(t, mul(t, y, t.leaf(weights)));
      },
      point, 1e-6);
}

}  // namespace

TEST(Tensor, ShapeMustMatchBuffer) {
  EXPECT_THROW(TensorF({2, 3}, std::vector<float>(5)), ShapeError);
  TensorF t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).dim(0), 3u);
}

TEST(Tensor, OnlyLeadingDimensionMayBeEmpty) {
  EXPECT_NO_THROW(TensorF({0, 3}));
  EXPECT_THROW(TensorF({3, 0}), ShapeError);
}

TEST(Ops, ReluExample) {
  Tape<float> t;
  Var y = relu(t, t.leaf(TensorF({3}, {-1.0f, 0.0f, 2.0f})));
  EXPECT_EQ(t.value(y), TensorF({3}, {0.0f, 0.0f, 2.0f}));
}

TEST(Ops, MatmulIdentity) {
  std::mt19937_64 rng(3);
  TensorD a = random_tensor({3, 3}, rng);
  TensorD eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tape<double> t;
  EXPECT_EQ(t.value(matmul(t, t.leaf(eye), t.leaf(a))), a);
}

TEST(Ops, ConvAllOnesGivesNines) {
  Tape<float> t;
  Var x = t.leaf(TensorF({1, 1, 4, 4}, 1.0f));
  Var w = t.leaf(TensorF({1, 1, 3, 3}, 1.0f));
  const auto& y = t.value(conv2d(t, x, w, 1, 0));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 9.0f);
}

TEST(Ops, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(11);
  const std::size_t n = 2, c = 3, h = 5, w = 6, o = 4;
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      TensorD x = random_tensor({n, c, h, w}, rng);
      TensorD k = random_tensor({o, c, 3, 3}, rng);
      Tape<double> t;
      const auto& y = t.value(conv2d(t, t.leaf(x), t.leaf(k), stride, pad));
      const std::size_t oh = (h + 2 * pad - 3) / stride + 1, ow = (w + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{n, o, oh, ow}));
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double acc = 0;
              for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t ky = 0; ky < 3; ++ky)
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const long yy = long(i * stride + ky) - long(pad);
                    const long xx = long(j * stride + kx) - long(pad);
                    if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) continue;
                    acc += x[((b * c + ic) * h + yy) * w + xx] * k[((oc * c + ic) * 3 + ky) * 3 + kx];
                  }
              EXPECT_NEAR(y[((b * o + oc) * oh + i) * ow + j], acc, 1e-12);
            }
    }
}

TEST(Ops, ShapeErrorsNameOpAndDims) {
  Tape<float> t;
  Var a = t.leaf(TensorF({2, 3}));
  Var b = t.leaf(TensorF({4, 5}));
  try {
    matmul(t, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(t, a, b), ShapeError);
  Var x = t.leaf(TensorF({1, 2, 4, 4}));
  Var w = t.leaf(TensorF({1, 3, 3, 3}));
  EXPECT_THROW(conv2d(t, x, w), ShapeError);
}

TEST(Ops, NonFiniteForwardIsAnError) {
  Tape<float> t;
  Var a = t.leaf(TensorF({1}, {1e30f}));
  EXPECT_THROW(mul(t, a, a), NumericError);
}

TEST(Ops, ForwardEvalCoversOpSet) {
  std::mt19937_64 rng(5);
  Tape<double> t;
  Var img = t.leaf(random_tensor({2, 3, 4, 4}, rng));
  Var w = t.leaf(random_tensor({2, 3, 3, 3}, rng));
  Var m = t.leaf(random_tensor({2, 3}, rng));
  Var sc = t.leaf(random_tensor({3}, rng));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::add, {m, m})), (Shape{2, 3}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::mul, {m, m})), (Shape{2, 3}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::matmul, {m, t.leaf(random_tensor({3, 5}, rng))})),
            (Shape{2, 5}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::conv2d, {img, w}, {2, 1, 0})), (Shape{2, 2, 2, 2}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::relu, {img})), (Shape{2, 3, 4, 4}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::max_pool2, {img})), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::global_avg_pool, {img})), (Shape{2, 3}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::batch_affine, {img, sc, sc})), (Shape{2, 3, 4, 4}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::log_softmax, {m})), (Shape{2, 3}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::sum, {m})), (Shape{1}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::mean, {m})), (Shape{1}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::concat, {m, m}, {1, 0, 1})), (Shape{2, 6}));
  EXPECT_EQ(t.shape(forward_eval(t, OpKind::l2_normalize, {m})), (Shape{2, 3}));
  EXPECT_THROW(forward_eval(t, OpKind::relu, {m, m}), ShapeError);
}

TEST(Backward, SquareAtThree) {
  Tape<double> t;
  Var x = t.leaf(TensorD::scalar(3.0), true);
  auto g = t.backward(mul(t, x, x));
  EXPECT_DOUBLE_EQ(g[x].item(), 6.0);
}

TEST(Backward, ReluSubgradient) {
  Tape<double> t;
  Var x = t.leaf(TensorD({2}, {2.0, -1.0}), true);
  auto g = t.backward(sum(t, relu(t, x)));
  EXPECT_EQ(g[x], TensorD({2}, {1.0, 0.0}));
  Tape<double> t0;
  Var z = t0.leaf(TensorD({1}, {0.0}), true);
  EXPECT_EQ(t0.backward(sum(t0, relu(t0, z)))[z].item(), 0.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> t;
  Var x = t.leaf(TensorD({2}, {1.0, 2.0}), true);
  EXPECT_THROW(t.backward(relu(t, x)), ShapeError);
}

TEST(Backward, UnreachableLeafGetsZero) {
  Tape<double> t;
  Var x = t.leaf(TensorD({2}, {1.0, 2.0}), true);
  Var unused = t.leaf(TensorD({3}, {1.0, 2.0, 3.0}), true);
  auto g = t.backward(sum(t, x));
  EXPECT_EQ(g[unused], TensorD({3}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tape<double> t;
  Var x = t.leaf(TensorD::scalar(2.0), true);
  Var y = mul(t, x, x);
  auto g = t.backward(add(t, y, y));  // 2 x^2
  EXPECT_DOUBLE_EQ(g[x].item(), 8.0);
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const TensorD x = random_tensor({4, 5}, rng);
  const TensorD w1 = random_tensor({5, 7}, rng), b1 = random_tensor({7}, rng);
  const TensorD w2 = random_tensor({7, 3}, rng), b2 = random_tensor({3}, rng);
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  // Loss as a function of one parameter slot, the rest held fixed.
  auto net = [&](int slot) {
    return [&, slot](Tape<double>& t, Var p) {
      Var vw1 = slot == 0 ? p : t.leaf(w1), vb1 = slot == 1 ? p : t.leaf(b1);
      Var vw2 = slot == 2 ? p : t.leaf(w2), vb2 = slot == 3 ? p : t.leaf(b2);
      Var h = relu(t, add_bias(t, matmul(t, t.leaf(x), vw1), vb1));
      Var logits = add_bias(t, matmul(t, h, vw2), vb2);
      return scale(t, mean(t, pick(t, log_softmax(t, logits), labels)), -1.0);
    };
  };
  const TensorD* points[] = {&w1, &b1, &w2, &b2};
  for (int slot = 0; slot < 4; ++slot) {
    const double err = grad_check<double>(net(slot), *points[slot], 1e-5);
    EXPECT_LE(err, 1e-4) << "slot " << slot;
  }
}

TEST(GradCheck, SumOfSquares) {
  const double err = grad_check<double>(
      [](Tape<double>& t, Var x) { return sum(t, mul(t, x, x)); }, TensorD({3}, {1.0, 2.0, 3.0}),
      1e-5);
  EXPECT_LE(err, 1e-8);
}

TEST(GradCheck, ConstantFunction) {
  const double err = grad_check<double>(
      [](Tape<double>& t, Var) { return t.leaf(TensorD::scalar(4.0)); },
      TensorD({3}, {1.0, 2.0, 3.0}), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, NonFiniteValueThrows) {
  EXPECT_THROW(grad_check<double>(
                   [](Tape<double>& t, Var x) {
                     // 1e200 * 1e200 overflows.
                     Var big = scale(t, x, 1e200);
                     return sum(t, mul(t, big, big));
                   },
                   TensorD({1}, {1.0}), 1e-5),
               NumericError);
}

TEST(GradCheck, ThreeLayerConvNet) {
  std::mt19937_64 rng(8);
  const TensorD x = random_tensor({2, 2, 6, 6}, rng, 0.0, 1.0);
  const TensorD k1 = random_tensor({3, 2, 3, 3}, rng), k2 = random_tensor({4, 3, 3, 3}, rng);
  const TensorD k3 = random_tensor({5, 4, 3, 3}, rng);
  auto loss = [&](Tape<double>& t, Var in, Var c1) {
    Var h = relu(t, conv2d(t, in, c1, 1, 1));
    h = relu(t, conv2d(t, h, t.leaf(k2), 2, 1));
    h = conv2d(t, h, t.leaf(k3), 1, 1);
    Var z = global_avg_pool(t, h);
    return mean(t, mul(t, z, z));
  };
  EXPECT_LE(grad_check<double>([&](Tape<double>& t, Var p) { return loss(t, t.leaf(x), p); }, k1,
                               1e-6),
            1e-4);
  EXPECT_LE(grad_check<double>([&](Tape<double>& t, Var p) { return loss(t, p, t.leaf(k1)); }, x,
                               1e-6),
            1e-4);
}

// Every differentiable op against central differences over random shapes
// and seeds.
TEST(OpProperty, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dim(2, 4);
    const std::size_t n = dim(rng), c = dim(rng), h = 2 * dim(rng), w = 2 * dim(rng);
    const TensorD img = away_from_zero({n, c, h, w}, rng);
    const TensorD mat = away_from_zero({n, c}, rng);
    const TensorD other = random_tensor({n, c}, rng);
    const TensorD chan = random_tensor({c}, rng);
    const TensorD kern = random_tensor({3, c, 3, 3}, rng);
    const TensorD rmat = random_tensor({c, 5}, rng);
    std::vector<std::uint8_t> mask(n * c, 1);
    for (std::size_t i = 0; i < n; ++i) mask[i * c + (i % c)] = 0;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = (i * 7) % c;
    const double tol = 1e-4;
    auto expect = [&](const char* name, double err) {
      EXPECT_LE(err, tol) << name << " seed " << seed;
    };

    expect("add", check_op([&](Tape<double>& t, Var x) { return add(t, x, t.leaf(other)); }, mat, seed));
    expect("sub", check_op([&](Tape<double>& t, Var x) { return sub(t, t.leaf(other), x); }, mat, seed));
    expect("mul", check_op([&](Tape<double>& t, Var x) { return mul(t, x, t.leaf(other)); }, mat, seed));
    expect("scale", check_op([&](Tape<double>& t, Var x) { return scale(t, x, -2.5); }, mat, seed));
    expect("relu", check_op([&](Tape<double>& t, Var x) { return relu(t, x); }, img, seed));
    expect("maximum_scalar",
           check_op([&](Tape<double>& t, Var x) { return maximum_scalar(t, x, 0.0); }, mat, seed));
    expect("reshape",
           check_op([&](Tape<double>& t, Var x) { return reshape(t, x, {c, n}); }, mat, seed));
    expect("matmul.a",
           check_op([&](Tape<double>& t, Var x) { return matmul(t, x, t.leaf(rmat)); }, mat, seed));
    expect("matmul.b",
           check_op([&](Tape<double>& t, Var x) { return matmul(t, t.leaf(mat), x); }, rmat, seed));
    expect("transpose", check_op([&](Tape<double>& t, Var x) { return transpose(t, x); }, mat, seed));
    expect("conv2d.x", check_op([&](Tape<double>& t, Var x) { return conv2d(t, x, t.leaf(kern), 2, 1); },
                                img, seed));
    expect("conv2d.w", check_op([&](Tape<double>& t, Var x) { return conv2d(t, t.leaf(img), x, 1, 1); },
                                kern, seed));
    expect("max_pool2", check_op([&](Tape<double>& t, Var x) { return max_pool2(t, x); }, img, seed));
    expect("global_avg_pool",
           check_op([&](Tape<double>& t, Var x) { return global_avg_pool(t, x); }, img, seed));
    expect("batch_affine.x", check_op([&](Tape<double>& t, Var x) {
             return batch_affine(t, x, t.leaf(chan), t.leaf(chan));
           }, img, seed));
    expect("batch_affine.scale", check_op([&](Tape<double>& t, Var s) {
             return batch_affine(t, t.leaf(img), s, t.leaf(chan));
           }, chan, seed));
    expect("batch_affine.shift", check_op([&](Tape<double>& t, Var s) {
             return batch_affine(t, t.leaf(img), t.leaf(chan), s);
           }, chan, seed));
    expect("add_bias", check_op([&](Tape<double>& t, Var b) { return add_bias(t, t.leaf(img), b); },
                                chan, seed));
    expect("batch_standardize", check_op([&](Tape<double>& t, Var x) {
             return batch_standardize(t, x, 1e-5);
           }, img, seed));
    expect("log_softmax", check_op([&](Tape<double>& t, Var x) { return log_softmax(t, x); }, mat, seed));
    expect("pick", check_op([&](Tape<double>& t, Var x) { return pick(t, x, idx); }, mat, seed));
    expect("l2_normalize", check_op([&](Tape<double>& t, Var x) { return l2_normalize(t, x); }, mat, seed));
    expect("rowwise_dot", check_op([&](Tape<double>& t, Var x) {
             return rowwise_dot(t, x, t.leaf(other));
           }, mat, seed));
    expect("masked_logsumexp", check_op([&](Tape<double>& t, Var x) {
             return masked_logsumexp(t, x, mask);
           }, mat, seed));
    expect("masked_rowmax", check_op([&](Tape<double>& t, Var x) {
             return masked_rowmax(t, x, mask);
           }, mat, seed));
    expect("sum", check_op([&](Tape<double>& t, Var x) { return sum(t, x); }, img, seed));
    expect("mean", check_op([&](Tape<double>& t, Var x) { return mean(t, x); }, img, seed));
    expect("concat0", check_op([&](Tape<double>& t, Var x) {
             return concat(t, {x, t.leaf(other), x}, 0);
           }, mat, seed));
    expect("concat1", check_op([&](Tape<double>& t, Var x) {
             return concat(t, {t.leaf(other), x}, 1);
           }, mat, seed));
    expect("slice_rows", check_op([&](Tape<double>& t, Var x) { return slice_rows(t, x, 1, n); }, mat, seed));
  }
}

TEST(L2Normalize, UnitNormsForNonzeroRows) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    TensorD x = random_tensor({5, 9}, rng, -100.0, 100.0);
    Tape<double> t;
    const auto& y = t.value(l2_normalize(t, t.leaf(x)));
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += y[i * 9 + j] * y[i * 9 + j];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }
  }
  Tape<double> t;
  EXPECT_THROW(l2_normalize(t, t.leaf(TensorD({1, 3}))), NumericError);
}

TEST(Determinism, SameOpsSameBits) {
  std::mt19937_64 rng(2);
  const TensorF x = random_tensor({3, 2, 6, 6}, rng).cast<float>();
  const TensorF k = random_tensor({4, 2, 3, 3}, rng).cast<float>();
  auto run = [&] {
    Tape<float> t;
    Var xv = t.leaf(x);
    Var kv = t.leaf(k, true);
    Var y = global_avg_pool(t, relu(t, conv2d(t, xv, kv, 2, 1)));
    Var l = sum(t, l2_normalize(t, y));
    auto g = t.backward(l);
    return std::make_pair(t.value(y), g.take(kv));
  };
  EXPECT_EQ(run(), run());
}

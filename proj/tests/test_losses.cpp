#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "advclr/gradcheck.hpp"
#include "advclr/losses.hpp"

using namespace advclr;

namespace {

TensorD random_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  TensorD t({n, d});
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

TensorD normalized(const TensorD& x) {
  TensorD out = x;
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / std::sqrt(s);
  }
  return out;
}

std::vector<double> row(const TensorD& z, std::size_t i) {
  const std::size_t d = z.dim(1);
  return {z.ptr() + i * d, z.ptr() + (i + 1) * d};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double adv_value(const TensorD& o, const TensorD& p, const TensorD& c, double tau = 0.1) {
  Tape<double> t;
  return t.value(adv_contrastive(t, t.leaf(o), t.leaf(p), t.leaf(c), tau)).item();
}

// Direct transcription: for each anchor and each perturbed view, the
// positive is that view of the same image and the negatives are the three
// views of every other image.
double brute_force_adv(const TensorD& o, const TensorD& p, const TensorD& c, double tau) {
  const std::size_t b = o.dim(0);
  double total = 0;
  for (const TensorD* view : {&p, &c}) {
    double term = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const double pos = std::exp(dot(row(o, i), row(*view, i)) / tau);
      double denom = pos;
      for (std::size_t j = 0; j < b; ++j) {
        if (j == i) continue;
        for (const TensorD* v : {&o, &p, &c}) denom += std::exp(dot(row(o, i), row(*v, j)) / tau);
      }
      term += -std::log(pos / denom);
    }
    total += term / static_cast<double>(b);
  }
  return 0.5 * total;
}

// One anchor; pool rows owned by others all at the positive's similarity.
double equal_similarity_loss(std::size_t negatives) {
  std::mt19937_64 rng(negatives);
  const TensorD a = normalized(random_rows(1, 16, rng));
  const TensorD p = normalized(random_rows(1, 16, rng));
  TensorD pool({negatives, 16});
  for (std::size_t k = 0; k < negatives; ++k) std::copy_n(p.ptr(), 16, pool.ptr() + k * 16);
  std::vector<std::size_t> owner(negatives, 1);
  Tape<double> t;
  return t.value(info_nce(t, t.leaf(a), t.leaf(p), t.leaf(pool), std::span<const std::size_t>(owner), 0.1))
      .item();
}

}  // namespace

TEST(CosineSim, Examples) {
  const std::vector<double> v{0.3, -1.2, 2.0};
  const std::vector<double> neg{-0.3, 1.2, -2.0};
  EXPECT_NEAR(cosine_sim<double>(v, v), 1.0, 1e-12);
  EXPECT_NEAR(cosine_sim<double>(v, neg), -1.0, 1e-12);
  EXPECT_EQ(cosine_sim<double>(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_THROW(cosine_sim<double>(v, std::vector<double>{0, 0, 0}), NumericError);
}

TEST(InfoNce, EqualSimilaritiesGiveLogOnePlusN) {
  for (std::size_t n : {1u, 7u, 63u}) {
    EXPECT_NEAR(equal_similarity_loss(n), std::log(1.0 + static_cast<double>(n)), 1e-6) << "N=" << n;
  }
  EXPECT_NEAR(equal_similarity_loss(1), 0.6931, 1e-4);
}

TEST(InfoNce, SeparatedPositiveNearZero) {
  const std::size_t n = 5;
  TensorD a({1, 2}, {1.0, 0.0});
  TensorD pool({n, 2});
  for (std::size_t k = 0; k < n; ++k) pool[k * 2] = -1.0;
  std::vector<std::size_t> owner(n, 1);
  Tape<double> t;
  const double loss =
      t.value(info_nce(t, t.leaf(a), t.leaf(a), t.leaf(pool), std::span<const std::size_t>(owner), 0.1))
          .item();
  EXPECT_NEAR(loss, std::log(1.0 + n * std::exp(-20.0)), 1e-12);
  EXPECT_GT(loss, 0.0);
}

TEST(InfoNce, RescaleInvariance) {
  std::mt19937_64 rng(4);
  const TensorD a = random_rows(6, 32, rng), p = random_rows(6, 32, rng);
  auto loss = [&](double c) {
    TensorD as = a, ps = p;
    for (auto& v : as.data()) v *= c;
    for (auto& v : ps.data()) v *= c;
    Tape<double> t;
    Var za = l2_normalize(t, t.leaf(as)), zp = l2_normalize(t, t.leaf(ps));
    return t.value(info_nce(t, za, zp)).item();
  };
  const double base = loss(1.0);
  for (double c : {1e-3, 0.5, 5.0, 1e4}) EXPECT_NEAR(loss(c), base, 1e-6) << "c=" << c;
}

TEST(InfoNce, NonPositiveTemperatureRejected) {
  std::mt19937_64 rng(1);
  const TensorD z = normalized(random_rows(3, 4, rng));
  Tape<double> t;
  EXPECT_THROW(info_nce(t, t.leaf(z), t.leaf(z), 0.0), std::invalid_argument);
  EXPECT_THROW(info_nce(t, t.leaf(z), t.leaf(z), -0.1), std::invalid_argument);
}

TEST(InfoNce, RejectsNonUnitRows) {
  Tape<double> t;
  Var z = t.leaf(TensorD({2, 2}, {2.0, 0.0, 0.0, 1.0}));
  EXPECT_THROW(info_nce(t, z, z), std::invalid_argument);
}

TEST(InfoNce, StrictlyDecreasesAsPositiveApproaches) {
  std::mt19937_64 rng(9);
  const TensorD anchor = normalized(random_rows(1, 8, rng));
  const TensorD far = normalized(random_rows(1, 8, rng));
  const TensorD pool = normalized(random_rows(4, 8, rng));
  std::vector<std::size_t> owner(4, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (double w = 0.0; w <= 1.0; w += 0.1) {
    TensorD pos({1, 8});
    for (std::size_t j = 0; j < 8; ++j) pos[j] = (1 - w) * far[j] + w * anchor[j];
    pos = normalized(pos);
    Tape<double> t;
    const double l = t.value(info_nce(t, t.leaf(anchor), t.leaf(pos), t.leaf(pool),
                                      std::span<const std::size_t>(owner), 0.1))
                         .item();
    EXPECT_LT(l, prev);
    EXPECT_GT(l, 0.0);
    prev = l;
  }
}

TEST(AdvContrastive, BruteForceTwoImages) {
  // Hand-built unit rows in 3-D.
  const double s = 1.0 / std::sqrt(2.0);
  const TensorD o({2, 3}, {1, 0, 0, 0, 1, 0});
  const TensorD p({2, 3}, {s, s, 0, 0, s, s});
  const TensorD c({2, 3}, {s, 0, s, -s, s, 0});
  for (double tau : {0.1, 0.5, 1.0}) {
    EXPECT_NEAR(adv_value(o, p, c, tau), brute_force_adv(o, p, c, tau), 1e-6) << "tau " << tau;
  }
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const TensorD ro = normalized(random_rows(2, 8, rng)), rp = normalized(random_rows(2, 8, rng));
    const TensorD rc = normalized(random_rows(2, 8, rng));
    EXPECT_NEAR(adv_value(ro, rp, rc), brute_force_adv(ro, rp, rc, 0.1), 1e-6);
  }
}

TEST(AdvContrastive, DuplicatePositivesCollapse) {
  std::mt19937_64 rng(2);
  const TensorD o = normalized(random_rows(4, 8, rng)), p = normalized(random_rows(4, 8, rng));
  std::vector<std::size_t> owner(12);
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t i = 0; i < 4; ++i) owner[v * 4 + i] = i;
  Tape<double> t;
  Var vo = t.leaf(o), vp = t.leaf(p);
  Var pool = concat(t, {vo, vp, vp}, 0);
  const double single = t.value(info_nce(t, vo, vp, pool, std::span<const std::size_t>(owner), 0.1)).item();
  EXPECT_NEAR(adv_value(o, p, p), single, 1e-12);
}

TEST(AdvContrastive, PermutationAndSwapInvariance) {
  std::mt19937_64 rng(6);
  const TensorD o = normalized(random_rows(5, 8, rng)), p = normalized(random_rows(5, 8, rng));
  const TensorD c = normalized(random_rows(5, 8, rng));
  const double base = adv_value(o, p, c);
  EXPECT_NEAR(adv_value(o, c, p), base, 1e-12);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto permute = [&](const TensorD& z) {
    TensorD out(z.shape());
    for (std::size_t i = 0; i < 5; ++i) std::copy_n(z.ptr() + perm[i] * 8, 8, out.ptr() + i * 8);
    return out;
  };
  EXPECT_NEAR(adv_value(permute(o), permute(p), permute(c)), base, 1e-6);
  EXPECT_GT(base, 0.0);
}

TEST(AdvContrastive, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(15);
  const TensorD raw = random_rows(9, 6, rng);  // three views of three images
  const double err = grad_check<double>(
      [](Tape<double>& t, Var x) {
        Var z = l2_normalize(t, x);
        return adv_contrastive(t, slice_rows(t, z, 0, 3), slice_rows(t, z, 3, 6),
                               slice_rows(t, z, 6, 9), 0.1);
      },
      raw, 1e-6);
  EXPECT_LE(err, 1e-4);
  const double err_nce = grad_check<double>(
      [](Tape<double>& t, Var x) {
        Var z = l2_normalize(t, x);
        return info_nce(t, slice_rows(t, z, 0, 4), slice_rows(t, z, 4, 8), 0.2);
      },
      random_rows(8, 5, rng), 1e-6);
  EXPECT_LE(err_nce, 1e-4);
}

TEST(CrossEntropy, UniformLogits) {
  Tape<double> t;
  const std::vector<std::size_t> y{3, 7};
  EXPECT_NEAR(t.value(cross_entropy(t, t.leaf(TensorD({2, 10}, 0.4)), y)).item(), std::log(10.0), 1e-12);
  EXPECT_NEAR(std::log(10.0), 2.3026, 1e-4);
}

TEST(CrossEntropy, LargeMarginApproachesZero) {
  double prev = std::numeric_limits<double>::infinity();
  for (double m : {1.0, 5.0, 20.0, 50.0}) {
    TensorD logits({1, 10});
    logits[4] = m;
    Tape<double> t;
    const std::vector<std::size_t> y{4};
    const double l = t.value(cross_entropy(t, t.leaf(logits), y)).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-18);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const std::vector<std::size_t> y{1, 9, 0, 4};
  const double err = grad_check<double>(
      [&](Tape<double>& t, Var x) { return cross_entropy(t, x, y); }, random_rows(4, 10, rng), 1e-6);
  EXPECT_LE(err, 1e-5);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape<double> t;
  const std::vector<std::size_t> y{10};
  EXPECT_THROW(cross_entropy(t, t.leaf(TensorD({1, 10})), y), std::out_of_range);
}

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "advclr/checkpoint.hpp"
#include "advclr/eval.hpp"
#include "advclr/train.hpp"

using namespace advclr;

namespace {

EncoderSpec toy() { return EncoderSpec{}; }

PretrainConfig quick_pretrain(std::size_t epochs, std::size_t batch, double lr0) {
  PretrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.lr0 = lr0;
  c.pgd_view.num_steps = 3;
  c.cw_view.num_steps = 3;
  c.augment.crop_pad = 1;
  c.seed = 3;
  return c;
}

FinetuneConfig probe_config() {
  FinetuneConfig c;
  c.epochs = 20;
  c.batch_size = 128;
  c.lr = 1e-2;
  c.seed = 3;
  return c;
}

// Shared pretrained encoder for the fine-tuning tests.
struct Pretrained {
  Dataset train = make_synthetic(10, 100, 8, 21);
  Dataset test = make_synthetic(10, 30, 8, 22, {.split = Split::test});
  ModelParams<float> params;

  Pretrained() {
    auto cfg = quick_pretrain(3, 64, linear_scaled_lr(64));
    params = act_pretrain(train, toy(), cfg).params;
  }

  static const Pretrained& get() {
    static const Pretrained p;
    return p;
  }
};

}  // namespace

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.4), 0.4);
  EXPECT_NEAR(cosine_lr(100, 100, 0.4), 0.0, 1e-17);
  EXPECT_NEAR(cosine_lr(50, 100, 0.4), 0.2, 1e-15);
  EXPECT_NEAR(cosine_lr(25, 100, 1.0), 0.5 * (1.0 + std::cos(std::numbers::pi / 4)), 1e-15);
  EXPECT_THROW(cosine_lr(0, 0, 0.4), std::invalid_argument);
  EXPECT_THROW(cosine_lr(11, 10, 0.4), std::invalid_argument);
}

TEST(CosineLr, NonIncreasing) {
  for (std::size_t total : {1u, 7u, 391u}) {
    double prev = cosine_lr(0, total, 0.4);
    for (std::size_t s = 1; s <= total; ++s) {
      const double lr = cosine_lr(s, total, 0.4);
      EXPECT_LE(lr, prev);
      EXPECT_GE(lr, 0.0);
      prev = lr;
    }
  }
}

TEST(LinearScaledLr, MatchesReference) {
  EXPECT_DOUBLE_EQ(linear_scaled_lr(512), 0.4);
  EXPECT_DOUBLE_EQ(linear_scaled_lr(128), 0.1);
  EXPECT_DOUBLE_EQ(linear_scaled_lr(64), 0.05);
}

TEST(Sgd, PlainStep) {
  std::vector<double> p{0.0}, g{1.0}, v{0.0};
  sgd_momentum_update<double>(p, g, v, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0], -0.1);
}

TEST(Sgd, MomentumTwoSteps) {
  std::vector<double> p{0.0}, g{1.0}, v{0.0};
  sgd_momentum_update<double>(p, g, v, 1.0, 0.9);
  sgd_momentum_update<double>(p, g, v, 1.0, 0.9);
  EXPECT_NEAR(p[0], -2.9, 1e-15);
  EXPECT_NEAR(v[0], 1.9, 1e-15);
}

TEST(Sgd, ZeroGradientFixedPoint) {
  std::vector<double> p{0.3, -2.0}, g{0.0, 0.0}, v{0.0, 0.0};
  for (int i = 0; i < 5; ++i) sgd_momentum_update<double>(p, g, v, 0.5, 0.9);
  EXPECT_EQ(p, (std::vector<double>{0.3, -2.0}));
}

TEST(Sgd, ShapeMismatch) {
  std::vector<double> p{0.0, 1.0}, g{1.0}, v{0.0, 0.0};
  EXPECT_THROW(sgd_momentum_update<double>(p, g, v, 0.1, 0.9), ShapeError);
  auto params = init_params<double>(toy(), 10, 1);
  OptimizerState<double> st;
  std::vector<TensorD> grads(params.entries.size() - 1);
  EXPECT_THROW(sgd_momentum_step(params, grads, st, 0.1, 0.9), ShapeError);
}

TEST(Sgd, FrozenEntriesUntouched) {
  auto params = set_freeze(init_params<double>(toy(), 10, 1), Scope::encoder, true);
  const auto before = params;
  std::vector<TensorD> grads;
  for (const auto& e : params.entries) grads.emplace_back(e.value.shape(), 1.0);
  OptimizerState<double> st;
  sgd_momentum_step(params, grads, st, 0.1, 0.9);
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    if (params.entries[i].scope == Scope::encoder || params.entries[i].buffer) {
      EXPECT_EQ(params.entries[i].value, before.entries[i].value) << params.entries[i].name;
    } else {
      EXPECT_NE(params.entries[i].value, before.entries[i].value) << params.entries[i].name;
    }
  }
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  for (double scale : {1.0, 100.0, 1e-3}) {
    std::vector<double> p{0.0, 0.0, 0.0}, g{0.5 * scale, -2.0 * scale, 7.0 * scale};
    std::vector<double> m(3, 0.0), v(3, 0.0);
    adam_update<double>(p, g, m, v, 1, 1e-3);
    EXPECT_NEAR(p[0], -1e-3, 1e-7) << scale;
    EXPECT_NEAR(p[1], 1e-3, 1e-7) << scale;
    EXPECT_NEAR(p[2], -1e-3, 1e-7) << scale;
  }
}

TEST(Adam, ZeroGradientFixedPoint) {
  std::vector<double> p{1.5, -0.25}, g{0.0, 0.0}, m(2, 0.0), v(2, 0.0);
  for (std::size_t s = 1; s <= 50; ++s) adam_update<double>(p, g, m, v, s, 0.1);
  EXPECT_EQ(p, (std::vector<double>{1.5, -0.25}));
}

TEST(Adam, MatchesHandIteration) {
  std::vector<double> p{1.0}, m{0.0}, v{0.0};
  const std::vector<double> gs{0.2, -0.1, 0.4};
  double rp = 1.0, rm = 0.0, rv = 0.0;
  for (std::size_t s = 1; s <= gs.size(); ++s) {
    std::vector<double> g{gs[s - 1]};
    adam_update<double>(p, g, m, v, s, 0.01);
    rm = 0.9 * rm + 0.1 * gs[s - 1];
    rv = 0.999 * rv + 0.001 * gs[s - 1] * gs[s - 1];
    const double mh = rm / (1 - std::pow(0.9, s)), vh = rv / (1 - std::pow(0.999, s));
    rp -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_NEAR(p[0], rp, 1e-14);
}

TEST(Adam, ShapeMismatch) {
  std::vector<double> p{0.0}, g{1.0, 1.0}, m{0.0}, v{0.0};
  EXPECT_THROW(adam_update<double>(p, g, m, v, 1, 0.1), ShapeError);
}

TEST(Pretrain, ZeroEpochsRejected) {
  const auto ds = make_synthetic(10, 2, 8, 1);
  auto cfg = quick_pretrain(0, 8, 0.05);
  EXPECT_THROW(act_pretrain(ds, toy(), cfg), std::invalid_argument);
  cfg.epochs = 1;
  EXPECT_THROW(act_pretrain(Dataset{}, toy(), cfg), DataError);
}

TEST(Pretrain, RepeatRunsAreIdentical) {
  const auto ds = make_synthetic(8, 8, 8, 5);
  ASSERT_EQ(ds.size(), 64u);
  const auto cfg = quick_pretrain(2, 16, 0.05);
  const auto a = act_pretrain(ds, toy(), cfg);
  const auto b = act_pretrain(ds, toy(), cfg);
  EXPECT_EQ(checkpoint_bytes(a.params), checkpoint_bytes(b.params));
  EXPECT_EQ(a.log.to_jsonl(false), b.log.to_jsonl(false));
  ASSERT_EQ(a.log.epochs.size(), 2u);
  for (const auto& r : a.log.epochs) {
    EXPECT_EQ(r.samples, 64u);
    EXPECT_EQ(r.pgd_views, r.samples);
    EXPECT_EQ(r.cw_views, r.samples);
  }
  EXPECT_FALSE(a.params.entries[a.params.index("cls.w")].frozen);
}

TEST(Pretrain, LossDecreases) {
  const auto ds = make_synthetic(10, 30, 8, 9);
  const auto res = act_pretrain(ds, toy(), quick_pretrain(5, 64, 0.05));
  ASSERT_EQ(res.log.epochs.size(), 5u);
  EXPECT_LT(res.log.epochs[4].loss, res.log.epochs[0].loss);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(res.log.epochs[i].epoch, i + 1);
}

TEST(Pretrain, WritesCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "advclr_pretrain_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto cfg = quick_pretrain(2, 16, 0.05);
  cfg.checkpoint_dir = dir;
  cfg.checkpoint_every = 1;
  const auto res = act_pretrain(make_synthetic(4, 8, 8, 1), toy(), cfg);
  EXPECT_TRUE(std::filesystem::exists(dir / "pretrain_epoch1.ckpt"));
  EXPECT_EQ(load_checkpoint(dir / "pretrain_final.ckpt"), res.params);
  std::filesystem::remove_all(dir);
}

TEST(Finetune, EncoderBitwiseFrozen) {
  const auto& pre = Pretrained::get();
  const auto before_enc = params_digest(pre.params, Scope::encoder);
  const auto before_proj = params_digest(pre.params, Scope::projection);
  const auto res = finetune(pre.train, pre.params, 10, probe_config());
  EXPECT_EQ(params_digest(res.params, Scope::encoder), before_enc);
  EXPECT_EQ(params_digest(res.params, Scope::projection), before_proj);
  EXPECT_NE(params_digest(res.params, Scope::classifier), params_digest(pre.params, Scope::classifier));
  for (std::size_t i = 0; i < res.params.entries.size(); ++i) {
    if (res.params.entries[i].scope == Scope::encoder) {
      EXPECT_EQ(res.params.entries[i].value, pre.params.entries[i].value);
    }
  }
}

TEST(Finetune, PretrainedProbeIsAccurate) {
  const auto& pre = Pretrained::get();
  const auto tuned = finetune(pre.train, pre.params, 10, probe_config());
  const double acc = clean_accuracy(tuned.params, pre.test);
  EXPECT_GE(acc, 0.80);

  const auto random_init = init_params<float>(toy(), 10, 3);
  const auto random_tuned = finetune(pre.train, random_init, 10, probe_config());
  EXPECT_LT(clean_accuracy(random_tuned.params, pre.test), acc);
}

TEST(Finetune, Errors) {
  const auto& pre = Pretrained::get();
  EXPECT_THROW(finetune(make_synthetic(10, 2, 16, 1), pre.params, 10, probe_config()),
               std::invalid_argument);
  EXPECT_THROW(finetune(pre.train, pre.params, 7, probe_config()), std::invalid_argument);
  EXPECT_THROW(finetune(Dataset{}, pre.params, 10, probe_config()), DataError);
  FinetuneConfig zero = probe_config();
  zero.epochs = 0;
  EXPECT_THROW(finetune(pre.train, pre.params, 10, zero), std::invalid_argument);
}

TEST(Finetune, NewLabelSetGetsFreshHead) {
  const auto& pre = Pretrained::get();
  const auto small = make_synthetic(4, 10, 8, 30);
  auto cfg = probe_config();
  cfg.epochs = 2;
  const auto res = finetune(small, pre.params, 4, cfg);
  EXPECT_EQ(res.params.num_classes, 4u);
  EXPECT_EQ(res.params.entries[res.params.index("cls.b")].value.size(), 4u);
  EXPECT_EQ(params_digest(res.params, Scope::encoder), params_digest(pre.params, Scope::encoder));
}

TEST(Supervised, ReducesLossAndIsDeterministic) {
  const auto ds = make_synthetic(10, 20, 8, 4);
  SupervisedConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 50;
  cfg.lr0 = linear_scaled_lr(50);
  cfg.seed = 2;
  const auto a = train_supervised(ds, toy(), cfg);
  const auto b = train_supervised(ds, toy(), cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_LT(a.log.epochs.back().loss, a.log.epochs.front().loss);
}

TEST(TrainLog, JsonLines) {
  TrainLog log;
  log.epochs.push_back({1, 2.5, 0.1, 3.0, 64, 64, 64});
  log.epochs.push_back({2, 1.5, 0.05, 3.0, 64, 64, 64});
  const std::string with = log.to_jsonl();
  std::istringstream in(with);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"].get<std::size_t>(), ++n);
    EXPECT_TRUE(j.contains("seconds"));
    EXPECT_EQ(j["pgd_views"], j["samples"]);
  }
  EXPECT_EQ(n, 2u);
  EXPECT_EQ(log.to_jsonl(false).find("seconds"), std::string::npos);
  EXPECT_EQ(log.to_jsonl(false).rfind("{\"epoch\":1,\"loss\":2.5,\"lr\":0.1,", 0), 0u);
}

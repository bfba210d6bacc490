#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "advclr/attack.hpp"
#include "advclr/checkpoint.hpp"
#include "advclr/data.hpp"
#include "advclr/losses.hpp"
#include "advclr/model.hpp"
#include "advclr/optim.hpp"

namespace advclr {

/// Learning rate of 0.4 at batch 512, scaled linearly to `batch_size`.
inline double linear_scaled_lr(std::size_t batch_size, double base_lr = 0.4,
                               std::size_t base_batch = 512) {
  return base_lr * static_cast<double>(batch_size) / static_cast<double>(base_batch);
}

struct PretrainConfig {
  std::size_t epochs = 0;  // required
  std::size_t batch_size = 512;
  double lr0 = 0.4;
  double momentum = 0.9;
  double temperature = kDefaultTemperature;
  AttackConfig pgd_view{AttackKind::pgd, 0.03, 0.0075, 10, false,
                        {Objective::contrastive}, 0.0};
  AttackConfig cw_view{AttackKind::cw, 0.03, 0.0075, 10, false,
                       {Objective::embedding_repel}, 0.0};
  AugmentPolicy augment{};
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("pretrain: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw std::invalid_argument("pretrain: lr0 must be > 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("pretrain: temperature must be > 0");
    pgd_view.validate();
    cw_view.validate();
    augment.validate();
  }
};

struct FinetuneConfig {
  std::size_t epochs = 0;  // required
  std::size_t batch_size = 128;
  double lr = 1e-4;
  AdamHyper adam{};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("finetune: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("finetune: lr must be > 0");
  }
};

/// End-to-end cross-entropy training of encoder + classifier; the
/// non-contrastive reference arm.
struct SupervisedConfig {
  std::size_t epochs = 0;
  std::size_t batch_size = 512;
  double lr0 = 0.4;
  double momentum = 0.9;
  AugmentPolicy augment{};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("supervised: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("supervised: batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw std::invalid_argument("supervised: lr0 must be > 0");
    augment.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean over batches
  double lr = 0.0;    // at the last step of the epoch
  double seconds = 0.0;
  std::size_t samples = 0;
  std::size_t pgd_views = 0;
  std::size_t cw_views = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// One JSON object per line.
  std::string to_jsonl(bool with_time = true) const {
    std::string out;
    for (const auto& r : epochs) {
      nlohmann::ordered_json j;
      j["epoch"] = r.epoch;
      j["loss"] = r.loss;
      j["lr"] = r.lr;
      if (with_time) j["seconds"] = r.seconds;
      j["samples"] = r.samples;
      j["pgd_views"] = r.pgd_views;
      j["cw_views"] = r.cw_views;
      out += j.dump();
      out += '\n';
    }
    return out;
  }
};

struct TrainResult {
  ModelParams<float> params;
  TrainLog log;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::vector<TensorF> collect_grads(const ModelParams<float>& p, const ModelGraph<float>& g,
                                          Gradients<float>& grads) {
  std::vector<TensorF> out(p.entries.size());
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    const Var v = g.bound(i);
    if (v.valid() && p.trainable(i)) out[i] = grads.take(v);
  }
  return out;
}

inline void check_geometry(const Dataset& ds, const EncoderSpec& spec, const char* who) {
  const auto& s = ds.image_shape();
  if (s[0] != spec.in_channels || s[1] != spec.image_size || s[2] != spec.image_size) {
    throw std::invalid_argument(std::string(who) + ": dataset images " + shape_str(s) +
                                " do not match the encoder input (" +
                                std::to_string(spec.in_channels) + ", " +
                                std::to_string(spec.image_size) + ", " +
                                std::to_string(spec.image_size) + ")");
  }
}

[[noreturn]] inline void numeric_abort(const char* who, std::size_t epoch, std::size_t batch,
                                       const std::exception& e) {
  throw NumericError(std::string(who) + ": epoch " + std::to_string(epoch) + " batch " +
                     std::to_string(batch) + ": " + e.what());
}

}  // namespace detail

/// Views of one pretraining batch: augmented clean images and their two
/// perturbed versions under the current encoder.
struct ViewBatch {
  TensorF clean, pgd, cw;
};

inline ViewBatch make_views(const ModelParams<float>& params, const Batch& batch,
                            const PretrainConfig& cfg, std::uint64_t attack_seed) {
  ViewBatch v{batch.images, {}, {}};
  TensorF reference;
  {
    Tape<float> tape;
    ModelGraph<float> g(tape, params, Mode::train);
    reference = tape.value(g.project(g.encode(tape.leaf(v.clean))));
  }
  AttackContext<float> ctx{batch.labels, &reference, Mode::train, attack_seed};
  v.pgd = run_attack(params, v.clean, cfg.pgd_view, ctx);
  v.cw = run_attack(params, v.clean, cfg.cw_view, ctx);
  return v;
}

/// Adversarial contrastive pretraining of encoder + projection head:
/// per batch, augment, perturb the augmented images with the PGD and CW
/// view attacks, and take an SGD-momentum step on the averaged InfoNCE loss
/// under a cosine schedule. Batches with fewer than two images are skipped.
inline TrainResult act_pretrain(const Dataset& dataset, const EncoderSpec& spec,
                                const PretrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw DataError("pretrain: empty dataset");
  detail::check_geometry(dataset, spec, "pretrain");
  TrainResult res{init_params<float>(spec, dataset.num_classes(), cfg.seed), {}};
  auto& params = res.params;
  params = set_freeze(std::move(params), Scope::classifier, true);

  const std::size_t per_epoch = (dataset.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;
  std::mt19937_64 aug_rng(detail::mix_seed(cfg.seed, 1));
  OptimizerState<float> opt;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto seq = batch_iter(dataset, cfg.batch_size, detail::mix_seed(cfg.seed, 100 + epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t bi = 0; bi < seq.size(); ++bi) {
      const double lr = cosine_lr(step, total, cfg.lr0);
      ++step;
      Batch batch = seq[bi];
      if (batch.size() < 2) continue;
      augment_batch(batch, cfg.augment, aug_rng);
      try {
        const auto views = make_views(params, batch, cfg, detail::mix_seed(cfg.seed, step << 8));
        const std::size_t b = batch.size();
        rec.pgd_views += b;
        rec.cw_views += b;

        Tape<float> tape;
        ModelGraph<float> g(tape, params, Mode::train, true);
        Var x = concat(tape, {tape.leaf(views.clean), tape.leaf(views.pgd), tape.leaf(views.cw)}, 0);
        Var z = g.project(g.encode(x));
        Var loss = adv_contrastive(tape, slice_rows(tape, z, 0, b), slice_rows(tape, z, b, 2 * b),
                                   slice_rows(tape, z, 2 * b, 3 * b),
                                   static_cast<float>(cfg.temperature));
        const double lv = tape.value(loss).item();
        if (!std::isfinite(lv)) throw NumericError("non-finite loss");
        auto grads = tape.backward(loss);
        sgd_momentum_step(params, detail::collect_grads(params, g, grads), opt,
                          static_cast<float>(lr), static_cast<float>(cfg.momentum));
        apply_batch_stats(params, g.batch_stats());
        loss_sum += lv;
        ++counted;
        rec.samples += b;
      } catch (const NumericError& e) {
        detail::numeric_abort("pretrain", epoch, bi, e);
      }
      if (rec.pgd_views != rec.samples || rec.cw_views != rec.samples) {
        throw std::logic_error("pretrain: view count does not match image count");
      }
      rec.lr = lr;
    }
    rec.loss = counted ? loss_sum / static_cast<double>(counted) : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
    if (cfg.checkpoint_dir && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 &&
        epoch != cfg.epochs) {
      save_checkpoint(*cfg.checkpoint_dir / ("pretrain_epoch" + std::to_string(epoch) + ".ckpt"),
                      params);
    }
  }
  params = set_freeze(std::move(params), Scope::classifier, false);
  if (cfg.checkpoint_dir) save_checkpoint(*cfg.checkpoint_dir / "pretrain_final.ckpt", params);
  return res;
}

/// Linear probe: the encoder and projection head are frozen, the projection
/// head is dropped from the forward path, and only the classifier is trained
/// with Adam on cross-entropy. Embeddings are computed once in eval mode.
inline TrainResult finetune(const Dataset& dataset, const ModelParams<float>& checkpoint,
                            std::size_t num_classes, const FinetuneConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw DataError("finetune: empty dataset");
  detail::check_geometry(dataset, checkpoint.spec, "finetune");
  if (dataset.num_classes() != num_classes) {
    throw std::invalid_argument("finetune: dataset has " + std::to_string(dataset.num_classes()) +
                                " classes, expected " + std::to_string(num_classes));
  }
  TrainResult res{checkpoint, {}};
  auto& params = res.params;
  if (params.num_classes != num_classes) {
    // Fresh classifier head for a different label set.
    auto fresh = init_params<float>(params.spec, num_classes, detail::mix_seed(cfg.seed, 7));
    std::erase_if(params.entries, [](const auto& e) { return e.scope == Scope::classifier; });
    for (auto& e : fresh.entries)
      if (e.scope == Scope::classifier) params.entries.push_back(std::move(e));
    params.num_classes = num_classes;
  }
  params = set_freeze(std::move(params), Scope::encoder, true);
  params = set_freeze(std::move(params), Scope::projection, true);
  params = set_freeze(std::move(params), Scope::classifier, false);

  const TensorF features = encode_eval(params, make_batch(dataset).images);
  std::vector<std::size_t> labels;
  labels.reserve(dataset.size());
  for (const auto& im : dataset.images) labels.push_back(im.label);
  const std::size_t dim = features.dim(1);

  OptimizerState<float> opt;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto seq = batch_iter(dataset, cfg.batch_size, detail::mix_seed(cfg.seed, 200 + epoch));
    const auto& order = seq.order();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg.lr;
    double loss_sum = 0.0;
    for (std::size_t lo = 0, bi = 0; lo < order.size(); lo += cfg.batch_size, ++bi) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      TensorF xb({hi - lo, dim});
      std::vector<std::size_t> yb;
      for (std::size_t k = lo; k < hi; ++k) {
        std::copy_n(features.ptr() + order[k] * dim, dim, xb.ptr() + (k - lo) * dim);
        yb.push_back(labels[order[k]]);
      }
      try {
        Tape<float> tape;
        ModelGraph<float> g(tape, params, Mode::eval, true);
        Var loss = cross_entropy(tape, g.classify(tape.leaf(std::move(xb))), yb);
        loss_sum += tape.value(loss).item();
        auto grads = tape.backward(loss);
        adam_step(params, detail::collect_grads(params, g, grads), opt,
                  static_cast<float>(cfg.lr), cfg.adam);
      } catch (const NumericError& e) {
        detail::numeric_abort("finetune", epoch, bi, e);
      }
      rec.samples += hi - lo;
    }
    rec.loss = loss_sum / static_cast<double>(seq.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
  }
  return res;
}

/// Cross-entropy training of encoder and classifier together.
inline TrainResult train_supervised(const Dataset& dataset, const EncoderSpec& spec,
                                    const SupervisedConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw DataError("supervised: empty dataset");
  detail::check_geometry(dataset, spec, "supervised");
  TrainResult res{init_params<float>(spec, dataset.num_classes(), cfg.seed), {}};
  auto& params = res.params;
  params = set_freeze(std::move(params), Scope::projection, true);
  const std::size_t per_epoch = (dataset.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;
  std::mt19937_64 aug_rng(detail::mix_seed(cfg.seed, 1));
  OptimizerState<float> opt;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto seq = batch_iter(dataset, cfg.batch_size, detail::mix_seed(cfg.seed, 100 + epoch));
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t bi = 0; bi < seq.size(); ++bi) {
      const double lr = cosine_lr(step, total, cfg.lr0);
      ++step;
      Batch batch = seq[bi];
      if (batch.size() < 2) continue;
      augment_batch(batch, cfg.augment, aug_rng);
      try {
        Tape<float> tape;
        ModelGraph<float> g(tape, params, Mode::train, true);
        Var loss = cross_entropy(tape, g.classify(g.encode(tape.leaf(batch.images))), batch.labels);
        loss_sum += tape.value(loss).item();
        ++counted;
        auto grads = tape.backward(loss);
        sgd_momentum_step(params, detail::collect_grads(params, g, grads), opt,
                          static_cast<float>(lr), static_cast<float>(cfg.momentum));
        apply_batch_stats(params, g.batch_stats());
      } catch (const NumericError& e) {
        detail::numeric_abort("supervised", epoch, bi, e);
      }
      rec.samples += batch.size();
      rec.lr = lr;
    }
    rec.loss = counted ? loss_sum / static_cast<double>(counted) : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
  }
  params = set_freeze(std::move(params), Scope::projection, false);
  return res;
}

}  // namespace advclr

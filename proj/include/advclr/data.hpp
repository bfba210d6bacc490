#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advclr/tensor.hpp"

namespace advclr {

/// Ingestion failures: missing or malformed files, invalid dataset content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledImage {
  TensorF pixels;  // (3, H, W), values in [0, 1]
  std::size_t label = 0;
};

enum class Split { train, test };

struct Dataset {
  std::vector<LabeledImage> images;
  std::vector<std::string> class_names;
  Split split = Split::train;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }

  /// (C, H, W) of the images; throws on an empty dataset.
  const Shape& image_shape() const {
    if (images.empty()) throw DataError("dataset is empty");
    return images.front().pixels.shape();
  }

  /// Checks the shape, range and label invariants.
  void validate() const {
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& im = images[i];
      if (im.pixels.rank() != 3 || im.pixels.shape() != images.front().pixels.shape()) {
        throw DataError("image " + std::to_string(i) + " has shape " +
                        shape_str(im.pixels.shape()));
      }
      if (im.label >= num_classes()) {
        throw DataError("image " + std::to_string(i) + " label " +
                        std::to_string(im.label) + " >= " + std::to_string(num_classes()));
      }
      for (float v : im.pixels.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) {
          throw DataError("image " + std::to_string(i) + " has pixel outside [0,1]");
        }
      }
    }
  }

  /// First `n` images (or all, if fewer).
  Dataset head(std::size_t n) const {
    Dataset out{{}, class_names, split};
    out.images.assign(images.begin(), images.begin() + std::min(n, images.size()));
    return out;
  }
};

struct Batch {
  TensorF images;  // (N, C, H, W)
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset

  std::size_t size() const noexcept { return labels.size(); }
};

/// Stacks the given dataset entries into a batch.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  if (idx.empty()) throw DataError("make_batch: no indices");
  const Shape& is = ds.image_shape();
  const std::size_t per = shape_numel(is);
  Batch b;
  b.images = TensorF({idx.size(), is[0], is[1], is[2]});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& im = ds.images.at(idx[k]);
    std::copy(im.pixels.data().begin(), im.pixels.data().end(), b.images.ptr() + k * per);
    b.labels.push_back(im.label);
    b.indices.push_back(idx[k]);
  }
  return b;
}

inline Batch make_batch(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(ds, idx);
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

inline std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer",
          "dog", "frog", "horse", "ship", "truck"};
}

/// Decodes one CIFAR-10 binary batch file (label byte + 3072 channel-major
/// pixel bytes per record).
inline void read_cifar_file(const std::filesystem::path& file, Dataset& out,
                            std::size_t expected_records = kCifarRecordsPerFile) {
  const std::size_t expected = expected_records * kCifarRecord;
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw DataError("missing file " + file.string() + " (expected " +
                    std::to_string(expected) + " bytes)");
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < expected) {
    throw DataError("truncated record in " + file.string() + ": got " +
                    std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  }
  if (bytes.size() != expected) {
    throw DataError("unexpected size for " + file.string() + ": got " +
                    std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  }
  out.images.reserve(out.images.size() + expected_records);
  for (std::size_t r = 0; r < expected_records; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) {
      throw DataError("label " + std::to_string(rec[0]) + " out of range in " +
                      file.string() + " record " + std::to_string(r));
    }
    LabeledImage im{TensorF({3, kCifarSide, kCifarSide}), rec[0]};
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      im.pixels[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    }
    out.images.push_back(std::move(im));
  }
}

/// Reads data_batch_1..5.bin and test_batch.bin from `dir`.
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir) {
  Dataset train{{}, cifar10_class_names(), Split::train};
  Dataset test{{}, cifar10_class_names(), Split::test};
  for (int i = 1; i <= 5; ++i) {
    read_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), train);
  }
  read_cifar_file(dir / "test_batch.bin", test);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic blob-texture classes

namespace detail {

struct Blob {
  float cy, cx, radius;
  std::array<float, 3> color;  // signed per-channel contribution
};

struct ClassPattern {
  std::vector<Blob> blobs;
  std::array<float, 3> base;
};

inline std::vector<ClassPattern> synthetic_patterns(std::size_t num_classes,
                                                    std::size_t size,
                                                    std::uint64_t pattern_seed) {
  std::mt19937_64 rng(pattern_seed ^ (0x9E3779B97F4A7C15ull * (num_classes + 31 * size)));
  std::uniform_real_distribution<float> pos(0.15f * size, 0.85f * size);
  std::uniform_real_distribution<float> rad(0.12f * size, 0.25f * size);
  std::uniform_real_distribution<float> col(-1.0f, 1.0f);
  std::uniform_real_distribution<float> base(0.35f, 0.65f);
  std::vector<ClassPattern> out(num_classes);
  for (auto& p : out) {
    for (auto& b : p.base) b = base(rng);
    p.blobs.resize(3);
    for (auto& b : p.blobs) {
      b.cy = pos(rng);
      b.cx = pos(rng);
      b.radius = rad(rng);
      for (auto& c : b.color) c = col(rng);
    }
  }
  return out;
}

}  // namespace detail

/// Parameters of the synthetic generator beyond the class/size/seed axes.
struct SyntheticOptions {
  std::uint64_t pattern_seed = 0x5EEDC1A55ull;  // shared by train and test
  float blob_amplitude = 0.35f;
  float jitter = 1.0f;  // blob center jitter in pixels
  float noise = 0.04f;
  Split split = Split::train;
};

/// Deterministic separable dataset: each class is a fixed arrangement of
/// colored Gaussian blobs over a tinted background. Samples jitter blob
/// positions and strengths and add pixel noise. Images are interleaved by
/// class. Class patterns depend only on (num_classes, image_size,
/// pattern_seed), so train and test sets drawn with different seeds share
/// them.
inline Dataset make_synthetic(std::size_t num_classes, std::size_t per_class,
                              std::size_t image_size, std::uint64_t seed,
                              const SyntheticOptions& opt = {}) {
  if (num_classes < 2) throw std::invalid_argument("make_synthetic: num_classes must be >= 2");
  if (image_size < 2) throw std::invalid_argument("make_synthetic: image_size must be >= 2");
  const auto patterns = detail::synthetic_patterns(num_classes, image_size, opt.pattern_seed);
  Dataset ds;
  ds.split = opt.split;
  for (std::size_t c = 0; c < num_classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> jit(-opt.jitter, opt.jitter);
  std::uniform_real_distribution<float> amp(0.7f, 1.3f);
  std::uniform_real_distribution<float> tint(-0.08f, 0.08f);
  std::normal_distribution<float> noise(0.0f, opt.noise);
  const std::size_t s = image_size;
  ds.images.reserve(num_classes * per_class);
  for (std::size_t k = 0; k < per_class; ++k) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      const auto& pat = patterns[c];
      LabeledImage im{TensorF({3, s, s}), c};
      std::array<float, 3> base;
      for (std::size_t ch = 0; ch < 3; ++ch) base[ch] = pat.base[ch] + tint(rng);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < s * s; ++i) im.pixels[ch * s * s + i] = base[ch];
      for (const auto& b : pat.blobs) {
        const float cy = b.cy + jit(rng), cx = b.cx + jit(rng);
        const float a = opt.blob_amplitude * amp(rng);
        const float inv = 1.0f / (2.0f * b.radius * b.radius);
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const float dy = static_cast<float>(y) + 0.5f - cy;
            const float dx = static_cast<float>(x) + 0.5f - cx;
            const float g = a * std::exp(-(dy * dy + dx * dx) * inv);
            for (std::size_t ch = 0; ch < 3; ++ch) im.pixels[(ch * s + y) * s + x] += g * b.color[ch];
          }
      }
      for (auto& v : im.pixels.data()) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
      ds.images.push_back(std::move(im));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  std::size_t crop_pad = 4;
  double hflip_prob = 0.5;
  bool enabled = true;

  void validate() const {
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) {
      throw std::invalid_argument("augment: hflip_prob must lie in [0,1]");
    }
  }
};

/// Applies a crop offset (dy, dx) in [-pad, pad] over a reflection-padded
/// image, then an optional horizontal mirror.
inline TensorF shift_reflect(const TensorF& img, std::ptrdiff_t dy, std::ptrdiff_t dx, bool flip) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (n == 1) return std::ptrdiff_t{0};
    const std::ptrdiff_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  TensorF out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xo = flip ? w - 1 - x : x;
        const auto sy = reflect(static_cast<std::ptrdiff_t>(y) + dy, static_cast<std::ptrdiff_t>(h));
        const auto sx = reflect(static_cast<std::ptrdiff_t>(xo) + dx, static_cast<std::ptrdiff_t>(w));
        out[(ch * h + y) * w + x] = img[(ch * h + sy) * w + sx];
      }
  return out;
}

/// Random reflection-padded crop followed by a random horizontal flip.
template <class Rng>
LabeledImage augment(const LabeledImage& image, const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  if (!policy.enabled) return image;
  const auto pad = static_cast<std::ptrdiff_t>(policy.crop_pad);
  std::uniform_int_distribution<std::ptrdiff_t> off(-pad, pad);
  const auto dy = off(rng);
  const auto dx = off(rng);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const bool flip = coin(rng) < policy.hflip_prob;
  return LabeledImage{shift_reflect(image.pixels, dy, dx, flip), image.label};
}

/// Augments every image of a batch in order.
template <class Rng>
void augment_batch(Batch& batch, const AugmentPolicy& policy, Rng& rng) {
  if (!policy.enabled) return;
  const auto& s = batch.images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  for (std::size_t i = 0; i < batch.size(); ++i) {
    LabeledImage im{TensorF({s[1], s[2], s[3]},
                            std::vector<float>(batch.images.ptr() + i * per,
                                               batch.images.ptr() + (i + 1) * per)),
                    batch.labels[i]};
    auto out = augment(im, policy, rng);
    std::copy(out.pixels.data().begin(), out.pixels.data().end(), batch.images.ptr() + i * per);
  }
}

// ---------------------------------------------------------------------------
// Epoch iteration

/// One epoch over a dataset in fixed-size batches; the final batch may be
/// short. With a seed the order is a deterministic shuffle, otherwise the
/// dataset order.
class BatchSequence {
 public:
  BatchSequence(const Dataset& ds, std::size_t batch_size,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt)
      : ds_(&ds), batch_size_(batch_size), order_(ds.size()) {
    if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    if (ds.empty()) throw DataError("batch_iter: empty dataset");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle_seed) {
      std::mt19937_64 rng(*shuffle_seed);
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::size_t size() const noexcept { return (order_.size() + batch_size_ - 1) / batch_size_; }

  Batch operator[](std::size_t i) const {
    const std::size_t lo = i * batch_size_;
    const std::size_t hi = std::min(order_.size(), lo + batch_size_);
    return make_batch(*ds_, std::span<const std::size_t>(order_).subspan(lo, hi - lo));
  }

  const std::vector<std::size_t>& order() const noexcept { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

inline BatchSequence batch_iter(const Dataset& ds, std::size_t batch_size,
                                std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  return BatchSequence(ds, batch_size, shuffle_seed);
}

}  // namespace advclr

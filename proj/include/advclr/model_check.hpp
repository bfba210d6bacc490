#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "advclr/gradcheck.hpp"
#include "advclr/losses.hpp"
#include "advclr/model.hpp"

namespace advclr {

struct GradcheckOptions {
  std::size_t batch = 4;         // even; halves form the contrastive pairs
  std::size_t max_coords = 24;   // sampled coordinates per tensor; 0 checks all
  double h = 1e-6;
  Mode mode = Mode::train;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;  // parameter name, or "input"
  std::size_t coords = 0;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_err = 0.0;
};

/// Finite-difference check of the full model: classifier cross-entropy plus
/// InfoNCE between the projections of the two batch halves, differentiated
/// with respect to every trainable parameter tensor and the input images.
inline GradcheckReport gradcheck_model(const ModelParams<double>& params,
                                       const GradcheckOptions& opt = {}) {
  if (opt.batch < 2 || opt.batch % 2 != 0) {
    throw std::invalid_argument("gradcheck_model: batch must be even and >= 2");
  }
  const auto& sp = params.spec;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  TensorD images({opt.batch, sp.in_channels, sp.image_size, sp.image_size});
  for (auto& v : images.data()) v = pix(rng);
  std::vector<std::size_t> labels(opt.batch);
  for (auto& y : labels) y = std::uniform_int_distribution<std::size_t>(0, params.num_classes - 1)(rng);
  const std::size_t half = opt.batch / 2;

  auto loss = [&](Tape<double>& t, ModelGraph<double>& g, Var x) {
    Var emb = g.encode(x);
    Var ce = cross_entropy(t, g.classify(emb), std::span<const std::size_t>(labels));
    Var z = g.project(emb);
    Var nce = info_nce(t, slice_rows(t, z, 0, half), slice_rows(t, z, half, opt.batch));
    return add(t, ce, nce);
  };

  auto sample = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_coords > 0 && n > opt.max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_coords);
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };

  GradcheckReport rep;
  auto record = [&](std::string name, std::size_t coords, double err) {
    rep.tensors.push_back({std::move(name), coords, err});
    rep.max_rel_err = std::max(rep.max_rel_err, err);
  };

  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    if (params.entries[i].buffer) continue;
    const auto coords = sample(params.entries[i].value.size());
    const double err = grad_check(
        [&](Tape<double>& t, Var w) {
          ModelGraph<double> g(t, params, opt.mode);
          g.bind(i, w);
          return loss(t, g, t.leaf(images));
        },
        params.entries[i].value, opt.h, std::span<const std::size_t>(coords));
    record(params.entries[i].name, coords.size(), err);
  }
  const auto coords = sample(images.size());
  const double err = grad_check(
      [&](Tape<double>& t, Var x) {
        ModelGraph<double> g(t, params, opt.mode);
        return loss(t, g, x);
      },
      images, opt.h, std::span<const std::size_t>(coords));
  record("input", coords.size(), err);
  return rep;
}

}  // namespace advclr

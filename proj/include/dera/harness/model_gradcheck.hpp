#pragma once

#include <random>

#include "dera/diffcore/gradcheck.hpp"
#include "dera/harness/train_tokenizer.hpp"

namespace dera {

/// Smallest configuration that still exercises both streams, alignment at
/// depth 1 and conflict projection: d=16, 4 frames of 8x8.
inline TokenizerConfig gradcheck_tokenizer_config() {
  TokenizerConfig t;
  t.frames = 4;
  t.height = t.width = 8;
  t.temporal_patch = 2;
  t.spatial_patch = 4;
  t.appearance_tokens = 2;
  t.motion_tokens = 4;
  t.hidden = 16;
  t.code_dim = 4;
  t.codebook_size = 16;
  t.layers = 2;
  t.align_depth = 1;
  return t;
}

struct ParamCheck {
  std::string name;
  std::size_t elements_checked = 0;
  double rel_err = 0;  // ||analytic - numeric|| / (||numeric|| + 1e-8)
};

struct ModelGradCheck {
  std::vector<ParamCheck> params;
  double tol = 0;
  bool passed = false;
};

/// Gradient of the full training loss (reconstruction, VQ, both alignment
/// terms through conflict projection) against central differences of the
/// surrogate with detached quantities frozen. Checks `n_params` parameter
/// tensors drawn at random, at most `max_elements` entries each.
inline ModelGradCheck whole_model_grad_check(std::uint64_t seed, std::size_t n_params = 3, double tol = 1e-3,
                                             std::size_t max_elements = 32, double step = 1e-6) {
  const auto cfg = gradcheck_tokenizer_config();
  DeraTokenizer<double> model(cfg, seed);
  const RandomTeacher teacher(seed + 1, 8);
  const auto head_a = make_projection_head(model.params(), "align.head_a", cfg.hidden, teacher.dim(), seed);
  const auto head_m = make_projection_head(model.params(), "align.head_m", cfg.hidden, teacher.dim(), seed);

  DatasetConfig dc;
  dc.n_clips = 1;
  dc.frames = cfg.frames;
  dc.height = cfg.height;
  dc.width = cfg.width;
  dc.seed = seed;
  const auto clip = generate_dataset(dc).front();
  const auto feats = teacher.features(clip, cfg);
  const auto img = to_tensor<double>(feats.image), vid = to_tensor<double>(feats.video);
  const std::vector<ClipInputs<double>> batch{{to_tensor<double>(patchify_frame(clip, cfg.spatial_patch)),
                                               to_tensor<double>(patchify_video(clip, cfg.temporal_patch, cfg.spatial_patch)),
                                               &img, &vid}};
  const LossWeights w;
  auto loss = [&] { return tokenizer_loss(model, &head_a, &head_m, batch, w, true).total.total; };

  DetachTape tape(DetachTape::Mode::kRecord);
  GradientVector<double> grads;
  {
    DetachTapeScope scope(tape);
    grads = backward(loss(), model.params());
  }
  tape.set_mode(DetachTape::Mode::kReplay);
  auto eval = [&] {
    tape.rewind();
    DetachTapeScope scope(tape);
    NoGradGuard ng;
    return loss().item();
  };

  auto names = model.params().names();
  std::mt19937_64 rng(seed);
  std::shuffle(names.begin(), names.end(), rng);
  names.resize(std::min(n_params, names.size()));

  ModelGradCheck out;
  out.tol = tol;
  out.passed = true;
  for (const auto& name : names) {
    auto values = model.params().at(name).value.mutable_data();
    const auto analytic = grads.block(name);
    std::vector<std::size_t> elems(values.size());
    std::iota(elems.begin(), elems.end(), std::size_t{0});
    std::shuffle(elems.begin(), elems.end(), rng);
    elems.resize(std::min(max_elements, elems.size()));
    double err = 0, ref = 0;
    for (auto e : elems) {
      const double x0 = values[e];
      values[e] = x0 + step;
      const double up = eval();
      values[e] = x0 - step;
      const double down = eval();
      values[e] = x0;
      const double fd = (up - down) / (2 * step);
      err += (analytic[e] - fd) * (analytic[e] - fd);
      ref += fd * fd;
    }
    ParamCheck pc{name, elems.size(), std::sqrt(err) / (std::sqrt(ref) + 1e-8)};
    out.passed = out.passed && pc.rel_err < tol;
    out.params.push_back(pc);
  }
  return out;
}

}  // namespace dera

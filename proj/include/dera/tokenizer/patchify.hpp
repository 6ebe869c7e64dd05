#pragma once

// Non-overlapping p x p frame patches and t x p x p tubelets. Rows follow
// raster order over (time block, row block, column block); inside a row the
// layout is (dt, y, x, c).

#include <span>
#include <vector>

#include "dera/errors.hpp"
#include "dera/videolab/clip.hpp"

namespace dera {

struct PatchMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<float> data;
};

namespace detail {

inline void check_patch_dims(const VideoClip& clip, std::size_t t, std::size_t p) {
  if (p == 0 || t == 0) throw ValidationError("patch sizes must be positive");
  if (clip.height % p || clip.width % p) {
    throw ValidationError("frame " + std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                          " not divisible by patch size " + std::to_string(p));
  }
  if (clip.frames % t) {
    throw ValidationError(std::to_string(clip.frames) + " frames not divisible by temporal patch " + std::to_string(t));
  }
}

/// Copies between the clip and the tubelet matrix over frames [0, frames).
template <bool ToPatches>
void tubelet_copy(std::conditional_t<ToPatches, const VideoClip&, VideoClip&> clip, std::size_t frames,
                  std::size_t t, std::size_t p, std::conditional_t<ToPatches, std::vector<float>&, const float*> m) {
  const std::size_t gh = clip.height / p, gw = clip.width / p, c = clip.channels;
  const std::size_t cols = t * p * p * c;
  std::size_t row = 0;
  for (std::size_t bt = 0; bt < frames / t; ++bt)
    for (std::size_t by = 0; by < gh; ++by)
      for (std::size_t bx = 0; bx < gw; ++bx, ++row) {
        std::size_t col = 0;
        for (std::size_t dt = 0; dt < t; ++dt)
          for (std::size_t y = 0; y < p; ++y) {
            const std::size_t base = clip.index(bt * t + dt, by * p + y, bx * p, 0);
            for (std::size_t k = 0; k < p * c; ++k, ++col) {
              if constexpr (ToPatches) m[row * cols + col] = clip.pixels[base + k];
              else clip.pixels[base + k] = m[row * cols + col];
            }
          }
      }
}

}  // namespace detail

/// Frame 0 split into L_s = (H/p)(W/p) rows of p*p*C values.
inline PatchMatrix patchify_frame(const VideoClip& clip, std::size_t p) {
  detail::check_patch_dims(clip, 1, p);
  PatchMatrix out;
  out.rows = (clip.height / p) * (clip.width / p);
  out.cols = p * p * clip.channels;
  out.data.resize(out.rows * out.cols);
  detail::tubelet_copy<true>(clip, 1, 1, p, out.data);
  return out;
}

/// Whole clip split into L_t = (T/t)(H/p)(W/p) rows of t*p*p*C values.
inline PatchMatrix patchify_video(const VideoClip& clip, std::size_t t, std::size_t p) {
  detail::check_patch_dims(clip, t, p);
  PatchMatrix out;
  out.rows = (clip.frames / t) * (clip.height / p) * (clip.width / p);
  out.cols = t * p * p * clip.channels;
  out.data.resize(out.rows * out.cols);
  detail::tubelet_copy<true>(clip, clip.frames, t, p, out.data);
  return out;
}

/// Inverse of patchify_frame; produces a single-frame clip.
inline VideoClip unpatchify_frame(std::span<const float> patches, std::size_t height, std::size_t width,
                                  std::size_t p, std::size_t channels = 3) {
  VideoClip clip(1, height, width, channels);
  detail::check_patch_dims(clip, 1, p);
  if (patches.size() != clip.size()) throw ValidationError("frame patch matrix has the wrong size");
  detail::tubelet_copy<false>(clip, 1, 1, p, patches.data());
  return clip;
}

inline VideoClip unpatchify_video(std::span<const float> patches, std::size_t frames, std::size_t height,
                                  std::size_t width, std::size_t t, std::size_t p, std::size_t channels = 3) {
  VideoClip clip(frames, height, width, channels);
  detail::check_patch_dims(clip, t, p);
  if (patches.size() != clip.size()) throw ValidationError("tubelet matrix has the wrong size");
  detail::tubelet_copy<false>(clip, frames, t, p, patches.data());
  return clip;
}

}  // namespace dera

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dera/videolab/clip.hpp"

namespace dera {

enum class ShapeKind : std::uint8_t { kRect = 0, kCircle = 1, kCross = 2 };

/// One moving object on a static background.
struct SceneSpec {
  ShapeKind kind = ShapeKind::kRect;
  std::array<float, 3> color{0.9f, -0.8f, -0.8f};
  std::array<int, 2> position{8, 8};  // object center (x, y) in pixels
  std::array<int, 2> velocity{0, 0};  // pixels per frame
  std::array<float, 3> background{-0.7f, -0.7f, -0.7f};
  int half_size = 4;
  std::uint32_t motion_class = 0;
};

/// Object colors of the appearance variants.
inline const std::vector<std::array<float, 3>>& appearance_palette() {
  static const std::vector<std::array<float, 3>> p{
      {0.9f, -0.8f, -0.8f}, {-0.8f, 0.9f, -0.8f}, {-0.8f, -0.8f, 0.9f}, {0.9f, 0.9f, -0.8f},
      {0.9f, -0.8f, 0.9f},  {-0.8f, 0.9f, 0.9f},  {0.9f, 0.9f, 0.9f},   {0.9f, 0.1f, -0.8f}};
  return p;
}

/// Unit direction of each motion class: right, left, up, down.
inline std::array<int, 2> motion_direction(std::uint32_t motion_class) {
  static const std::array<std::array<int, 2>, 4> dirs{{{1, 0}, {-1, 0}, {0, -1}, {0, 1}}};
  return dirs[motion_class % 4];
}

inline bool inside_shape(ShapeKind kind, int dx, int dy, int s) {
  switch (kind) {
    case ShapeKind::kRect:
      return std::abs(dx) <= s && std::abs(dy) <= s;
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= s * s;
    case ShapeKind::kCross: {
      const int arm = std::max(1, s / 3);
      return (std::abs(dx) <= arm && std::abs(dy) <= s) || (std::abs(dy) <= arm && std::abs(dx) <= s);
    }
  }
  return false;
}

/// Object centers per frame. The object bounces off the canvas borders so it
/// always stays fully visible.
inline std::vector<std::array<int, 2>> trajectory(const SceneSpec& spec, std::size_t frames, std::size_t height,
                                                  std::size_t width) {
  const int s = spec.half_size;
  const std::array<int, 2> lo{s, s};
  const std::array<int, 2> hi{static_cast<int>(width) - 1 - s, static_cast<int>(height) - 1 - s};
  auto pos = spec.position;
  auto vel = spec.velocity;
  std::vector<std::array<int, 2>> out;
  for (std::size_t t = 0; t < frames; ++t) {
    out.push_back(pos);
    for (int a = 0; a < 2; ++a) {
      pos[a] += vel[a];
      if (hi[a] == lo[a]) {
        pos[a] = lo[a];
        continue;
      }
      // reflect until inside (handles speeds larger than the free range)
      while (pos[a] < lo[a] || pos[a] > hi[a]) {
        if (pos[a] < lo[a]) pos[a] = 2 * lo[a] - pos[a];
        if (pos[a] > hi[a]) pos[a] = 2 * hi[a] - pos[a];
        vel[a] = -vel[a];
      }
    }
  }
  return out;
}

/// Renders a clip. The seed picks the orientation of a faint static background
/// gradient; appearance is fixed by frame 0 and motion by the trajectory.
inline VideoClip generate_clip(const SceneSpec& spec, std::uint64_t seed, std::size_t frames, std::size_t height,
                               std::size_t width) {
  if (frames == 0 || height == 0 || width == 0) throw ValidationError("clip dimensions must be positive");
  const int s = spec.half_size;
  if (s < 0 || static_cast<std::size_t>(2 * s + 1) > std::min(height, width)) {
    throw ValidationError("shape of half-size " + std::to_string(s) + " does not fit a " + std::to_string(width) +
                          "x" + std::to_string(height) + " canvas");
  }
  for (int a = 0; a < 2; ++a) {
    const int lim = static_cast<int>(a == 0 ? width : height) - 1 - s;
    if (spec.position[a] < s || spec.position[a] > lim) throw ValidationError("object starts outside the canvas");
  }
  std::mt19937_64 rng(seed);
  const bool horizontal = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  const float amp = 0.1f;

  VideoClip clip(frames, height, width, 3);
  clip.class_label = spec.motion_class;
  const auto centers = trajectory(spec, frames, height, width);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const int dx = static_cast<int>(x) - centers[t][0];
        const int dy = static_cast<int>(y) - centers[t][1];
        const bool obj = inside_shape(spec.kind, dx, dy, s);
        const float ramp =
            amp * (static_cast<float>(horizontal ? x : y) / static_cast<float>(std::max<std::size_t>(1, (horizontal ? width : height) - 1)) - 0.5f);
        for (std::size_t c = 0; c < 3; ++c) {
          clip.at(t, y, x, c) = obj ? spec.color[c] : spec.background[c] + ramp;
        }
      }
    }
  }
  return clip;
}

/// Desk-scale procedural dataset definition.
struct DatasetConfig {
  std::size_t n_clips = 16;
  std::size_t frames = 8, height = 32, width = 32;
  std::uint32_t n_motion_classes = 4;
  std::uint32_t n_appearances = 8;
  std::uint64_t seed = 0;
};

struct SceneSample {
  SceneSpec spec;
  std::uint32_t appearance = 0;
  std::uint64_t render_seed = 0;
};

/// Scene i: motion class i mod C, appearance (i / C) mod A, with seeded speed,
/// size and start position chosen so that no bounce occurs within the clip.
inline SceneSample dataset_scene(const DatasetConfig& cfg, std::size_t i) {
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + i * 0xBF58476D1CE4E5B9ULL + 1);
  SceneSample out;
  out.render_seed = rng();
  const std::uint32_t motion = static_cast<std::uint32_t>(i % cfg.n_motion_classes);
  const std::uint32_t appearance = static_cast<std::uint32_t>((i / cfg.n_motion_classes) % cfg.n_appearances);
  const auto& palette = appearance_palette();
  const int max_half = std::max(1, static_cast<int>(std::min(cfg.width, cfg.height) / 8));
  const int half = std::uniform_int_distribution<int>(std::max(1, max_half - 1), max_half)(rng);
  const int travel_room = static_cast<int>(std::min(cfg.width, cfg.height)) - 1 - 2 * half;
  const int steps = static_cast<int>(cfg.frames) - 1;
  int speed = std::uniform_int_distribution<int>(1, 2)(rng);
  if (steps > 0) speed = std::max(1, std::min(speed, travel_room / steps));
  const auto dir = motion_direction(motion);

  SceneSpec& spec = out.spec;
  spec.kind = static_cast<ShapeKind>(appearance % 3);
  spec.color = palette[appearance % palette.size()];
  spec.half_size = half;
  spec.velocity = {dir[0] * speed, dir[1] * speed};
  spec.motion_class = motion;
  const float shade = std::uniform_real_distribution<float>(-0.75f, -0.45f)(rng);
  spec.background = {shade, shade, shade};
  for (int a = 0; a < 2; ++a) {
    const int dim = static_cast<int>(a == 0 ? cfg.width : cfg.height);
    int lo = half, hi = dim - 1 - half;
    const int span = spec.velocity[a] * steps;
    if (span > 0) hi -= span;
    if (span < 0) lo -= span;
    if (hi < lo) hi = lo;
    spec.position[a] = std::uniform_int_distribution<int>(lo, hi)(rng);
  }
  out.appearance = appearance;
  return out;
}

inline std::vector<VideoClip> generate_dataset(const DatasetConfig& cfg, std::size_t first = 0) {
  std::vector<VideoClip> clips;
  clips.reserve(cfg.n_clips);
  for (std::size_t i = first; i < first + cfg.n_clips; ++i) {
    const auto scene = dataset_scene(cfg, i);
    clips.push_back(generate_clip(scene.spec, scene.render_seed, cfg.frames, cfg.height, cfg.width));
  }
  return clips;
}

/// Centroid (x, y) of pixels whose color equals `color` in frame t.
inline std::array<double, 2> object_centroid(const VideoClip& clip, std::size_t t, const std::array<float, 3>& color) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < clip.height; ++y) {
    for (std::size_t x = 0; x < clip.width; ++x) {
      if (clip.at(t, y, x, 0) == color[0] && clip.at(t, y, x, 1) == color[1] && clip.at(t, y, x, 2) == color[2]) {
        sx += static_cast<double>(x);
        sy += static_cast<double>(y);
        ++n;
      }
    }
  }
  if (n == 0) return {NAN, NAN};
  return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

}  // namespace dera

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>

#include "dera/tokenizer/model.hpp"
#include "dera/videolab/dvid.hpp"
#include "dera/videolab/scene.hpp"

namespace dera {

/// Palette index voted by the non-background pixels of frame `t`: each pixel
/// that is not near-gray-and-dark goes to its nearest palette color.
inline std::optional<std::size_t> dominant_palette(const VideoClip& clip, std::size_t t = 0) {
  const auto& pal = appearance_palette();
  std::vector<std::size_t> votes(pal.size(), 0);
  for (std::size_t y = 0; y < clip.height; ++y) {
    for (std::size_t x = 0; x < clip.width; ++x) {
      const float r = clip.at(t, y, x, 0), g = clip.at(t, y, x, 1), b = clip.at(t, y, x, 2);
      const float spread = std::max({r, g, b}) - std::min({r, g, b});
      if (spread < 0.3f && (r + g + b) / 3.0f < 0.0f) continue;  // background
      std::size_t best = 0;
      float best_d = std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < pal.size(); ++k) {
        const float d = (r - pal[k][0]) * (r - pal[k][0]) + (g - pal[k][1]) * (g - pal[k][1]) + (b - pal[k][2]) * (b - pal[k][2]);
        if (d < best_d) best_d = d, best = k;
      }
      ++votes[best];
    }
  }
  const auto it = std::max_element(votes.begin(), votes.end());
  if (*it == 0) return std::nullopt;
  return static_cast<std::size_t>(it - votes.begin());
}

struct SwapPairResult {
  std::size_t x = 0, y = 0;
  std::optional<std::size_t> palette_x, palette_y;          // originals
  std::optional<std::size_t> palette_x_swapped, palette_y_swapped;  // after appearance swap
  bool transferred() const {
    return palette_x_swapped && palette_y_swapped && palette_x_swapped == palette_y && palette_y_swapped == palette_x;
  }
};

struct SwapReport {
  std::vector<SwapPairResult> pairs;
  double transfer_rate() const {
    if (pairs.empty()) return 0;
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.transferred();
    return static_cast<double>(n) / static_cast<double>(pairs.size());
  }
};

/// Swaps appearance and motion blocks between clip pairs (i, n-1-i), decodes
/// every variant and classifies the object color of the appearance swaps.
/// Writes DVID files and report.csv under `out_dir` when it is non-empty.
template <class T>
SwapReport run_swap_experiment(const DeraTokenizer<T>& tok, const std::vector<VideoClip>& clips, std::size_t n_pairs,
                               const std::filesystem::path& out_dir) {
  if (clips.size() < 2) throw ValidationError("swap experiment needs at least two clips");
  const std::size_t half = clips.size() / 2;
  n_pairs = std::min(n_pairs, half);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  SwapReport rep;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    SwapPairResult r;
    r.x = i;
    r.y = clips.size() - 1 - i;
    const auto& cx = clips[r.x];
    const auto& cy = clips[r.y];
    r.palette_x = dominant_palette(cx);
    r.palette_y = dominant_palette(cy);
    const auto tx = tok.tokenize(cx), ty = tok.tokenize(cy);
    const auto [ax, ay] = swap_tokens(tx, ty, TokenBlock::kAppearance);
    const auto [mx, my] = swap_tokens(tx, ty, TokenBlock::kMotion);
    const auto dax = tok.detokenize(ax), day = tok.detokenize(ay);
    r.palette_x_swapped = dominant_palette(dax);
    r.palette_y_swapped = dominant_palette(day);
    if (!out_dir.empty()) {
      const std::string p = "pair" + std::to_string(i) + "_";
      save_clip(out_dir / (p + "x.dvid"), cx);
      save_clip(out_dir / (p + "y.dvid"), cy);
      save_clip(out_dir / (p + "x_app_from_y.dvid"), dax);
      save_clip(out_dir / (p + "y_app_from_x.dvid"), day);
      save_clip(out_dir / (p + "x_motion_from_y.dvid"), tok.detokenize(mx));
      save_clip(out_dir / (p + "y_motion_from_x.dvid"), tok.detokenize(my));
    }
    rep.pairs.push_back(r);
  }
  if (!out_dir.empty()) {
    std::ofstream csv(out_dir / "report.csv", std::ios::binary | std::ios::trunc);
    auto cell = [](const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string("none"); };
    csv << "pair,clip_x,clip_y,palette_x,palette_y,palette_x_swapped,palette_y_swapped,transferred\n";
    for (std::size_t i = 0; i < rep.pairs.size(); ++i) {
      const auto& r = rep.pairs[i];
      csv << i << ',' << r.x << ',' << r.y << ',' << cell(r.palette_x) << ',' << cell(r.palette_y) << ','
          << cell(r.palette_x_swapped) << ',' << cell(r.palette_y_swapped) << ',' << (r.transferred() ? 1 : 0) << '\n';
    }
    csv << "# appearance transfer rate " << rep.transfer_rate() << '\n';
  }
  return rep;
}

}  // namespace dera

#pragma once

#include <cstddef>
#include <string>

#include "dera/errors.hpp"

namespace dera {

struct TokenizerConfig {
  std::size_t frames = 8, height = 32, width = 32;
  std::size_t temporal_patch = 2;  // t
  std::size_t spatial_patch = 4;   // p
  std::size_t appearance_tokens = 16;
  std::size_t motion_tokens = 48;
  std::size_t hidden = 128;
  std::size_t code_dim = 8;
  std::size_t codebook_size = 256;
  std::size_t layers = 4;
  std::size_t heads = 0;  // 0: hidden / 32
  std::size_t align_depth = 4;

  std::size_t spatial_tokens() const { return (height / spatial_patch) * (width / spatial_patch); }
  std::size_t temporal_tokens() const { return (frames / temporal_patch) * spatial_tokens(); }
  std::size_t sequence_length() const { return appearance_tokens + motion_tokens; }
  std::size_t frame_patch_dim() const { return spatial_patch * spatial_patch * 3; }
  std::size_t tubelet_dim() const { return temporal_patch * frame_patch_dim(); }
  std::size_t decoder_queries() const { return temporal_tokens(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("tokenizer config: " + m); };
    if (temporal_patch == 0 || spatial_patch == 0) fail("patch sizes must be positive");
    if (frames == 0 || frames % temporal_patch) fail("frames must be a positive multiple of the temporal patch");
    if (height == 0 || height % spatial_patch || width == 0 || width % spatial_patch)
      fail("height and width must be positive multiples of the spatial patch");
    if (appearance_tokens < 1 || motion_tokens < 1) fail("token counts must be at least 1");
    if (hidden == 0 || code_dim == 0 || codebook_size == 0) fail("dimensions must be positive");
    if (layers == 0) fail("need at least one layer");
    if (align_depth < 1 || align_depth > layers) fail("align_depth must lie in [1, layers]");
  }

  static TokenizerConfig desk() { return {}; }

  /// Full-scale setting: 16 frames of 128x128, 1024 tokens, 8192 codes.
  static TokenizerConfig paper() {
    TokenizerConfig c;
    c.frames = 16;
    c.height = c.width = 128;
    c.temporal_patch = 4;
    c.spatial_patch = 8;
    c.appearance_tokens = 256;
    c.motion_tokens = 768;
    c.hidden = 768;
    c.code_dim = 16;
    c.codebook_size = 8192;
    c.layers = 12;
    c.align_depth = 12;
    return c;
  }
};

}  // namespace dera

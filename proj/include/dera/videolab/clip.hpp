#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "dera/errors.hpp"

namespace dera {

/// Dense T x H x W x C pixel volume in [-1, 1], row-major T -> H -> W -> C.
struct VideoClip {
  std::size_t frames = 0, height = 0, width = 0, channels = 3;
  std::vector<float> pixels;
  std::optional<std::uint32_t> class_label;

  VideoClip() = default;
  VideoClip(std::size_t t, std::size_t h, std::size_t w, std::size_t c = 3, float fill = 0.0f)
      : frames(t), height(h), width(w), channels(c), pixels(t * h * w * c, fill) {}

  std::size_t size() const noexcept { return pixels.size(); }
  std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return ((t * height + y) * width + x) * channels + c;
  }
  float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) { return pixels[index(t, y, x, c)]; }
  float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const { return pixels[index(t, y, x, c)]; }

  bool same_dims(const VideoClip& o) const noexcept {
    return frames == o.frames && height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const VideoClip& o) const = default;
};

inline void require_pixel_range(const VideoClip& clip) {
  for (float v : clip.pixels) {
    if (!(v >= -1.0f && v <= 1.0f)) throw ValidationError("clip pixel outside [-1, 1]");
  }
}

using ContentHash = std::array<std::uint8_t, 32>;

/// SHA-256 over the clip dims (u32 LE) followed by the f32 LE pixels. Labels are
/// not part of the content.
inline ContentHash content_hash(const VideoClip& clip) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  auto put_u32 = [&](std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    EVP_DigestUpdate(ctx, b, 4);
  };
  put_u32(static_cast<std::uint32_t>(clip.frames));
  put_u32(static_cast<std::uint32_t>(clip.height));
  put_u32(static_cast<std::uint32_t>(clip.width));
  put_u32(static_cast<std::uint32_t>(clip.channels));
  static_assert(sizeof(float) == 4);
  EVP_DigestUpdate(ctx, clip.pixels.data(), clip.pixels.size() * sizeof(float));  // host is little-endian
  ContentHash out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, out.data(), &len);
  EVP_MD_CTX_free(ctx);
  return out;
}

inline std::string to_hex(const ContentHash& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : h) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

}  // namespace dera

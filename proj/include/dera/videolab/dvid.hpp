#pragma once

// DVID clip container:
//   "DERAVID\0" | u32 version=1 | u32 T,H,W,C | u8 dtype (0=u8, 1=f32) |
//   u8 flags (bit 0: class label present) | u8 reserved x2 | payload |
//   [u32 class_label]
// All integers little-endian; payload row-major T->H->W->C.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string_view>

#include "dera/binary_io.hpp"
#include "dera/videolab/clip.hpp"

namespace dera {

enum class PixelType : std::uint8_t { kU8 = 0, kF32 = 1 };

inline constexpr std::string_view kDvidMagic{"DERAVID\0", 8};
inline constexpr std::uint32_t kDvidVersion = 1;
inline constexpr std::uint8_t kDvidFlagLabel = 0x01;
/// Upper bound on the pixel count of a clip we agree to load.
inline constexpr std::uint64_t kDvidMaxElements = 1ULL << 32;

/// [-1,1] -> [0,255], rounding half away from zero.
inline std::uint8_t to_u8(float v) {
  const float s = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0f, 255.0f));
}
inline float from_u8(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

inline std::vector<std::uint8_t> encode_dvid(const VideoClip& clip, PixelType dtype = PixelType::kF32) {
  ByteWriter w;
  w.str(kDvidMagic);
  w.u32(kDvidVersion);
  w.u32(static_cast<std::uint32_t>(clip.frames));
  w.u32(static_cast<std::uint32_t>(clip.height));
  w.u32(static_cast<std::uint32_t>(clip.width));
  w.u32(static_cast<std::uint32_t>(clip.channels));
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u8(clip.class_label ? kDvidFlagLabel : 0);
  w.u8(0);
  w.u8(0);
  if (dtype == PixelType::kF32) {
    w.f32s(clip.pixels);
  } else {
    for (float v : clip.pixels) w.u8(to_u8(v));
  }
  if (clip.class_label) w.u32(*clip.class_label);
  return w.buffer();
}

inline VideoClip decode_dvid(ByteReader r) {
  r.expect_magic(kDvidMagic, "DVID");
  const std::size_t version_at = r.offset();
  if (r.u32("DVID version") != kDvidVersion) throw FormatError("unsupported DVID version", version_at);
  const std::size_t dims_at = r.offset();
  std::uint64_t dims[4];
  for (auto& d : dims) d = r.u32("DVID dims");
  std::uint64_t count = 1;
  for (auto d : dims) {
    if (d == 0) throw FormatError("zero DVID dimension", dims_at);
    count *= d;
    if (count > kDvidMaxElements) throw FormatError("DVID dimension overflow", dims_at);
  }
  const std::size_t dtype_at = r.offset();
  const std::uint8_t dtype = r.u8("DVID dtype");
  if (dtype > 1) throw FormatError("unknown DVID dtype", dtype_at);
  const std::uint8_t flags = r.u8("DVID flags");
  r.u8("DVID reserved");
  r.u8("DVID reserved");

  VideoClip clip;
  clip.frames = dims[0];
  clip.height = dims[1];
  clip.width = dims[2];
  clip.channels = dims[3];
  if (dtype == static_cast<std::uint8_t>(PixelType::kF32)) {
    clip.pixels = r.f32s(count, "DVID payload");
  } else {
    const auto raw = r.raw(count, "DVID payload");
    clip.pixels.resize(count);
    std::transform(raw.begin(), raw.end(), clip.pixels.begin(), from_u8);
  }
  if (flags & kDvidFlagLabel) clip.class_label = r.u32("DVID class label");
  return clip;
}

inline void save_clip(const std::filesystem::path& path, const VideoClip& clip, PixelType dtype = PixelType::kF32) {
  ByteWriter w;
  const auto bytes = encode_dvid(clip, dtype);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline VideoClip load_clip(const std::filesystem::path& path) { return decode_dvid(ByteReader::from_file(path)); }

/// All *.dvid files of a directory in name order.
inline std::vector<std::filesystem::path> list_clips(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".dvid") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Writes one binary PPM (P6) per frame: <prefix>_000.ppm, <prefix>_001.ppm, ...
inline std::vector<std::filesystem::path> dump_frames(const std::string& prefix, const VideoClip& clip) {
  if (clip.channels != 3) throw ValidationError("dump_frames needs 3-channel clips");
  std::vector<std::filesystem::path> paths;
  for (std::size_t t = 0; t < clip.frames; ++t) {
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_%03zu.ppm", t);
    ByteWriter w;
    w.str("P6\n" + std::to_string(clip.width) + " " + std::to_string(clip.height) + "\n255\n");
    for (std::size_t y = 0; y < clip.height; ++y)
      for (std::size_t x = 0; x < clip.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) w.u8(to_u8(clip.at(t, y, x, c)));
    paths.emplace_back(prefix + suffix);
    w.save(paths.back());
  }
  return paths;
}

}  // namespace dera

#pragma once

// Frozen feature sources for the alignment targets: a seeded random network
// over raw patches, and precomputed DFEA files keyed by clip content hash.
//
// DFEA: "DERAFEA\0" | u32 version=1 | u32 n_tokens | u32 dim |
//       u8 stream (0=image, 1=video) | 32-byte content hash | f32 payload

#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dera/binary_io.hpp"
#include "dera/diffcore/autograd.hpp"
#include "dera/tokenizer/config.hpp"
#include "dera/tokenizer/patchify.hpp"
#include "dera/videolab/clip.hpp"

namespace dera {

struct FeatureGrid {
  std::size_t rows = 0, cols = 0;
  std::vector<float> data;
  bool operator==(const FeatureGrid&) const = default;
};

struct TeacherFeatures {
  FeatureGrid image;  // L_s x d_t
  FeatureGrid video;  // L_t x d_t
  std::string teacher_id;
};

enum class FeatureStream : std::uint8_t { kImage = 0, kVideo = 1 };

class TeacherProvider {
 public:
  virtual ~TeacherProvider() = default;
  virtual std::string id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual TeacherFeatures features(const VideoClip& clip, const TokenizerConfig& cfg) const = 0;
};

/// Frozen two-layer ReLU network per stream. Weights are plain arrays outside
/// any parameter set, so no training step can reach them.
class RandomTeacher final : public TeacherProvider {
 public:
  RandomTeacher(std::uint64_t seed, std::size_t dim, std::size_t hidden = 128) : seed_(seed), dim_(dim), hidden_(hidden) {
    if (dim == 0 || hidden == 0) throw ValidationError("teacher dimensions must be positive");
  }

  std::string id() const override { return "random:" + std::to_string(seed_) + ":" + std::to_string(dim_); }
  std::size_t dim() const override { return dim_; }

  TeacherFeatures features(const VideoClip& clip, const TokenizerConfig& cfg) const override {
    TeacherFeatures f;
    f.teacher_id = id();
    f.image = apply(patchify_frame(clip, cfg.spatial_patch), "image");
    f.video = apply(patchify_video(clip, cfg.temporal_patch, cfg.spatial_patch), "video");
    return f;
  }

 private:
  struct Net {
    std::size_t in = 0;
    std::vector<double> w1, b1, w2;  // in x hidden, hidden, hidden x dim
  };

  Net make_net(std::size_t in, const std::string& stream) const {
    Net n;
    n.in = in;
    auto rng = named_rng(seed_, "teacher." + stream + "." + std::to_string(in));
    std::normal_distribution<double> g(0.0, 1.0);
    n.w1.resize(in * hidden_);
    n.b1.resize(hidden_);
    n.w2.resize(hidden_ * dim_);
    for (auto& v : n.w1) v = g(rng) / std::sqrt(static_cast<double>(in));
    for (auto& v : n.b1) v = 0.5 * g(rng);
    for (auto& v : n.w2) v = g(rng) / std::sqrt(static_cast<double>(hidden_));
    return n;
  }

  FeatureGrid apply(const PatchMatrix& patches, const std::string& stream) const {
    const Net net = make_net(patches.cols, stream);
    FeatureGrid out{patches.rows, dim_, std::vector<float>(patches.rows * dim_)};
    std::vector<double> h(hidden_);
    for (std::size_t r = 0; r < patches.rows; ++r) {
      const float* x = patches.data.data() + r * patches.cols;
      for (std::size_t j = 0; j < hidden_; ++j) {
        double acc = net.b1[j];
        for (std::size_t i = 0; i < net.in; ++i) acc += x[i] * net.w1[i * hidden_ + j];
        h[j] = acc > 0 ? acc : 0;
      }
      for (std::size_t k = 0; k < dim_; ++k) {
        double acc = 0;
        for (std::size_t j = 0; j < hidden_; ++j) acc += h[j] * net.w2[j * dim_ + k];
        out.data[r * dim_ + k] = static_cast<float>(acc);
      }
    }
    return out;
  }

  std::uint64_t seed_;
  std::size_t dim_, hidden_;
};

inline constexpr std::string_view kFeaMagic{"DERAFEA\0", 8};
inline constexpr std::uint32_t kFeaVersion = 1;

struct FeatureFile {
  FeatureStream stream = FeatureStream::kImage;
  ContentHash clip_hash{};
  FeatureGrid grid;
};

inline std::vector<std::uint8_t> encode_dfea(const FeatureFile& f) {
  if (f.grid.data.size() != f.grid.rows * f.grid.cols) throw ContractError("feature grid size mismatch");
  ByteWriter w;
  w.str(kFeaMagic);
  w.u32(kFeaVersion);
  w.u32(static_cast<std::uint32_t>(f.grid.rows));
  w.u32(static_cast<std::uint32_t>(f.grid.cols));
  w.u8(static_cast<std::uint8_t>(f.stream));
  w.bytes(f.clip_hash.data(), f.clip_hash.size());
  w.f32s(f.grid.data);
  return w.buffer();
}

inline FeatureFile decode_dfea(ByteReader r) {
  r.expect_magic(kFeaMagic, "DFEA");
  const auto version_at = r.offset();
  if (r.u32("DFEA version") != kFeaVersion) throw FormatError("unsupported DFEA version", version_at);
  FeatureFile f;
  f.grid.rows = r.u32("DFEA n_tokens");
  f.grid.cols = r.u32("DFEA dim");
  const auto tag_at = r.offset();
  const auto tag = r.u8("DFEA stream tag");
  if (tag > 1) throw FormatError("unknown DFEA stream tag " + std::to_string(tag), tag_at);
  f.stream = static_cast<FeatureStream>(tag);
  const auto hash = r.raw(32, "DFEA clip hash");
  std::copy(hash.begin(), hash.end(), f.clip_hash.begin());
  f.grid.data = r.f32s(f.grid.rows * f.grid.cols, "DFEA payload");
  if (r.remaining() != 0) throw FormatError("trailing bytes after DFEA payload", r.offset());
  return f;
}

inline std::filesystem::path feature_path(const std::filesystem::path& dir, const ContentHash& h, FeatureStream s) {
  return dir / (to_hex(h) + (s == FeatureStream::kImage ? ".img.dfea" : ".vid.dfea"));
}

inline void save_features(const std::filesystem::path& dir, const ContentHash& h, const TeacherFeatures& f) {
  std::filesystem::create_directories(dir);
  for (auto s : {FeatureStream::kImage, FeatureStream::kVideo}) {
    ByteWriter w;
    const auto bytes = encode_dfea({s, h, s == FeatureStream::kImage ? f.image : f.video});
    w.bytes(bytes.data(), bytes.size());
    w.save(feature_path(dir, h, s));
  }
}

/// Reads features exported per clip. Grids must already match the tokenizer's
/// token counts; nothing is resampled.
class FileTeacher final : public TeacherProvider {
 public:
  explicit FileTeacher(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!std::filesystem::is_directory(dir_)) throw ValidationError("feature directory '" + dir_.string() + "' not found");
  }

  std::string id() const override { return "file:" + dir_.string(); }
  std::size_t dim() const override {
    if (dim_ == 0) dim_ = probe_dim();
    return dim_;
  }

  TeacherFeatures features(const VideoClip& clip, const TokenizerConfig& cfg) const override {
    const auto h = content_hash(clip);
    TeacherFeatures f;
    f.teacher_id = id();
    f.image = load(h, FeatureStream::kImage, cfg.spatial_tokens(), "L_s");
    f.video = load(h, FeatureStream::kVideo, cfg.temporal_tokens(), "L_t");
    if (f.image.cols != f.video.cols) throw ValidationError("image and video feature dims differ for clip " + to_hex(h));
    if (dim_ == 0) dim_ = f.image.cols;
    if (f.image.cols != dim_) throw ValidationError("feature dim changed between clips");
    return f;
  }

  /// Reads the dimension from any stored file; used before the first clip.
  std::size_t probe_dim() const {
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (e.path().extension() == ".dfea") return decode_dfea(ByteReader::from_file(e.path())).grid.cols;
    }
    throw ValidationError("no .dfea files in '" + dir_.string() + "'");
  }

 private:
  FeatureGrid load(const ContentHash& h, FeatureStream s, std::size_t expected, const char* what) const {
    const auto path = feature_path(dir_, h, s);
    if (!std::filesystem::exists(path)) throw ValidationError("missing feature file " + path.string());
    auto f = decode_dfea(ByteReader::from_file(path));
    if (f.stream != s) throw ValidationError(path.string() + ": wrong stream tag");
    if (f.clip_hash != h) throw ValidationError(path.string() + ": clip hash does not match file name");
    if (f.grid.rows != expected) {
      throw ValidationError(path.string() + ": token count " + std::to_string(f.grid.rows) + " does not match " + what +
                            " = " + std::to_string(expected));
    }
    return std::move(f.grid);
  }

  std::filesystem::path dir_;
  mutable std::size_t dim_ = 0;
};

/// Parses "random:<seed>[:<dim>]" or "file:<dir>".
inline std::unique_ptr<TeacherProvider> make_teacher(const std::string& spec, std::size_t default_dim = 32) {
  if (spec.rfind("random", 0) == 0) {
    std::uint64_t seed = 0;
    std::size_t dim = default_dim;
    const auto rest = spec.size() > 6 && spec[6] == ':' ? spec.substr(7) : std::string();
    try {
      if (!rest.empty()) {
        const auto colon = rest.find(':');
        seed = std::stoull(rest.substr(0, colon));
        if (colon != std::string::npos) dim = std::stoul(rest.substr(colon + 1));
      }
    } catch (const std::exception&) {
      throw ValidationError("bad teacher spec '" + spec + "'");
    }
    return std::make_unique<RandomTeacher>(seed, dim);
  }
  if (spec.rfind("file:", 0) == 0) return std::make_unique<FileTeacher>(spec.substr(5));
  throw ValidationError("unknown teacher '" + spec + "' (expected random:<seed>[:<dim>] or file:<dir>)");
}

}  // namespace dera

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dera/videolab/dvid.hpp"
#include "dera/videolab/scene.hpp"

using namespace dera;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dera_test_videolab";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("static scene renders identical frames", "[videolab]") {
  SceneSpec spec;
  spec.position = {10, 12};
  auto clip = generate_clip(spec, 3, 8, 32, 32);
  const std::size_t frame = 32 * 32 * 3;
  for (std::size_t t = 1; t < 8; ++t) {
    CHECK(std::equal(clip.pixels.begin(), clip.pixels.begin() + frame, clip.pixels.begin() + t * frame));
  }
}

TEST_CASE("generation is deterministic per (spec, seed)", "[videolab]") {
  SceneSpec spec;
  spec.velocity = {1, 1};
  CHECK(generate_clip(spec, 42, 8, 32, 32) == generate_clip(spec, 42, 8, 32, 32));
  DatasetConfig cfg;
  cfg.seed = 5;
  auto a = generate_dataset(cfg);
  auto b = generate_dataset(cfg);
  REQUIRE(a.size() == 16);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(encode_dvid(a[i]) == encode_dvid(b[i]));
}

TEST_CASE("rightward drift moves the centroid one pixel per frame until the bounce", "[videolab]") {
  SceneSpec spec;
  spec.position = {20, 16};
  spec.velocity = {1, 0};
  spec.half_size = 3;
  auto clip = generate_clip(spec, 0, 8, 32, 32);
  // free range ends at x = 31 - 3 = 28, reached at t = 8; no bounce inside 8 frames
  auto prev = object_centroid(clip, 0, spec.color);
  CHECK(prev[0] == 20.0);
  for (std::size_t t = 1; t < 8; ++t) {
    auto c = object_centroid(clip, t, spec.color);
    CHECK(c[0] - prev[0] == 1.0);
    CHECK(c[1] == prev[1]);
    prev = c;
  }
  spec.position = {26, 16};
  auto bounced = generate_clip(spec, 0, 8, 32, 32);
  CHECK(object_centroid(bounced, 2, spec.color)[0] == 28.0);
  CHECK(object_centroid(bounced, 3, spec.color)[0] == 27.0);
}

TEST_CASE("motion classes drift in their declared direction", "[videolab]") {
  DatasetConfig cfg;
  cfg.n_clips = 64;
  cfg.seed = 11;
  for (std::size_t i = 0; i < cfg.n_clips; ++i) {
    const auto scene = dataset_scene(cfg, i);
    const auto clip = generate_clip(scene.spec, scene.render_seed, cfg.frames, cfg.height, cfg.width);
    const auto first = object_centroid(clip, 0, scene.spec.color);
    const auto last = object_centroid(clip, cfg.frames - 1, scene.spec.color);
    const auto dir = motion_direction(scene.spec.motion_class);
    INFO("clip " << i);
    CHECK(clip.class_label == scene.spec.motion_class);
    const double dx = last[0] - first[0], dy = last[1] - first[1];
    if (dir[0] != 0) {
      CHECK(dx * dir[0] > 0);
      CHECK(dy == 0);
    } else {
      CHECK(dy * dir[1] > 0);
      CHECK(dx == 0);
    }
  }
}

TEST_CASE("oversized shapes are rejected", "[videolab]") {
  SceneSpec spec;
  spec.half_size = 20;
  CHECK_THROWS_AS(generate_clip(spec, 0, 2, 32, 32), ValidationError);
}

TEST_CASE("DVID round-trips f32 bit-exactly and maps u8", "[videolab]") {
  DatasetConfig cfg;
  cfg.n_clips = 3;
  for (const auto& clip : generate_dataset(cfg)) {
    const auto p = scratch("rt.dvid");
    save_clip(p, clip);
    CHECK(load_clip(p) == clip);
  }
  VideoClip u(1, 1, 2, 3);
  u.pixels = {-1, -1, -1, 1, 1, 1};
  const auto p = scratch("u8.dvid");
  save_clip(p, u, PixelType::kU8);
  auto back = load_clip(p);
  CHECK(back.pixels == u.pixels);
  CHECK_FALSE(back.class_label.has_value());
  CHECK(from_u8(0) == -1.0f);
  CHECK(from_u8(255) == 1.0f);
}

TEST_CASE("DVID format errors", "[videolab]") {
  VideoClip clip(1, 2, 2, 3, 0.25f);
  clip.class_label = 7;
  auto bytes = encode_dvid(clip);

  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_dvid(ByteReader(bad));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  auto truncated = bytes;
  truncated.resize(40);
  CHECK_THROWS_AS(decode_dvid(ByteReader(truncated)), FormatError);

  auto huge = bytes;
  std::fill(huge.begin() + 12, huge.begin() + 28, std::uint8_t{0xFF});
  try {
    decode_dvid(ByteReader(huge));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("overflow") != std::string::npos);
  }
  CHECK(decode_dvid(ByteReader(bytes)).class_label == 7u);
}

TEST_CASE("frame dumps follow the declared rounding", "[videolab]") {
  auto check_fill = [](float v, std::uint8_t expect) {
    VideoClip c(2, 2, 3, 3, v);
    const auto paths = dump_frames(scratch("frame").string(), c);
    REQUIRE(paths.size() == 2);
    for (const auto& p : paths) {
      const auto bytes = read_bytes(p);
      const std::string header = "P6\n3 2\n255\n";
      REQUIRE(bytes.size() == header.size() + 18);
      for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == expect);
    }
  };
  check_fill(-1.0f, 0);
  check_fill(1.0f, 255);
  check_fill(0.0f, 128);
}

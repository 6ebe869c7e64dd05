#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "dera/alignment/align_loss.hpp"
#include "dera/diffcore/gradcheck.hpp"
#include "dera/videolab/scene.hpp"

using namespace dera;
namespace fs = std::filesystem;

namespace {

struct Identity {
  Tensor<double> operator()(const Tensor<double>& x) const { return x; }
};

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& x : v) x = n(rng);
  return Tensor<double>::constant({r, c}, v);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dera_test_alignment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<VideoClip> two_clips() {
  DatasetConfig cfg;
  cfg.n_clips = 2;
  return generate_dataset(cfg);
}

}  // namespace

TEST_CASE("random teacher is deterministic and matches the token grid", "[alignment]") {
  const auto cfg = TokenizerConfig::desk();
  const auto clips = two_clips();
  RandomTeacher a(3, 32), b(3, 32), c(4, 32);
  const auto fa = a.features(clips[0], cfg);
  CHECK(fa.image == b.features(clips[0], cfg).image);
  CHECK(fa.video == b.features(clips[0], cfg).video);
  CHECK_FALSE(fa.image == c.features(clips[0], cfg).image);
  CHECK(fa.image.rows == 64);
  CHECK(fa.video.rows == 256);
  CHECK(fa.image.cols == 32);
  for (std::size_t r = 0; r < fa.video.rows; ++r) {
    double n = 0;
    for (std::size_t k = 0; k < 32; ++k) n += std::abs(fa.video.data[r * 32 + k]);
    CHECK(n > 0);
  }

  const auto fb = a.features(clips[1], cfg);
  const auto cos = cosine_similarity(to_tensor<double>(fa.video), to_tensor<double>(fb.video));
  CHECK(*std::min_element(cos.data().begin(), cos.data().end()) < 1.0 - 1e-6);
}

TEST_CASE("file teacher round-trips exported features", "[alignment]") {
  const auto cfg = TokenizerConfig::desk();
  const auto clips = two_clips();
  const auto dir = scratch("rt");
  RandomTeacher t(5, 32);
  for (const auto& c : clips) save_features(dir, content_hash(c), t.features(c, cfg));
  FileTeacher ft(dir);
  CHECK(ft.probe_dim() == 32);
  for (const auto& c : clips) {
    const auto want = t.features(c, cfg);
    const auto got = ft.features(c, cfg);
    CHECK(got.image == want.image);
    CHECK(got.video == want.video);
  }
  auto other = clips[0];
  other.pixels[0] = 0.123f;
  CHECK_THROWS_AS(ft.features(other, cfg), ValidationError);
}

TEST_CASE("file teacher rejects count mismatches and bad magic", "[alignment]") {
  const auto clip = two_clips()[0];
  const auto dir = scratch("bad");
  auto cfg = TokenizerConfig::desk();
  RandomTeacher t(5, 16);
  auto f = t.features(clip, cfg);
  f.video.rows -= 1;
  f.video.data.resize(f.video.rows * f.video.cols);
  save_features(dir, content_hash(clip), f);
  try {
    FileTeacher(dir).features(clip, cfg);
    FAIL("expected a count mismatch");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("L_t = 256") != std::string::npos);
  }

  auto bytes = encode_dfea({FeatureStream::kImage, content_hash(clip), f.image});
  CHECK(decode_dfea(ByteReader(bytes)).grid == f.image);
  bytes[1] = 'X';
  CHECK_THROWS_AS(decode_dfea(ByteReader(bytes)), FormatError);
  CHECK_THROWS_AS(FileTeacher(dir / "nope"), ValidationError);
}

TEST_CASE("align_loss reference values", "[alignment]") {
  const auto e = random_matrix(5, 4, 1);
  CHECK(align_loss(e, e, Identity{}).item() == Catch::Approx(-1.0).margin(1e-12));

  const auto x = Tensor<double>::constant({2, 2}, {1, 0, 0, 1});
  const auto orth = Tensor<double>::constant({2, 2}, {0, 3, -2, 0});
  CHECK(align_loss(x, orth, Identity{}).item() == Catch::Approx(0.0).margin(1e-12));

  const auto mixed = Tensor<double>::constant({2, 2}, {2, 0, 1, 0});
  CHECK(align_loss(x, mixed, Identity{}).item() == Catch::Approx(-0.5).margin(1e-12));

  const auto zero = Tensor<double>::zeros({2, 2});
  CHECK(std::isfinite(align_loss(zero, mixed, Identity{}).item()));
  CHECK_THROWS_AS(align_loss(e, random_matrix(4, 4, 2), Identity{}), ValidationError);
}

TEST_CASE("align_loss is bounded and scale invariant in the targets", "[alignment]") {
  ParameterSet<double> ps;
  const auto head = make_projection_head(ps, "head", 8, 4, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto feats = random_matrix(6, 8, 100 + s);
    const auto targets = random_matrix(6, 4, 200 + s);
    const double l = align_loss(feats, targets, head).item();
    CHECK(l >= -1.0);
    CHECK(l <= 1.0);
    const double k = 0.01 + 10.0 * static_cast<double>(s);
    CHECK(align_loss(feats, scale(targets, k), head).item() == Catch::Approx(l).margin(1e-6));
  }
}

TEST_CASE("align_loss gradient matches finite differences", "[alignment]") {
  ParameterSet<double> ps;
  const auto head = make_projection_head(ps, "head", 6, 3, 5);
  const auto fv = random_matrix(4, 6, 9);
  auto feats = ps.add("feats", {4, 6}, std::vector<double>(fv.data().begin(), fv.data().end()));
  const auto targets = random_matrix(4, 3, 10);
  const auto g = backward(align_loss(feats, targets, head), ps);
  const auto block = g.block("feats");
  auto values = feats.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x0 = values[i];
    values[i] = x0 + 1e-5;
    const double up = align_loss(feats, targets, head).item();
    values[i] = x0 - 1e-5;
    const double dn = align_loss(feats, targets, head).item();
    values[i] = x0;
    CHECK(fd_rel_err(block[i], (up - dn) / 2e-5) < 1e-4);
  }
  // targets never need gradients
  CHECK_FALSE(targets.requires_grad());
}

TEST_CASE("teacher spec parsing", "[alignment]") {
  CHECK(make_teacher("random:7")->dim() == 32);
  CHECK(make_teacher("random:7:16")->dim() == 16);
  CHECK(make_teacher("random:7")->id() == "random:7:32");
  CHECK_THROWS_AS(make_teacher("dino"), ValidationError);
  CHECK_THROWS_AS(make_teacher("random:x"), ValidationError);
}

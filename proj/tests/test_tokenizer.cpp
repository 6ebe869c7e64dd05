#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>
#include <random>

#include "dera/diffcore/gradcheck.hpp"
#include "dera/tokenizer/checkpoint.hpp"
#include "dera/tokenizer/model.hpp"
#include "dera/videolab/scene.hpp"

using namespace dera;

namespace {

TokenizerConfig small_config() {
  TokenizerConfig c;
  c.frames = 4;
  c.height = c.width = 8;
  c.temporal_patch = 2;
  c.spatial_patch = 4;
  c.appearance_tokens = 2;
  c.motion_tokens = 3;
  c.hidden = 16;
  c.code_dim = 4;
  c.codebook_size = 16;
  c.layers = 2;
  c.align_depth = 2;
  return c;
}

VideoClip random_clip(std::size_t t, std::size_t h, std::size_t w, std::uint64_t seed) {
  VideoClip clip(t, h, w, 3);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : clip.pixels) v = u(rng);
  return clip;
}

VideoClip desk_clip(std::size_t i = 0) {
  DatasetConfig cfg;
  cfg.n_clips = i + 1;
  return generate_dataset(cfg)[i];
}

}  // namespace

TEST_CASE("token-count arithmetic", "[tokenizer]") {
  const auto paper = TokenizerConfig::paper();
  CHECK(paper.spatial_tokens() == 256);
  CHECK(paper.temporal_tokens() == 1024);
  CHECK(paper.sequence_length() == 1024);
  const auto desk = TokenizerConfig::desk();
  CHECK(desk.spatial_tokens() == 64);
  CHECK(desk.temporal_tokens() == 256);
  CHECK(desk.sequence_length() == 64);

  auto big = random_clip(16, 128, 128, 1);
  CHECK(patchify_frame(big, 8).rows == 256);
  CHECK(patchify_video(big, 4, 8).rows == 1024);
  auto small = random_clip(8, 32, 32, 2);
  const auto pf = patchify_frame(small, 4);
  CHECK(pf.rows == 64);
  CHECK(pf.cols == 48);
  CHECK(patchify_video(small, 2, 4).rows == 256);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    TokenizerConfig c;
    c.temporal_patch = 1 + rng() % 3;
    c.spatial_patch = 1 + rng() % 4;
    c.frames = c.temporal_patch * (1 + rng() % 4);
    c.height = c.spatial_patch * (1 + rng() % 5);
    c.width = c.spatial_patch * (1 + rng() % 5);
    const auto clip = random_clip(c.frames, c.height, c.width, rng());
    CHECK(patchify_frame(clip, c.spatial_patch).rows == c.spatial_tokens());
    CHECK(patchify_video(clip, c.temporal_patch, c.spatial_patch).rows == c.temporal_tokens());
  }
}

TEST_CASE("patchify rows follow raster order and unpatchify inverts", "[tokenizer]") {
  const auto clip = random_clip(4, 8, 12, 9);
  const auto pf = patchify_frame(clip, 4);
  // row 4 is the (1, 1) block in a 2x3 grid
  CHECK(pf.data[4 * pf.cols + 0] == clip.at(0, 4, 4, 0));
  CHECK(pf.data[4 * pf.cols + 12 + 2] == clip.at(0, 5, 4, 2));
  CHECK(pf.data[4 * pf.cols + 1 * 3 + 2] == clip.at(0, 4, 5, 2));

  const auto frame = unpatchify_frame(pf.data, 8, 12, 4);
  CHECK(std::equal(frame.pixels.begin(), frame.pixels.end(), clip.pixels.begin()));

  const auto pv = patchify_video(clip, 2, 4);
  CHECK(unpatchify_video(pv.data, 4, 8, 12, 2, 4) == clip);

  CHECK_THROWS_AS(patchify_frame(clip, 5), ValidationError);
  CHECK_THROWS_AS(patchify_video(clip, 3, 4), ValidationError);
}

TEST_CASE("constant and static clips give repeated patch content", "[tokenizer]") {
  VideoClip flat(2, 8, 8, 3, 0.3f);
  const auto pf = patchify_frame(flat, 4);
  for (std::size_t r = 1; r < pf.rows; ++r)
    CHECK(std::equal(pf.data.begin(), pf.data.begin() + pf.cols, pf.data.begin() + r * pf.cols));

  SceneSpec spec;
  spec.position = {12, 12};
  const auto still = generate_clip(spec, 4, 8, 32, 32);
  const auto pv = patchify_video(still, 2, 4);
  const std::size_t sub = 4 * 4 * 3;
  for (std::size_t r = 0; r < pv.rows; ++r) {
    const auto row = pv.data.begin() + r * pv.cols;
    CHECK(std::equal(row, row + sub, row + sub));
  }
}

TEST_CASE("encoder shapes on the desk config", "[tokenizer]") {
  DeraTokenizer<float> tok(TokenizerConfig::desk(), 1);
  NoGradGuard ng;
  const auto enc = tok.encode(desk_clip());
  CHECK(enc.z_appearance.shape() == Shape{16, 128});
  CHECK(enc.z_motion.shape() == Shape{48, 128});
  CHECK(enc.appearance_at_depth.shape() == Shape{64, 128});
  CHECK(enc.motion_at_depth.shape() == Shape{256, 128});
  CHECK_THROWS_AS(tok.encode(random_clip(4, 32, 32, 1)), ValidationError);
}

TEST_CASE("streams are independent passes", "[tokenizer]") {
  const auto cfg = small_config();
  DeraTokenizer<double> tok(cfg, 3);
  const auto clip = random_clip(cfg.frames, cfg.height, cfg.width, 4);
  const auto frame = to_tensor<double>(patchify_frame(clip, cfg.spatial_patch));
  auto tub = patchify_video(clip, cfg.temporal_patch, cfg.spatial_patch);
  const auto base = tok.encode_patches(frame, to_tensor<double>(tub));

  // swap the first two tubelet rows
  std::swap_ranges(tub.data.begin(), tub.data.begin() + tub.cols, tub.data.begin() + tub.cols);
  const auto permuted = tok.encode_patches(frame, to_tensor<double>(tub));
  CHECK(std::equal(base.z_appearance.data().begin(), base.z_appearance.data().end(),
                   permuted.z_appearance.data().begin()));
  CHECK_FALSE(std::equal(base.z_motion.data().begin(), base.z_motion.data().end(), permuted.z_motion.data().begin()));
}

TEST_CASE("alignment depth selects the matching encoder layer", "[tokenizer]") {
  auto cfg = small_config();
  const auto clip = random_clip(cfg.frames, cfg.height, cfg.width, 5);
  const auto frame = to_tensor<double>(patchify_frame(clip, cfg.spatial_patch));
  const auto tub = to_tensor<double>(patchify_video(clip, cfg.temporal_patch, cfg.spatial_patch));
  for (std::size_t depth = 1; depth <= cfg.layers; ++depth) {
    cfg.align_depth = depth;
    DeraTokenizer<double> tok(cfg, 6);
    const auto enc = tok.encode_patches(frame, tub);
    const auto states = tok.encoder_states(tub, true);
    const auto expect = slice(states[depth], 0, cfg.motion_tokens, cfg.motion_tokens + cfg.temporal_tokens());
    CHECK(std::equal(expect.data().begin(), expect.data().end(), enc.motion_at_depth.data().begin()));
    if (depth == cfg.layers) {
      const auto last = slice(states.back(), 0, cfg.motion_tokens, cfg.motion_tokens + cfg.temporal_tokens());
      CHECK(std::equal(last.data().begin(), last.data().end(), enc.motion_at_depth.data().begin()));
    }
  }
  cfg.align_depth = 3;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("quantizer fixed point and tie-break", "[tokenizer]") {
  std::vector<double> book(10 * 3);
  std::iota(book.begin(), book.end(), 0.0);
  const auto codebook = Tensor<double>::leaf({10, 3}, book, true);
  auto z = Tensor<double>::leaf({1, 3}, {21, 22, 23}, true);  // row 7
  const auto q = quantize_rows(z, codebook);
  CHECK(q.indices == std::vector<std::size_t>{7});
  CHECK(q.codebook_loss.item() == 0.0);
  CHECK(q.commitment_loss.item() == 0.0);

  // entries 2 and 5 at equal distance, everything else far
  auto tie = Tensor<double>::constant({6, 1}, {100, 100, 1, 100, 100, 3});
  const auto probe = Tensor<double>::constant({1, 1}, {2});
  CHECK(nearest_codes(probe, tie) == std::vector<std::size_t>{2});
  CHECK_THROWS_AS(nearest_codes(probe, Tensor<double>::constant({0, 1}, {})), ValidationError);
}

TEST_CASE("quantized rows are codebook rows and match a brute-force scan", "[tokenizer]") {
  std::mt19937_64 rng(12);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> book(64 * 8), rows(200 * 8);
  for (auto& v : book) v = n(rng);
  for (auto& v : rows) v = n(rng);
  const auto codebook = Tensor<float>::constant({64, 8}, book);
  const auto q = quantize_rows(Tensor<float>::constant({200, 8}, rows), codebook);
  for (std::size_t r = 0; r < 200; ++r) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t j = 0; j < 64; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < 8; ++c) d += std::pow(double(rows[r * 8 + c]) - book[j * 8 + c], 2);
      if (d < best_d) best_d = d, best = j;
    }
    CHECK(q.indices[r] == best);
    CHECK(std::equal(q.quantized.data().begin() + r * 8, q.quantized.data().begin() + r * 8 + 8,
                     book.begin() + q.indices[r] * 8));
  }
}

TEST_CASE("straight-through gradient equals the gradient at the code value", "[tokenizer]") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> book(6 * 3), zv(4 * 3), w(4 * 3);
  for (auto& v : book) v = n(rng);
  for (auto& v : zv) v = n(rng);
  for (auto& v : w) v = n(rng);
  ParameterSet<double> ps;
  auto z = ps.add("z", {4, 3}, zv);
  const auto codebook = Tensor<double>::constant({6, 3}, book);
  const auto weights = Tensor<double>::constant({4, 3}, w);
  auto head = [&](const Tensor<double>& y) { return sum(mul(gelu(y), weights)); };

  const auto q = quantize_rows(z, codebook);
  const auto g = backward(head(q.quantized), ps);
  const auto codes = q.codes.data();
  for (std::size_t i = 0; i < zv.size(); ++i) {
    std::vector<double> up(codes.begin(), codes.end()), dn(up);
    up[i] += 1e-5;
    dn[i] -= 1e-5;
    const double fd = (head(Tensor<double>::constant({4, 3}, up)).item() -
                       head(Tensor<double>::constant({4, 3}, dn)).item()) / 2e-5;
    CHECK(fd_rel_err(g.flat[i], fd) < 1e-5);
  }
}

TEST_CASE("loss on appearance queries leaves motion queries without gradient", "[tokenizer]") {
  const auto cfg = small_config();
  DeraTokenizer<double> tok(cfg, 8);
  const auto enc = tok.encode(random_clip(cfg.frames, cfg.height, cfg.width, 9));
  const auto ga = backward(sum(mul(enc.z_appearance, enc.z_appearance)), tok.params());
  auto norm = [](std::span<const double> b) {
    double s = 0;
    for (double v : b) s += v * v;
    return s;
  };
  CHECK(norm(ga.block("encoder.query_m")) == 0.0);
  CHECK(norm(ga.block("encoder.patch_t.w")) == 0.0);
  CHECK(norm(ga.block("encoder.query_a")) > 0.0);
  CHECK(norm(ga.block("encoder.block0.qkv.w")) > 0.0);
  const auto gm = backward(sum(enc.z_motion), tok.params());
  CHECK(norm(gm.block("encoder.query_a")) == 0.0);
  CHECK(norm(gm.block("encoder.query_m")) > 0.0);
  CHECK(norm(gm.block("encoder.block0.qkv.w")) > 0.0);
}

TEST_CASE("decode, tokenize and detokenize compose exactly", "[tokenizer]") {
  DeraTokenizer<float> tok(TokenizerConfig::desk(), 2);
  const auto clip = desk_clip(3);
  const auto seq = tok.tokenize(clip);
  CHECK(seq.size() == 64);
  CHECK(seq.appearance_length() == 16);
  for (auto i : seq.indices()) CHECK(i < 256);
  const auto a = tok.detokenize(seq);
  const auto b = tok.reconstruct(clip);
  CHECK(a.same_dims(clip));
  CHECK(a == b);
  CHECK(tok.detokenize(seq) == a);
  for (float v : a.pixels) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  auto bad = seq.indices();
  bad[5] = 256;
  CHECK_THROWS_AS(tok.detokenize(TokenSequence(16, 48, bad)), ValidationError);
  CHECK_THROWS_AS(tok.decode(Tensor<float>::zeros({63, 8})), ValidationError);
}

TEST_CASE("token swapping", "[tokenizer]") {
  std::vector<std::size_t> xi(10), yi(10);
  std::iota(xi.begin(), xi.end(), 0);
  std::iota(yi.begin(), yi.end(), 100);
  const TokenSequence x(4, 6, xi), y(4, 6, yi);
  auto [xa, ya] = swap_tokens(x, y, TokenBlock::kAppearance);
  CHECK(xa[0] == 100);
  CHECK(xa[4] == 4);
  auto [xb, yb] = swap_tokens(xa, ya, TokenBlock::kAppearance);
  CHECK(xb == x);
  CHECK(yb == y);
  auto [xm, ym] = swap_tokens(x, y, TokenBlock::kMotion);
  CHECK(std::equal(xi.begin(), xi.begin() + 4, xm.indices().begin()));
  CHECK(std::equal(yi.begin(), yi.begin() + 4, ym.indices().begin()));
  CHECK(xm[9] == 109);
  CHECK(xm.size() == 10);
  CHECK_THROWS_AS(swap_tokens(x, TokenSequence(5, 5, yi), TokenBlock::kMotion), ValidationError);
}

TEST_CASE("dead codes are re-seeded from recent encoder outputs", "[tokenizer]") {
  auto cfg = small_config();
  DeraTokenizer<float> tok(cfg, 4);
  tok.usage().record({0, 0, 3});
  CHECK(tok.usage().epoch_count() == 3);
  std::vector<float> recent(2 * cfg.code_dim, 0.5f);
  std::mt19937_64 rng(1);
  const auto before = std::vector<float>(tok.codebook().data().begin(), tok.codebook().data().end());
  CHECK(tok.reinit_dead_codes(recent, rng) == cfg.codebook_size - 2);
  const auto book = tok.codebook().data();
  CHECK(std::equal(book.begin(), book.begin() + cfg.code_dim, before.begin()));
  CHECK(book[cfg.code_dim] == 0.5f);
  CHECK(tok.usage().epoch_count() == 0);
  CHECK(tok.usage().total[0] == 2);
}

TEST_CASE("DCKP round-trips bit-exactly", "[tokenizer]") {
  DeraTokenizer<float> tok(small_config(), 5);
  Checkpoint ck;
  ck.config_json = R"({"hidden":16})";
  append_parameters(ck, tok.params());
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(ByteReader(bytes));
  CHECK(back == ck);
  CHECK(encode_checkpoint(back) == bytes);

  DeraTokenizer<float> other(small_config(), 99);
  restore_parameters(back, other.params());
  for (const auto& [name, p] : tok.params()) {
    const auto q = other.params().at(name).value.data();
    CHECK(std::equal(p.value.data().begin(), p.value.data().end(), q.begin()));
  }

  auto bad = bytes;
  bad[3] = 'x';
  CHECK_THROWS_AS(decode_checkpoint(ByteReader(bad)), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(ByteReader(cut)), FormatError);
}

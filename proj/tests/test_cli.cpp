#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dera/harness/cli.hpp"

using namespace dera;
namespace fs = std::filesystem;

namespace {

RunConfig tiny() {
  RunConfig c;
  auto& t = c.tokenizer;
  t.frames = 4;
  t.height = t.width = 8;
  t.appearance_tokens = 2;
  t.motion_tokens = 4;
  t.hidden = 16;
  t.code_dim = 4;
  t.codebook_size = 16;
  t.layers = 1;
  t.align_depth = 1;
  c.ar.codebook_size = 16;
  c.ar.sequence_length = 6;
  c.ar.width = 16;
  c.ar.layers = 1;
  c.steps = 8;
  c.batch_size = 2;
  c.n_clips = 4;
  c.n_eval_clips = 2;
  c.log_every = 2;
  c.eval_every = 4;
  c.checkpoint_every = 4;
  c.teacher = "random:5:8";
  c.optimizer.warmup_steps = 2;
  c.ar_steps = 4;
  c.ar_batch_size = 2;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dera_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dera");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::vector<char> bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Config file plus a trained tokenizer under `dir`.
std::string trained(const fs::path& dir, const RunConfig& c = tiny()) {
  save_config(dir / "cfg.json", c);
  REQUIRE(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "tok").string()}) == 0);
  return (dir / "tok" / "tokenizer.dckp").string();
}

}  // namespace

TEST_CASE("flag errors exit with 1", "[cli]") {
  CHECK(cli({}) == 1);
  CHECK(cli({"no-such-command"}) == 1);
  CHECK(cli({"grad-check", "--bogus"}) == 1);
  CHECK(cli({"train-tokenizer", "--config", "/nonexistent/cfg.json", "--out", "x"}) == 1);
  CHECK(cli({"eval"}) == 1);  // missing --tokenizer
  CHECK(cli({"--help"}) == 0);
}

TEST_CASE("invalid configs exit with 1", "[cli]") {
  const auto dir = scratch("badcfg");
  std::ofstream(dir / "unknown.json") << R"({"seed": 1, "colour": "red"})";
  CHECK(cli({"train-tokenizer", "--config", (dir / "unknown.json").string(), "--out", (dir / "o").string()}) == 1);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(cli({"gen-data", "--config", (dir / "broken.json").string(), "--out", (dir / "d").string()}) == 1);
}

TEST_CASE("init-config writes a loadable default", "[cli]") {
  const auto dir = scratch("init");
  REQUIRE(cli({"init-config", "--out", (dir / "c.json").string()}) == 0);
  CHECK(dump_config(load_config(dir / "c.json")) == dump_config(RunConfig{}));
}

TEST_CASE("gen-data writes train and held-out clips", "[cli]") {
  const auto dir = scratch("gen");
  save_config(dir / "cfg.json", tiny());
  REQUIRE(cli({"gen-data", "--config", (dir / "cfg.json").string(), "--out", (dir / "data").string(), "--n-clips",
               "3"}) == 0);
  CHECK(list_clips(dir / "data").size() == 3);
  CHECK(list_clips(dir / "data" / "eval").size() == 2);
}

TEST_CASE("reconstruct writes a clip of identical dims", "[cli]") {
  const auto dir = scratch("recon");
  const auto ck = trained(dir);
  const auto clip = load_dataset(tiny()).train[1];
  save_clip(dir / "a.dvid", clip);
  REQUIRE(cli({"reconstruct", "--tokenizer", ck, "--in", (dir / "a.dvid").string(), "--out", (dir / "r.dvid").string()}) ==
          0);
  const auto r = load_clip(dir / "r.dvid");
  CHECK(r.frames == clip.frames);
  CHECK(r.height == clip.height);
  CHECK(r.width == clip.width);
  CHECK(r.channels == clip.channels);

  auto wrong = tiny();
  wrong.tokenizer.height = wrong.tokenizer.width = 16;
  save_clip(dir / "big.dvid", load_dataset(wrong).train[0]);
  CHECK(cli({"reconstruct", "--tokenizer", ck, "--in", (dir / "big.dvid").string(), "--out", (dir / "x.dvid").string()}) ==
        1);
}

TEST_CASE("generate is deterministic per seed", "[cli]") {
  const auto dir = scratch("generate");
  const auto ck = trained(dir);
  REQUIRE(cli({"train-ar", "--tokenizer", ck, "--out", (dir / "ar").string()}) == 0);
  const auto ar = (dir / "ar" / "ar.dckp").string();
  auto gen = [&](const std::string& out, const std::string& seed) {
    return cli({"generate", "--ar", ar, "--class", "2", "--cfg-scale", "1.2", "--seed", seed, "--out",
                (dir / out).string(), "--tokenizer", ck, "--video", (dir / (out + "_")).string()});
  };
  REQUIRE(gen("g1.toks", "7") == 0);
  REQUIRE(gen("g2.toks", "7") == 0);
  CHECK(bytes(dir / "g1.toks") == bytes(dir / "g2.toks"));
  CHECK(bytes(dir / "g1.toks_0.dvid") == bytes(dir / "g2.toks_0.dvid"));
  const auto seqs = load_tokens(dir / "g1.toks");
  REQUIRE(seqs.size() == 1);
  CHECK(seqs[0].label == 2u);
  CHECK(seqs[0].ids.size() == 6);

  CHECK(cli({"generate", "--ar", ar, "--class", "9"}) == 1);
  CHECK(cli({"generate", "--ar", ar}) == 1);
}

TEST_CASE("prediction mode trains and samples from a context clip", "[cli]") {
  const auto dir = scratch("predict");
  const auto ck = trained(dir);
  REQUIRE(cli({"train-ar", "--tokenizer", ck, "--out", (dir / "ar").string(), "--mode", "prediction"}) == 0);
  save_clip(dir / "ctx.dvid", load_dataset(tiny()).eval[0]);
  CHECK(cli({"generate", "--ar", (dir / "ar" / "ar.dckp").string(), "--tokenizer", ck, "--context",
             (dir / "ctx.dvid").string(), "--out", (dir / "p.toks").string()}) == 0);
  CHECK(load_tokens(dir / "p.toks").front().ids.size() == 6);
  CHECK(cli({"generate", "--ar", (dir / "ar" / "ar.dckp").string(), "--context", (dir / "ctx.dvid").string()}) == 1);
}

TEST_CASE("AR config must match the tokenizer", "[cli]") {
  const auto dir = scratch("armismatch");
  const auto ck = trained(dir);
  auto c = tiny();
  c.ar.codebook_size = 32;
  save_config(dir / "ar.json", c);
  CHECK(cli({"train-ar", "--tokenizer", ck, "--config", (dir / "ar.json").string(), "--out", (dir / "ar").string()}) == 1);
}

TEST_CASE("diverging training exits with 2", "[cli]") {
  const auto dir = scratch("diverge");
  auto c = tiny();
  c.optimizer.lr = 1e30;
  c.optimizer.warmup_steps = 0;
  save_config(dir / "cfg.json", c);
  CHECK(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string()}) == 2);
}

TEST_CASE("resume reuses a run directory and rejects a changed config", "[cli]") {
  const auto dir = scratch("resume");
  auto c = tiny();
  trained(dir, c);
  const auto first = bytes(dir / "tok" / "metrics.csv");
  fs::create_directories(dir / "again");
  fs::copy(dir / "tok" / "tokenizer.dckp", dir / "again" / "tokenizer.dckp");
  CHECK(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "again").string(),
             "--resume"}) == 0);
  CHECK(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "again").string(), "--resume",
             "--no-sacp"}) == 1);
  CHECK(first.size() > 0);
}

TEST_CASE("compare writes paired curves", "[cli]") {
  const auto dir = scratch("compare");
  save_config(dir / "cfg.json", tiny());
  REQUIRE(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "cmp").string(),
               "--compare"}) == 0);
  std::ifstream in(dir / "cmp" / "convergence.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,rec_aligned,rec_baseline");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 8);
  CHECK(fs::exists(dir / "cmp" / "aligned" / "summary.json"));
  CHECK(fs::exists(dir / "cmp" / "baseline" / "tokenizer.dckp"));
}

TEST_CASE("exported features drive a file teacher", "[cli]") {
  const auto dir = scratch("features");
  auto c = tiny();
  save_config(dir / "cfg.json", c);
  REQUIRE(cli({"export-features", "--config", (dir / "cfg.json").string(), "--out", (dir / "feats").string()}) == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "feats")) files += e.path().extension() == ".dfea";
  CHECK(files == 2 * (c.n_clips + c.n_eval_clips));
  CHECK(cli({"train-tokenizer", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string(), "--steps", "2"}) ==
        0);
  c.teacher = "file:" + (dir / "feats").string();
  save_config(dir / "file.json", c);
  CHECK(cli({"train-tokenizer", "--config", (dir / "file.json").string(), "--out", (dir / "f").string(), "--steps",
             "2"}) == 0);
}

TEST_CASE("eval, swap and grad-check run", "[cli]") {
  const auto dir = scratch("misc");
  const auto ck = trained(dir);
  CHECK(cli({"eval", "--tokenizer", ck}) == 0);
  CHECK(cli({"eval", "--tokenizer", ck, "--train-split"}) == 0);
  CHECK(cli({"swap", "--tokenizer", ck, "--pairs", "2", "--train-split", "--out", (dir / "swap").string()}) == 0);
  CHECK(fs::exists(dir / "swap" / "report.csv"));
  CHECK(cli({"grad-check", "--points", "1"}) == 0);
}

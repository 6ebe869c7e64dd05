#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "dera/diffcore/autograd.hpp"
#include "dera/harness/run_config.hpp"
#include "dera/videolab/dvid.hpp"
#include "dera/videolab/scene.hpp"

namespace dera {

struct Dataset {
  std::vector<VideoClip> train;
  std::vector<VideoClip> eval;  // held-out split
};

inline DatasetConfig procedural_config(const RunConfig& c, std::size_t n) {
  DatasetConfig d;
  d.n_clips = n;
  d.frames = c.tokenizer.frames;
  d.height = c.tokenizer.height;
  d.width = c.tokenizer.width;
  d.seed = c.seed;
  return d;
}

inline std::vector<VideoClip> load_clip_dir(const std::filesystem::path& dir) {
  std::vector<VideoClip> out;
  for (const auto& p : list_clips(dir)) out.push_back(load_clip(p));
  return out;
}

/// Writes train clips to `dir` and held-out clips to `dir/eval`.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir / "eval");
  auto dump = [](const std::filesystem::path& base, const std::vector<VideoClip>& clips) {
    for (std::size_t i = 0; i < clips.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "clip_%05zu.dvid", i);
      save_clip(base / name, clips[i]);
    }
  };
  dump(dir, d.train);
  dump(dir / "eval", d.eval);
}

/// Clips from `dataset_dir` (held-out split from its eval/ subdirectory), or
/// the procedural set defined by the config when no directory is given.
inline Dataset load_dataset(const RunConfig& c) {
  Dataset d;
  if (!c.dataset_dir.empty()) {
    const std::filesystem::path dir(c.dataset_dir);
    if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory '" + c.dataset_dir + "' not found");
    d.train = load_clip_dir(dir);
    if (std::filesystem::is_directory(dir / "eval")) d.eval = load_clip_dir(dir / "eval");
  } else {
    d.train = generate_dataset(procedural_config(c, c.n_clips));
    if (c.n_eval_clips > 0) d.eval = generate_dataset(procedural_config(c, c.n_eval_clips), c.n_clips);
  }
  if (d.train.empty()) throw ValidationError("dataset is empty");
  return d;
}

/// Deterministic generator for a (seed, purpose, index) triple.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
  return named_rng(seed, std::string(purpose) + ":" + std::to_string(index));
}

}  // namespace dera

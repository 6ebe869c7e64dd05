#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <openssl/evp.h>

#include "dera/argen/sampling.hpp"
#include "dera/argen/token_file.hpp"
#include "dera/harness/data.hpp"
#include "dera/harness/evaluate.hpp"
#include "dera/harness/optimizer.hpp"

namespace dera {

inline ContentHash sha256(std::span<const std::uint8_t> bytes) {
  ContentHash out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw NumericError("sha256", "digest failed");
  }
  return out;
}

/// The AR vocabulary must be built over exactly this tokenizer's codes.
inline void check_ar_compatible(const ARConfig& ar, const TokenizerConfig& tok) {
  if (ar.codebook_size != tok.codebook_size || ar.sequence_length != tok.sequence_length()) {
    throw ValidationError("ar config expects K=" + std::to_string(ar.codebook_size) + ", L=" +
                          std::to_string(ar.sequence_length) + " but the tokenizer has K=" +
                          std::to_string(tok.codebook_size) + ", L=" + std::to_string(tok.sequence_length()));
  }
}

/// Token lists for AR training. Class mode: one labelled sequence per clip.
/// Prediction mode: a (context, target) pair per clip, stored consecutively.
template <class T>
std::vector<LabeledTokens> tokenize_for_ar(const DeraTokenizer<T>& tok, const std::vector<VideoClip>& clips,
                                           GenMode mode) {
  std::vector<LabeledTokens> out;
  for (const auto& clip : clips) {
    std::optional<std::uint32_t> label;
    if (clip.class_label) label = *clip.class_label;
    if (mode == GenMode::kPrediction) out.push_back({label, tok.tokenize(prediction_context_clip(clip)).indices()});
    out.push_back({label, tok.tokenize(clip).indices()});
  }
  return out;
}

inline std::vector<GenExample> make_ar_examples(const ARConfig& cfg, const std::vector<LabeledTokens>& seqs) {
  std::vector<GenExample> out;
  if (cfg.mode == GenMode::kClass) {
    for (const auto& s : seqs) {
      if (!s.label || *s.label >= cfg.n_classes) throw ValidationError("class mode needs a label < n_classes on every clip");
      out.push_back(build_class_example(cfg, *s.label, s.ids));
    }
  } else {
    if (seqs.size() % 2) throw ValidationError("prediction token list must hold (context, target) pairs");
    for (std::size_t i = 0; i < seqs.size(); i += 2) out.push_back(build_prediction_batch(cfg, seqs[i].ids, seqs[i + 1].ids));
  }
  if (out.empty()) throw ValidationError("no AR training examples");
  return out;
}

/// Tokens of `clips` under the tokenizer stored at `tokenizer_path`, cached in
/// `cache_dir` under a key derived from the checkpoint bytes, the clip
/// contents and the mode. Returns the cache file path through `used`.
inline std::vector<LabeledTokens> cached_tokens(const std::filesystem::path& tokenizer_path,
                                                const std::vector<VideoClip>& clips, GenMode mode,
                                                const std::filesystem::path& cache_dir,
                                                std::filesystem::path* used = nullptr, bool* hit = nullptr) {
  auto ck_bytes = ByteReader::from_file(tokenizer_path);
  ByteWriter key;
  const auto ck_hash = sha256(ck_bytes.raw(ck_bytes.remaining(), "checkpoint"));
  key.bytes(ck_hash.data(), ck_hash.size());
  key.u8(mode == GenMode::kClass ? 0 : 1);
  for (const auto& c : clips) {
    const auto h = content_hash(c);
    key.bytes(h.data(), h.size());
    key.u32(c.class_label.value_or(kNoLabel));
  }
  const auto path = cache_dir / ("tokens-" + to_hex(sha256(key.buffer())).substr(0, 16) + ".toks");
  if (used) *used = path;
  if (std::filesystem::exists(path)) {
    if (hit) *hit = true;
    return load_tokens(path);
  }
  if (hit) *hit = false;
  const auto tok = load_tokenizer(tokenizer_path);
  auto seqs = tokenize_for_ar(tok, clips, mode);
  std::filesystem::create_directories(cache_dir);
  save_tokens(path, seqs);
  return seqs;
}

struct ArTrainOptions {
  std::filesystem::path out_dir;
  std::string metrics_name = "ar_metrics.csv";
  std::string checkpoint_name = "ar.dckp";
  bool quiet = true;
};

struct ArTrainSummary {
  std::size_t steps_done = 0;
  double initial_loss = 0;
  std::vector<double> loss_history;
  double seconds = 0;
};

class ArTrainer {
 public:
  using T = float;

  ArTrainer(RunConfig cfg, std::vector<GenExample> examples)
      : cfg_(std::move(cfg)), examples_(std::move(examples)), model_(cfg_.ar, cfg_.seed), adam_(cfg_.optimizer) {
    cfg_.validate();
    if (examples_.empty()) throw ValidationError("train_ar: no examples");
  }

  ARModel<T>& model() noexcept { return model_; }
  const ARModel<T>& model() const noexcept { return model_; }
  std::size_t step() const noexcept { return step_; }

  std::vector<std::size_t> batch_indices(std::size_t s) const {
    const std::size_t n = examples_.size(), b = cfg_.ar_batch_size;
    const std::size_t spe = (n + b - 1) / b, epoch = s / spe, pos = s % spe;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    auto rng = step_rng(cfg_.seed, "ar-epoch", epoch);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t lo = pos * b, hi = std::min(n, lo + b);
    return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
  }

  double train_step() {
    std::vector<GenExample> batch;
    for (auto i : batch_indices(step_)) batch.push_back(examples_[i]);
    auto rng = step_rng(cfg_.seed, "cond-dropout", step_);
    const auto loss = ar_loss(model_, batch, cfg_.ar.cond_dropout, rng);
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("train_ar", "non-finite loss at step " + std::to_string(step_ + 1));
    const auto grads = backward(loss, model_.params());
    adam_.step(model_.params(), grads, scheduled_lr(cfg_.optimizer, step_, cfg_.ar_steps));
    ++step_;
    return v;
  }

  /// Mean per-token loss over every example with conditions intact.
  double mean_loss() const {
    NoGradGuard ng;
    double acc = 0;
    for (const auto& ex : examples_) acc += model_.example_loss(ex).item();
    return acc / static_cast<double>(examples_.size());
  }

  Checkpoint make_checkpoint() const {
    Checkpoint ck;
    Json header;
    header["config"] = to_json(cfg_);
    header["state"] = Json{{"step", step_}, {"adam_step", adam_.step_count()}};
    ck.config_json = header.dump();
    append_parameters(ck, model_.params());
    adam_.save(ck);
    return ck;
  }

  ArTrainSummary run(const ArTrainOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    ArTrainSummary sum;
    sum.initial_loss = mean_loss();
    std::ofstream log;
    if (!opt.out_dir.empty()) {
      std::filesystem::create_directories(opt.out_dir);
      log.open(opt.out_dir / opt.metrics_name, std::ios::binary | std::ios::trunc);
      log << "step,loss\n";
    }
    while (step_ < cfg_.ar_steps) {
      const double v = train_step();
      sum.loss_history.push_back(v);
      if (step_ == 1 || step_ % cfg_.log_every == 0 || step_ == cfg_.ar_steps) {
        char line[64];
        std::snprintf(line, sizeof line, "%zu,%.9g\n", step_, v);
        if (log.is_open()) log << line << std::flush;
        if (!opt.quiet) std::fprintf(stderr, "ar step %s", line);
      }
      ++sum.steps_done;
    }
    if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir / opt.checkpoint_name, make_checkpoint());
    sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return sum;
  }

 private:
  RunConfig cfg_;
  std::vector<GenExample> examples_;
  ARModel<T> model_;
  Adam<T> adam_;
  std::size_t step_ = 0;
};

inline ARModel<float> load_ar_model(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  const auto cfg = checkpoint_run_config(ck);
  ARModel<float> model(cfg.ar, cfg.seed);
  restore_parameters(ck, model.params());
  return model;
}

}  // namespace dera

#pragma once

// Decoder-only transformer over code tokens with class or context prefixes.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dera/tokenizer/layers.hpp"
#include "dera/tokenizer/token_sequence.hpp"
#include "dera/videolab/clip.hpp"

namespace dera {

enum class GenMode { kClass, kPrediction };

struct ARConfig {
  std::size_t codebook_size = 256;  // K
  std::size_t sequence_length = 64;  // L
  std::size_t n_classes = 4;
  std::size_t width = 128;
  std::size_t layers = 4;
  std::size_t heads = 0;
  std::size_t context_length = 0;  // 0: just enough for the mode
  GenMode mode = GenMode::kClass;
  double cfg_scale = 1.2;
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0: no filtering
  double cond_dropout = 0.1;

  std::size_t vocab() const { return codebook_size + n_classes + 2; }
  std::size_t cls_id(std::size_t c) const { return codebook_size + c; }
  std::size_t sep_id() const { return codebook_size + n_classes; }
  std::size_t uncond_id() const { return codebook_size + n_classes + 1; }
  bool is_code(std::size_t id) const { return id < codebook_size; }

  std::size_t required_context() const {
    return mode == GenMode::kClass ? sequence_length + 1 : 2 * sequence_length + 1;
  }
  std::size_t effective_context() const { return context_length ? context_length : required_context(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("ar config: " + m); };
    if (codebook_size == 0 || sequence_length == 0) fail("codebook size and sequence length must be positive");
    if (mode == GenMode::kClass && n_classes == 0) fail("class mode needs at least one class");
    if (width == 0 || layers == 0) fail("width and layers must be positive");
    if (effective_context() < required_context()) {
      fail("context length " + std::to_string(effective_context()) + " below the " +
           std::to_string(required_context()) + " tokens this mode needs");
    }
    if (!(cfg_scale >= 0) || !(temperature >= 0)) fail("cfg_scale and temperature must be >= 0");
    if (!(cond_dropout >= 0 && cond_dropout <= 1)) fail("cond_dropout must lie in [0, 1]");
  }
};

/// One teacher-forced example. Position i predicts targets[i] == ids[i + 1];
/// mask zero excludes a position from the loss. The first `cond_len` ids are
/// the condition (class token or context tokens).
struct GenExample {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> targets;
  std::vector<float> mask;
  std::size_t cond_len = 0;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (float m : mask) n += m == 0.0f ? 1 : 0;
    return n;
  }
};

namespace detail {

inline GenExample shifted(std::vector<std::size_t> ids, std::size_t first_target_pos, std::size_t cond_len) {
  GenExample ex;
  const std::size_t s = ids.size();
  ex.targets.assign(s, 0);
  ex.mask.assign(s, 0.0f);
  for (std::size_t i = 0; i + 1 < s; ++i) {
    ex.targets[i] = ids[i + 1];
    if (i >= first_target_pos) ex.mask[i] = 1.0f;
  }
  ex.ids = std::move(ids);
  ex.cond_len = cond_len;
  return ex;
}

}  // namespace detail

/// [CLS_c] followed by the code sequence.
inline GenExample build_class_example(const ARConfig& cfg, std::size_t cls, const std::vector<std::size_t>& seq) {
  if (cls >= cfg.n_classes) throw ValidationError("class " + std::to_string(cls) + " >= n_classes");
  for (auto id : seq)
    if (!cfg.is_code(id)) throw ValidationError("token id " + std::to_string(id) + " is not a code id");
  std::vector<std::size_t> ids{cfg.cls_id(cls)};
  ids.insert(ids.end(), seq.begin(), seq.end());
  if (ids.size() > cfg.effective_context()) throw ValidationError("sequence exceeds the context length");
  return detail::shifted(std::move(ids), 0, 1);
}

/// context ++ [SEP] ++ target; only positions that predict target tokens
/// contribute to the loss.
inline GenExample build_prediction_batch(const ARConfig& cfg, const std::vector<std::size_t>& context,
                                         const std::vector<std::size_t>& target) {
  for (auto id : context)
    if (!cfg.is_code(id)) throw ValidationError("context id " + std::to_string(id) + " is not a code id");
  for (auto id : target)
    if (!cfg.is_code(id)) throw ValidationError("target id " + std::to_string(id) + " is not a code id");
  std::vector<std::size_t> ids(context);
  ids.push_back(cfg.sep_id());
  ids.insert(ids.end(), target.begin(), target.end());
  if (ids.size() > cfg.effective_context()) {
    throw ValidationError("prediction example of " + std::to_string(ids.size()) + " tokens overflows context " +
                          std::to_string(cfg.effective_context()));
  }
  return detail::shifted(std::move(ids), context.size(), context.size());
}

/// Inverse of build_prediction_batch's layout.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_prediction(const ARConfig& cfg,
                                                                                      const std::vector<std::size_t>& ids) {
  const auto sep = std::find(ids.begin(), ids.end(), cfg.sep_id());
  if (sep == ids.end()) throw ValidationError("no separator token in sequence");
  return {std::vector<std::size_t>(ids.begin(), sep), std::vector<std::size_t>(sep + 1, ids.end())};
}

/// Stand-in context for frame prediction: the first half of the frames, each
/// shown twice, so the clip has the tokenizer's frame count.
inline VideoClip prediction_context_clip(const VideoClip& clip) {
  if (clip.frames < 2) throw ValidationError("prediction context needs at least 2 frames");
  VideoClip out = clip;
  const std::size_t frame = clip.height * clip.width * clip.channels;
  for (std::size_t t = 0; t < clip.frames; ++t) {
    const std::size_t src = std::min(t / 2, clip.frames / 2 - 1);
    std::copy_n(clip.pixels.begin() + src * frame, frame, out.pixels.begin() + t * frame);
  }
  return out;
}

template <class T>
class ARModel {
 public:
  ARModel(const ARConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.width, v = cfg_.vocab(), ctx = cfg_.effective_context();
    tok_emb_ = make_embedding(params_, "ar.tok_emb", v, d, seed);
    pos_emb_ = make_embedding(params_, "ar.pos_emb", ctx, d, seed);
    for (std::size_t i = 0; i < cfg_.layers; ++i)
      blocks_.push_back(make_block(params_, "ar.block" + std::to_string(i), d, cfg_.heads, cfg_.layers, seed));
    ln_out_ = make_layer_norm(params_, "ar.ln_out", d);
    head_ = make_linear(params_, "ar.head", d, v, seed);
  }

  const ARConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

  /// Logits (len x vocab); row i depends on ids[0..i] only.
  Tensor<T> forward(const std::vector<std::size_t>& ids) const {
    const std::size_t n = ids.size();
    if (n == 0) throw ValidationError("ar_forward: empty input");
    if (n > cfg_.effective_context()) {
      throw ValidationError("ar_forward: " + std::to_string(n) + " tokens exceed context " +
                            std::to_string(cfg_.effective_context()));
    }
    for (auto id : ids)
      if (id >= cfg_.vocab()) throw ValidationError("ar_forward: id " + std::to_string(id) + " out of vocabulary");
    const auto mask = causal_mask<T>(n);
    auto h = add(embedding(tok_emb_, std::span<const std::size_t>(ids)), slice(pos_emb_, 0, 0, n));
    for (const auto& b : blocks_) h = b(h, &mask);
    return head_(ln_out_(h));
  }

  /// Cross-entropy over unmasked positions of one example.
  Tensor<T> example_loss(const GenExample& ex) const {
    if (ex.masked_count() == ex.mask.size()) throw ValidationError("ar_loss: every position is masked");
    const std::vector<T> weights(ex.mask.begin(), ex.mask.end());
    return cross_entropy_with_logits(forward(ex.ids), std::span<const std::size_t>(ex.targets),
                                     std::span<const T>(weights));
  }

 private:
  ARConfig cfg_;
  ParameterSet<T> params_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_out_;
  Linear<T> head_;
};

/// Replaces the condition prefix by [UNCOND] tokens.
inline GenExample drop_condition(const ARConfig& cfg, GenExample ex) {
  for (std::size_t i = 0; i < ex.cond_len; ++i) ex.ids[i] = cfg.uncond_id();
  for (std::size_t i = 0; i + 1 < ex.cond_len; ++i) ex.targets[i] = cfg.uncond_id();
  return ex;
}

/// Mean over the batch of per-example next-token cross-entropy. Each
/// condition is dropped with probability `dropout` using `rng`.
template <class T>
Tensor<T> ar_loss(const ARModel<T>& model, const std::vector<GenExample>& batch, double dropout,
                  std::mt19937_64& rng) {
  if (batch.empty()) throw ValidationError("ar_loss: empty batch");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> total;
  for (const auto& ex : batch) {
    const bool drop = dropout > 0 && u(rng) < dropout;
    auto l = model.example_loss(drop ? drop_condition(model.config(), ex) : ex);
    total = total.defined() ? add(total, l) : l;
  }
  return batch.size() == 1 ? total : scale(total, T(1) / static_cast<T>(batch.size()));
}

}  // namespace dera

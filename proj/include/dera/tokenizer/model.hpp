#pragma once

// Dual-stream query encoder, vector quantizer and query decoder.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dera/tokenizer/config.hpp"
#include "dera/tokenizer/layers.hpp"
#include "dera/tokenizer/patchify.hpp"
#include "dera/tokenizer/token_sequence.hpp"

namespace dera {

template <class T>
struct EncoderOutput {
  Tensor<T> z_appearance;       // L_a x d, final layer
  Tensor<T> z_motion;           // L_m x d, final layer
  Tensor<T> appearance_at_depth;  // L_s x d
  Tensor<T> motion_at_depth;      // L_t x d
};

template <class T>
struct QuantizerOutput {
  Tensor<T> z;          // L x d_z, projected, before snapping
  Tensor<T> codes;      // L x d_z, codebook rows (differentiable w.r.t. the codebook)
  Tensor<T> quantized;  // L x d_z, value == codes, gradient passes straight to z
  std::vector<std::size_t> indices;
  Tensor<T> codebook_loss;    // mean (sg(z) - e)^2
  Tensor<T> commitment_loss;  // mean (z - sg(e))^2
};

template <class T>
Tensor<T> squared_error_mean(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

template <class T>
Tensor<T> to_tensor(const PatchMatrix& m) {
  return Tensor<T>::constant({m.rows, m.cols}, std::vector<T>(m.data.begin(), m.data.end()));
}

/// Exhaustive Euclidean nearest neighbour of each row of z (N x d_z) among
/// the codebook rows (K x d_z); ties go to the lowest index.
template <class T>
std::vector<std::size_t> nearest_codes(const Tensor<T>& z, const Tensor<T>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ValidationError("quantize: empty codebook");
  const std::size_t k = codebook.dim(0), dz = codebook.dim(1);
  if (z.rank() != 2 || z.dim(1) != dz) {
    throw ContractError("quantize: expected rows of width " + std::to_string(dz) + ", got " + shape_str(z.shape()));
  }
  const std::size_t n = z.dim(0);
  const auto zv = z.data();
  const auto cv = codebook.data();
  std::vector<T> dist(n * k);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      T acc = 0;
      for (std::size_t c = 0; c < dz; ++c) {
        const T diff = zv[r * dz + c] - cv[j * dz + c];
        acc += diff * diff;
      }
      dist[r * k + j] = acc;
    }
  return argmin_rows(Tensor<T>::constant({n, k}, std::move(dist)));
}

/// Forward value is exactly `codes`; the gradient flows to `z` unchanged.
template <class T>
Tensor<T> straight_through(const Tensor<T>& z, const Tensor<T>& codes) {
  return add(stop_gradient(codes), sub(z, stop_gradient(z)));
}

template <class T>
QuantizerOutput<T> quantize_rows(const Tensor<T>& z, const Tensor<T>& codebook) {
  QuantizerOutput<T> q;
  q.z = z;
  q.indices = nearest_codes(z, codebook);
  q.codes = embedding(codebook, std::span<const std::size_t>(q.indices));
  q.quantized = straight_through(q.z, q.codes);
  q.codebook_loss = squared_error_mean(stop_gradient(q.z), q.codes);
  q.commitment_loss = squared_error_mean(q.z, stop_gradient(q.codes));
  return q;
}

/// Per-entry hit counters for the current epoch plus lifetime totals.
struct CodebookUsage {
  std::vector<std::uint64_t> epoch;
  std::vector<std::uint64_t> total;

  explicit CodebookUsage(std::size_t k = 0) : epoch(k, 0), total(k, 0) {}

  void record(const std::vector<std::size_t>& indices) {
    for (auto i : indices) {
      ++epoch.at(i);
      ++total.at(i);
    }
  }
  std::uint64_t epoch_count() const {
    std::uint64_t n = 0;
    for (auto c : epoch) n += c;
    return n;
  }
};

template <class T>
class DeraTokenizer {
 public:
  DeraTokenizer(const TokenizerConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed), usage_(cfg.codebook_size) {
    cfg_.validate();
    build();
  }

  const TokenizerConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  std::vector<std::string> encoder_param_names() const { return params_.names_with_prefix("encoder."); }
  CodebookUsage& usage() noexcept { return usage_; }
  const CodebookUsage& usage() const noexcept { return usage_; }
  const Tensor<T>& codebook() const noexcept { return codebook_; }

  void check_clip(const VideoClip& clip) const {
    if (clip.frames != cfg_.frames || clip.height != cfg_.height || clip.width != cfg_.width || clip.channels != 3) {
      throw ValidationError("clip " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) + "x" +
                            std::to_string(clip.width) + "x" + std::to_string(clip.channels) +
                            " does not match tokenizer " + std::to_string(cfg_.frames) + "x" +
                            std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + "x3");
    }
  }

  EncoderOutput<T> encode(const VideoClip& clip) const {
    check_clip(clip);
    return encode_patches(to_tensor<T>(patchify_frame(clip, cfg_.spatial_patch)),
                          to_tensor<T>(patchify_video(clip, cfg_.temporal_patch, cfg_.spatial_patch)));
  }

  /// Both streams run through the same blocks as separate sequences.
  EncoderOutput<T> encode_patches(const Tensor<T>& frame_patches, const Tensor<T>& tubelets) const {
    EncoderOutput<T> out;
    auto a = run_stream(frame_patches, enc_patch_s_, enc_pos_patch_s_, enc_query_a_, enc_pos_query_a_);
    auto m = run_stream(tubelets, enc_patch_t_, enc_pos_patch_t_, enc_query_m_, enc_pos_query_m_);
    out.z_appearance = a.first;
    out.appearance_at_depth = a.second;
    out.z_motion = m.first;
    out.motion_at_depth = m.second;
    return out;
  }

  /// Full [queries | patches] sequence after each encoder block (index 0 is
  /// the input embedding). `motion` selects the tubelet stream.
  std::vector<Tensor<T>> encoder_states(const Tensor<T>& patches, bool motion) const {
    return motion ? stream_states(patches, enc_patch_t_, enc_pos_patch_t_, enc_query_m_, enc_pos_query_m_)
                  : stream_states(patches, enc_patch_s_, enc_pos_patch_s_, enc_query_a_, enc_pos_query_a_);
  }

  /// Concatenated queries (appearance first) snapped to the codebook.
  QuantizerOutput<T> quantize(const Tensor<T>& queries) const {
    return quantize_rows(quant_proj_(quant_ln_(queries)), codebook_);
  }

  QuantizerOutput<T> quantize(const EncoderOutput<T>& enc) const {
    return quantize(concat(std::vector<Tensor<T>>{enc.z_appearance, enc.z_motion}, 0));
  }

  /// Decoder output before clamping, as an L_t x (t*p*p*3) tubelet matrix.
  Tensor<T> decode_patches(const Tensor<T>& quantized) const {
    if (quantized.rank() != 2 || quantized.dim(0) != cfg_.sequence_length() || quantized.dim(1) != cfg_.code_dim) {
      throw ValidationError("decode: expected " + std::to_string(cfg_.sequence_length()) + "x" +
                            std::to_string(cfg_.code_dim) + " codes, got " + shape_str(quantized.shape()));
    }
    const std::size_t lt = cfg_.temporal_tokens();
    auto codes = add(dec_lift_(quantized), dec_pos_code_);
    auto queries = add(dec_query_, dec_pos_query_);
    auto h = concat(std::vector<Tensor<T>>{queries, codes}, 0);
    for (const auto& b : dec_blocks_) h = b(h);
    return dec_head_(dec_ln_out_(slice(h, 0, 0, lt)));
  }

  VideoClip patches_to_clip(const Tensor<T>& patches) const {
    std::vector<float> px(patches.data().begin(), patches.data().end());
    for (auto& v : px) v = std::clamp(v, -1.0f, 1.0f);
    return unpatchify_video(px, cfg_.frames, cfg_.height, cfg_.width, cfg_.temporal_patch, cfg_.spatial_patch);
  }

  VideoClip decode(const Tensor<T>& quantized) const {
    NoGradGuard guard;
    return patches_to_clip(decode_patches(quantized));
  }

  TokenSequence tokenize(const VideoClip& clip) const {
    NoGradGuard guard;
    auto q = quantize(encode(clip));
    return TokenSequence(cfg_.appearance_tokens, cfg_.motion_tokens, q.indices);
  }

  Tensor<T> lookup(const TokenSequence& seq) const {
    if (seq.appearance_length() != cfg_.appearance_tokens || seq.motion_length() != cfg_.motion_tokens) {
      throw ValidationError("token sequence layout " + std::to_string(seq.appearance_length()) + "+" +
                            std::to_string(seq.motion_length()) + " does not match tokenizer " +
                            std::to_string(cfg_.appearance_tokens) + "+" + std::to_string(cfg_.motion_tokens));
    }
    for (auto i : seq.indices()) {
      if (i >= cfg_.codebook_size) {
        throw ValidationError("token id " + std::to_string(i) + " out of range for codebook of " +
                              std::to_string(cfg_.codebook_size));
      }
    }
    return embedding(codebook_, std::span<const std::size_t>(seq.indices()));
  }

  VideoClip detokenize(const TokenSequence& seq) const {
    NoGradGuard guard;
    return patches_to_clip(decode_patches(lookup(seq)));
  }

  VideoClip reconstruct(const VideoClip& clip) const {
    NoGradGuard guard;
    return patches_to_clip(decode_patches(quantize(encode(clip)).quantized));
  }

  /// Re-seeds every entry that saw no hits this epoch with a random row of
  /// `recent_z` (projected encoder outputs), then starts a new epoch.
  std::size_t reinit_dead_codes(const std::vector<T>& recent_z, std::mt19937_64& rng) {
    const std::size_t dz = cfg_.code_dim;
    const std::size_t rows = recent_z.size() / dz;
    std::size_t replaced = 0;
    auto book = codebook_.mutable_data();
    if (rows > 0) {
      std::uniform_int_distribution<std::size_t> pick(0, rows - 1);
      for (std::size_t j = 0; j < cfg_.codebook_size; ++j) {
        if (usage_.epoch[j] != 0) continue;
        const std::size_t r = pick(rng);
        std::copy_n(recent_z.begin() + r * dz, dz, book.begin() + j * dz);
        ++replaced;
      }
    }
    std::fill(usage_.epoch.begin(), usage_.epoch.end(), 0);
    return replaced;
  }

 private:
  std::pair<Tensor<T>, Tensor<T>> run_stream(const Tensor<T>& patches, const Linear<T>& embed, const Tensor<T>& pos_patch,
                                             const Tensor<T>& query, const Tensor<T>& pos_query) const {
    const std::size_t nq = query.dim(0), np = pos_patch.dim(0);
    const auto states = stream_states(patches, embed, pos_patch, query, pos_query);
    return {slice(states.back(), 0, 0, nq), slice(states[cfg_.align_depth], 0, nq, nq + np)};
  }

  std::vector<Tensor<T>> stream_states(const Tensor<T>& patches, const Linear<T>& embed, const Tensor<T>& pos_patch,
                                       const Tensor<T>& query, const Tensor<T>& pos_query) const {
    const std::size_t np = pos_patch.dim(0);
    if (patches.rank() != 2 || patches.dim(0) != np || patches.dim(1) != embed.weight.dim(0)) {
      throw ValidationError("encoder: expected " + std::to_string(np) + "x" + std::to_string(embed.weight.dim(0)) +
                            " patches, got " + shape_str(patches.shape()));
    }
    std::vector<Tensor<T>> states{
        concat(std::vector<Tensor<T>>{add(query, pos_query), add(embed(patches), pos_patch)}, 0)};
    for (const auto& b : enc_blocks_) states.push_back(b(states.back()));
    return states;
  }

  void build() {
    const std::size_t d = cfg_.hidden, heads = cfg_.heads;
    const std::size_t ls = cfg_.spatial_tokens(), lt = cfg_.temporal_tokens(), l = cfg_.sequence_length();
    auto& ps = params_;
    enc_patch_s_ = make_linear(ps, "encoder.patch_s", cfg_.frame_patch_dim(), d, seed_);
    enc_patch_t_ = make_linear(ps, "encoder.patch_t", cfg_.tubelet_dim(), d, seed_);
    enc_query_a_ = make_embedding(ps, "encoder.query_a", cfg_.appearance_tokens, d, seed_);
    enc_query_m_ = make_embedding(ps, "encoder.query_m", cfg_.motion_tokens, d, seed_);
    enc_pos_query_a_ = make_embedding(ps, "encoder.pos_query_a", cfg_.appearance_tokens, d, seed_);
    enc_pos_query_m_ = make_embedding(ps, "encoder.pos_query_m", cfg_.motion_tokens, d, seed_);
    enc_pos_patch_s_ = make_embedding(ps, "encoder.pos_patch_s", ls, d, seed_);
    enc_pos_patch_t_ = make_embedding(ps, "encoder.pos_patch_t", lt, d, seed_);
    for (std::size_t i = 0; i < cfg_.layers; ++i)
      enc_blocks_.push_back(make_block(ps, "encoder.block" + std::to_string(i), d, heads, cfg_.layers, seed_));

    quant_ln_ = make_layer_norm(ps, "quantizer.ln", d);
    quant_proj_ = make_linear(ps, "quantizer.proj", d, cfg_.code_dim, seed_, 1.0 / std::sqrt(static_cast<double>(d)));
    codebook_ = ps.add("quantizer.codebook", {cfg_.codebook_size, cfg_.code_dim},
                       uniform_codebook(cfg_.codebook_size * cfg_.code_dim));

    dec_lift_ = make_linear(ps, "decoder.lift", cfg_.code_dim, d, seed_, 1.0 / std::sqrt(static_cast<double>(cfg_.code_dim)));
    dec_query_ = make_embedding(ps, "decoder.query", lt, d, seed_);
    dec_pos_query_ = make_embedding(ps, "decoder.pos_query", lt, d, seed_);
    dec_pos_code_ = make_embedding(ps, "decoder.pos_code", l, d, seed_);
    for (std::size_t i = 0; i < cfg_.layers; ++i)
      dec_blocks_.push_back(make_block(ps, "decoder.block" + std::to_string(i), d, heads, cfg_.layers, seed_));
    dec_ln_out_ = make_layer_norm(ps, "decoder.ln_out", d);
    dec_head_ = make_linear(ps, "decoder.head", d, cfg_.tubelet_dim(), seed_);
  }

  std::vector<T> uniform_codebook(std::size_t n) const {
    auto rng = named_rng(seed_, "quantizer.codebook");
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(u(rng));
    return v;
  }

  TokenizerConfig cfg_;
  std::uint64_t seed_;
  ParameterSet<T> params_;
  CodebookUsage usage_;

  Linear<T> enc_patch_s_, enc_patch_t_;
  Tensor<T> enc_query_a_, enc_query_m_, enc_pos_query_a_, enc_pos_query_m_, enc_pos_patch_s_, enc_pos_patch_t_;
  std::vector<TransformerBlock<T>> enc_blocks_;
  LayerNorm<T> quant_ln_;
  Linear<T> quant_proj_;
  Tensor<T> codebook_;
  Linear<T> dec_lift_;
  Tensor<T> dec_query_, dec_pos_query_, dec_pos_code_;
  std::vector<TransformerBlock<T>> dec_blocks_;
  LayerNorm<T> dec_ln_out_;
  Linear<T> dec_head_;
};

}  // namespace dera

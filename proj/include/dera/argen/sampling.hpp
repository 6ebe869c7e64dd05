#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "dera/argen/ar_model.hpp"

namespace dera {

class SamplingError : public NumericError {
 public:
  explicit SamplingError(const std::string& detail) : NumericError("sample", detail) {}
};

/// uncond + s * (cond - uncond); s == 1 and s == 0 return an operand exactly.
template <class T>
std::vector<T> cfg_combine(const std::vector<T>& cond, const std::vector<T>& uncond, double s) {
  if (cond.size() != uncond.size()) {
    throw ValidationError("cfg_combine: " + std::to_string(cond.size()) + " vs " + std::to_string(uncond.size()) +
                          " logits");
  }
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  std::vector<T> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + static_cast<T>(s) * (cond[i] - uncond[i]);
  return out;
}

struct SampleSettings {
  double cfg_scale = 1.2;
  double temperature = 1.0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
};

/// Picks the next code id from combined logits: top-k over the whole
/// vocabulary, special ids removed, then argmax (temperature 0) or a draw
/// from the tempered softmax.
template <class T>
std::size_t pick_token(const std::vector<T>& logits, std::size_t n_codes, const SampleSettings& s,
                       std::mt19937_64& rng) {
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  if (s.top_k > 0 && s.top_k < order.size()) order.resize(s.top_k);
  std::vector<std::size_t> keep;
  for (auto id : order)
    if (id < n_codes) keep.push_back(id);
  if (keep.empty()) throw SamplingError("no code token survives top-k filtering");
  if (s.temperature == 0.0) return keep.front();

  double mx = -std::numeric_limits<double>::infinity();
  for (auto id : keep) mx = std::max(mx, static_cast<double>(logits[id]));
  std::vector<double> w(keep.size());
  double z = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) z += (w[i] = std::exp((logits[keep[i]] - mx) / s.temperature));
  if (!(z > 0) || !std::isfinite(z)) throw SamplingError("degenerate sampling distribution");
  const double u = std::uniform_real_distribution<double>(0.0, z)(rng);
  double acc = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    acc += w[i];
    if (u < acc) return keep[i];
  }
  return keep.back();
}

/// Combined next-token logits for a conditional and an unconditional prefix.
template <class T>
std::vector<T> guided_logits(const ARModel<T>& model, const std::vector<std::size_t>& cond_prefix,
                             const std::vector<std::size_t>& uncond_prefix, double cfg_scale) {
  NoGradGuard ng;
  const std::size_t v = model.config().vocab();
  auto last_row = [&](const std::vector<std::size_t>& ids) {
    const auto logits = model.forward(ids);
    const auto d = logits.data();
    return std::vector<T>(d.end() - static_cast<std::ptrdiff_t>(v), d.end());
  };
  auto cond = last_row(cond_prefix);
  if (cfg_scale == 1.0) return cond;
  return cfg_combine(cond, last_row(uncond_prefix), cfg_scale);
}

/// Draws L code tokens after `condition` (one [CLS] id, or context ++ [SEP]).
/// The unconditional branch replaces the condition ids with [UNCOND].
template <class T>
std::vector<std::size_t> sample_codes(const ARModel<T>& model, const std::vector<std::size_t>& condition,
                                      std::size_t uncond_len, const SampleSettings& s) {
  const auto& cfg = model.config();
  if (!(s.temperature >= 0) || !(s.cfg_scale >= 0)) throw ValidationError("temperature and cfg scale must be >= 0");
  std::mt19937_64 rng(s.seed);
  std::vector<std::size_t> cond = condition, uncond = condition;
  for (std::size_t i = 0; i < uncond_len; ++i) uncond[i] = cfg.uncond_id();
  std::vector<std::size_t> out;
  out.reserve(cfg.sequence_length);
  for (std::size_t step = 0; step < cfg.sequence_length; ++step) {
    const auto logits = guided_logits(model, cond, uncond, s.cfg_scale);
    const auto id = pick_token(logits, cfg.codebook_size, s, rng);
    out.push_back(id);
    cond.push_back(id);
    uncond.push_back(id);
  }
  return out;
}

template <class T>
std::vector<std::size_t> sample_class(const ARModel<T>& model, std::size_t cls, const SampleSettings& s) {
  const auto& cfg = model.config();
  if (cls >= cfg.n_classes) throw ValidationError("class " + std::to_string(cls) + " out of range");
  return sample_codes(model, {cfg.cls_id(cls)}, 1, s);
}

template <class T>
std::vector<std::size_t> sample_prediction(const ARModel<T>& model, const std::vector<std::size_t>& context,
                                           const SampleSettings& s) {
  const auto& cfg = model.config();
  for (auto id : context)
    if (!cfg.is_code(id)) throw ValidationError("context id " + std::to_string(id) + " is not a code id");
  std::vector<std::size_t> cond = context;
  cond.push_back(cfg.sep_id());
  return sample_codes(model, cond, context.size(), s);
}

}  // namespace dera

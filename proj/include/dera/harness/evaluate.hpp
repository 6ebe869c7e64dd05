#pragma once

#include <filesystem>

#include "dera/harness/metrics.hpp"
#include "dera/objective/objective.hpp"
#include "dera/harness/run_config.hpp"
#include "dera/tokenizer/checkpoint.hpp"
#include "dera/tokenizer/model.hpp"

namespace dera {

struct EvalReport {
  std::vector<double> psnr;  // per clip
  double mean_psnr = 0;
  double mean_l1 = 0;
  CodeStats codes;
};

template <class T>
EvalReport evaluate(const DeraTokenizer<T>& model, const std::vector<VideoClip>& clips) {
  if (clips.empty()) throw ValidationError("evaluate: empty dataset");
  EvalReport r;
  std::vector<std::size_t> all_codes;
  for (const auto& clip : clips) {
    const auto seq = model.tokenize(clip);
    all_codes.insert(all_codes.end(), seq.indices().begin(), seq.indices().end());
    const auto rec = model.detokenize(seq);
    r.psnr.push_back(psnr(clip, rec));
    r.mean_psnr += r.psnr.back();
    r.mean_l1 += recon_l1(clip, rec);
  }
  r.mean_psnr /= static_cast<double>(clips.size());
  r.mean_l1 /= static_cast<double>(clips.size());
  r.codes = code_stats(all_codes, model.config().codebook_size);
  return r;
}

/// Run config embedded in a checkpoint header; training state lives beside it.
inline RunConfig checkpoint_run_config(const Checkpoint& ck) {
  Json j;
  try {
    j = Json::parse(ck.config_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint config is not JSON: ") + e.what(), 0);
  }
  if (!j.contains("config")) throw ValidationError("checkpoint has no run config");
  RunConfig c;
  from_json(j.at("config"), c);
  return c;
}

inline Json checkpoint_state(const Checkpoint& ck) {
  const auto j = Json::parse(ck.config_json);
  return j.contains("state") ? j.at("state") : Json::object();
}

/// Tokenizer weights from a training checkpoint; optimizer state and
/// alignment heads are ignored.
inline DeraTokenizer<float> load_tokenizer(const std::filesystem::path& path) {
  const auto ck = load_checkpoint(path);
  const auto cfg = checkpoint_run_config(ck);
  DeraTokenizer<float> model(cfg.tokenizer, cfg.seed);
  restore_parameters(ck, model.params());
  return model;
}

}  // namespace dera

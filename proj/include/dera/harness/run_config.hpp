#pragma once

// Run configuration with a canonical JSON form: fixed key order, every key
// written, unknown keys rejected on load.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dera/argen/ar_model.hpp"
#include "dera/objective/objective.hpp"
#include "dera/tokenizer/config.hpp"

namespace dera {

using Json = nlohmann::ordered_json;

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t warmup_steps = 100;
  double min_lr_ratio = 0.1;  // floor of the cosine decay, relative to lr
  double grad_clip = 1.0;     // 0 disables clipping

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("optimizer: " + m); };
    if (!(lr > 0)) fail("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(eps > 0)) fail("eps must be positive");
    if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) fail("min_lr_ratio must lie in [0, 1]");
    if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
  }
};

struct RunConfig {
  TokenizerConfig tokenizer;
  ARConfig ar;
  LossWeights weights;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t steps = 5000;
  std::size_t epochs = 0;  // when > 0, overrides steps: epochs * ceil(clips / batch)
  std::size_t batch_size = 8;
  std::size_t log_every = 10;
  std::size_t eval_every = 500;  // 0 disables periodic eval
  std::size_t checkpoint_every = 500;
  std::size_t n_clips = 16;      // procedural set size when no dataset dir is given
  std::size_t n_eval_clips = 4;  // held-out procedural clips
  std::string dataset_dir;
  std::string teacher = "random:1234:32";
  bool alignment = true;  // false: no teacher, heads or alignment terms at all
  bool sacp = true;
  std::size_t align_motion_start_epoch = 0;
  bool dead_code_reinit = true;
  std::size_t ar_steps = 2000;
  std::size_t ar_batch_size = 8;

  void validate() const {
    tokenizer.validate();
    ar.validate();
    weights.validate();
    optimizer.validate();
    if (batch_size == 0 || ar_batch_size == 0) throw ValidationError("batch sizes must be positive");
    if (steps == 0 && epochs == 0) throw ValidationError("steps or epochs must be positive");
    if (log_every == 0) throw ValidationError("log_every must be positive");
    if (dataset_dir.empty() && n_clips == 0) throw ValidationError("n_clips must be positive");
  }
};

namespace detail {

inline const char* mode_name(GenMode m) { return m == GenMode::kClass ? "class" : "prediction"; }

inline GenMode parse_mode(const std::string& s) {
  if (s == "class") return GenMode::kClass;
  if (s == "prediction") return GenMode::kPrediction;
  throw ValidationError("unknown ar mode '" + s + "' (expected class or prediction)");
}

/// Field-by-field reader; keys never claimed by field() or sub() are rejected
/// when the reader goes out of scope.
class JsonReader {
 public:
  JsonReader(const Json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ValidationError(where_ + ": expected a JSON object");
  }
  ~JsonReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.count(k)) throw ValidationError(where_ + ": unknown key '" + k + "'");
    }
  }

  template <class V>
  void field(const char* key, V& v) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      v = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(where_ + "." + key + ": wrong type");
    }
  }
  const Json* sub(const char* key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

 private:
  const Json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const TokenizerConfig& c) {
  Json j;
  j["frames"] = c.frames;
  j["height"] = c.height;
  j["width"] = c.width;
  j["temporal_patch"] = c.temporal_patch;
  j["spatial_patch"] = c.spatial_patch;
  j["appearance_tokens"] = c.appearance_tokens;
  j["motion_tokens"] = c.motion_tokens;
  j["hidden"] = c.hidden;
  j["code_dim"] = c.code_dim;
  j["codebook_size"] = c.codebook_size;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["align_depth"] = c.align_depth;
  return j;
}

inline void from_json(const Json& j, TokenizerConfig& c) {
  detail::JsonReader r(j, "tokenizer");
  r.field("frames", c.frames);
  r.field("height", c.height);
  r.field("width", c.width);
  r.field("temporal_patch", c.temporal_patch);
  r.field("spatial_patch", c.spatial_patch);
  r.field("appearance_tokens", c.appearance_tokens);
  r.field("motion_tokens", c.motion_tokens);
  r.field("hidden", c.hidden);
  r.field("code_dim", c.code_dim);
  r.field("codebook_size", c.codebook_size);
  r.field("layers", c.layers);
  r.field("heads", c.heads);
  r.field("align_depth", c.align_depth);
}

inline Json to_json(const ARConfig& c) {
  Json j;
  j["codebook_size"] = c.codebook_size;
  j["sequence_length"] = c.sequence_length;
  j["n_classes"] = c.n_classes;
  j["width"] = c.width;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["context_length"] = c.context_length;
  j["mode"] = detail::mode_name(c.mode);
  j["cfg_scale"] = c.cfg_scale;
  j["temperature"] = c.temperature;
  j["top_k"] = c.top_k;
  j["cond_dropout"] = c.cond_dropout;
  return j;
}

inline void from_json(const Json& j, ARConfig& c) {
  detail::JsonReader r(j, "ar");
  r.field("codebook_size", c.codebook_size);
  r.field("sequence_length", c.sequence_length);
  r.field("n_classes", c.n_classes);
  r.field("width", c.width);
  r.field("layers", c.layers);
  r.field("heads", c.heads);
  r.field("context_length", c.context_length);
  std::string mode = detail::mode_name(c.mode);
  r.field("mode", mode);
  c.mode = detail::parse_mode(mode);
  r.field("cfg_scale", c.cfg_scale);
  r.field("temperature", c.temperature);
  r.field("top_k", c.top_k);
  r.field("cond_dropout", c.cond_dropout);
}

inline Json to_json(const LossWeights& w) {
  Json j;
  j["align_a"] = w.align_a;
  j["align_m"] = w.align_m;
  j["beta"] = w.beta;
  j["recon"] = w.recon;
  Json aux = Json::object();
  for (const auto& [k, v] : w.aux) aux[k] = v;  // std::map: sorted keys
  j["aux"] = aux;
  return j;
}

inline void from_json(const Json& j, LossWeights& w) {
  detail::JsonReader r(j, "weights");
  r.field("align_a", w.align_a);
  r.field("align_m", w.align_m);
  r.field("beta", w.beta);
  r.field("recon", w.recon);
  r.field("aux", w.aux);
}

inline Json to_json(const OptimizerConfig& o) {
  Json j;
  j["lr"] = o.lr;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["eps"] = o.eps;
  j["warmup_steps"] = o.warmup_steps;
  j["min_lr_ratio"] = o.min_lr_ratio;
  j["grad_clip"] = o.grad_clip;
  return j;
}

inline void from_json(const Json& j, OptimizerConfig& o) {
  detail::JsonReader r(j, "optimizer");
  r.field("lr", o.lr);
  r.field("beta1", o.beta1);
  r.field("beta2", o.beta2);
  r.field("eps", o.eps);
  r.field("warmup_steps", o.warmup_steps);
  r.field("min_lr_ratio", o.min_lr_ratio);
  r.field("grad_clip", o.grad_clip);
}

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["log_every"] = c.log_every;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["n_clips"] = c.n_clips;
  j["n_eval_clips"] = c.n_eval_clips;
  j["dataset_dir"] = c.dataset_dir;
  j["teacher"] = c.teacher;
  j["alignment"] = c.alignment;
  j["sacp"] = c.sacp;
  j["align_motion_start_epoch"] = c.align_motion_start_epoch;
  j["dead_code_reinit"] = c.dead_code_reinit;
  j["ar_steps"] = c.ar_steps;
  j["ar_batch_size"] = c.ar_batch_size;
  j["tokenizer"] = to_json(c.tokenizer);
  j["ar"] = to_json(c.ar);
  j["weights"] = to_json(c.weights);
  j["optimizer"] = to_json(c.optimizer);
  return j;
}

inline void from_json(const Json& j, RunConfig& c) {
  detail::JsonReader r(j, "config");
  r.field("seed", c.seed);
  r.field("steps", c.steps);
  r.field("epochs", c.epochs);
  r.field("batch_size", c.batch_size);
  r.field("log_every", c.log_every);
  r.field("eval_every", c.eval_every);
  r.field("checkpoint_every", c.checkpoint_every);
  r.field("n_clips", c.n_clips);
  r.field("n_eval_clips", c.n_eval_clips);
  r.field("dataset_dir", c.dataset_dir);
  r.field("teacher", c.teacher);
  r.field("alignment", c.alignment);
  r.field("sacp", c.sacp);
  r.field("align_motion_start_epoch", c.align_motion_start_epoch);
  r.field("dead_code_reinit", c.dead_code_reinit);
  r.field("ar_steps", c.ar_steps);
  r.field("ar_batch_size", c.ar_batch_size);
  if (const auto* s = r.sub("tokenizer")) from_json(*s, c.tokenizer);
  if (const auto* s = r.sub("ar")) from_json(*s, c.ar);
  if (const auto* s = r.sub("weights")) from_json(*s, c.weights);
  if (const auto* s = r.sub("optimizer")) from_json(*s, c.optimizer);
}

/// Two-space indented canonical document with a trailing newline.
inline std::string dump_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  from_json(j, c);
  c.validate();
  return c;
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write config '" + path.string() + "'");
  out << dump_config(c);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dera

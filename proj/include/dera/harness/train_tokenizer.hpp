#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>

#include "dera/alignment/align_loss.hpp"
#include "dera/alignment/teacher.hpp"
#include "dera/harness/data.hpp"
#include "dera/harness/evaluate.hpp"
#include "dera/harness/optimizer.hpp"
#include "dera/sacp/sacp.hpp"

namespace dera {

template <class T>
struct ClipInputs {
  Tensor<T> frame_patches, tubelets;
  const Tensor<T>* image_target = nullptr;  // null: no appearance alignment
  const Tensor<T>* video_target = nullptr;  // null: no motion alignment
};

template <class T>
struct StepLoss {
  TotalLoss<T> total;
  LossParts<T> parts;
  std::optional<SacpOutcome> sacp;
  std::vector<std::size_t> codes;  // quantizer indices of the whole batch
  std::vector<T> z;                // projected encoder rows of the whole batch
};

template <class T>
Tensor<T> batch_mean(const std::vector<Tensor<T>>& xs) {
  Tensor<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return xs.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(xs.size()));
}

/// Batch-mean training objective. Alignment weights of streams without
/// targets are treated as zero; conflict projection runs when requested and
/// both alignment terms are present.
template <class T>
StepLoss<T> tokenizer_loss(const DeraTokenizer<T>& model, const ProjectionHead<T>* head_a,
                           const ProjectionHead<T>* head_m, const std::vector<ClipInputs<T>>& batch, LossWeights w,
                           bool sacp) {
  if (batch.empty()) throw ValidationError("tokenizer_loss: empty batch");
  StepLoss<T> out;
  std::vector<Tensor<T>> rec, vq, al_a, al_m;
  for (const auto& in : batch) {
    const auto enc = model.encode_patches(in.frame_patches, in.tubelets);
    const auto q = model.quantize(enc);
    rec.push_back(recon_l1(in.tubelets, model.decode_patches(q.quantized)));
    vq.push_back(vq_objective(q.z, q.codes, static_cast<T>(w.beta)));
    if (head_a && in.image_target) al_a.push_back(align_loss(enc.appearance_at_depth, *in.image_target, *head_a));
    if (head_m && in.video_target) al_m.push_back(align_loss(enc.motion_at_depth, *in.video_target, *head_m));
    out.codes.insert(out.codes.end(), q.indices.begin(), q.indices.end());
    out.z.insert(out.z.end(), q.z.data().begin(), q.z.data().end());
  }
  auto& parts = out.parts;
  parts.recon = batch_mean(rec);
  parts.vq = batch_mean(vq);
  if (al_a.size() == batch.size()) parts.align_a = batch_mean(al_a);
  else w.align_a = 0;
  if (al_m.size() == batch.size()) parts.align_m = batch_mean(al_m);
  else w.align_m = 0;
  const bool project = sacp && parts.align_a.defined() && parts.align_m.defined();
  if (project) {
    const auto r = sacp_reformulate(parts.align_a, parts.align_m, model.params(), model.encoder_param_names());
    parts.align_a_re = r.loss_a;
    parts.align_m_re = r.loss_m;
    out.sacp = r.outcome;
  }
  out.total = total_loss(parts, w, project);
  return out;
}

struct StepRecord {
  std::size_t step = 0;  // 1-based count of completed updates
  MetricsRow row;
  std::size_t dead_codes_replaced = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;        // empty: nothing is written
  std::string metrics_name = "metrics.csv";
  std::string checkpoint_name = "tokenizer.dckp";
  std::size_t stop_after = 0;           // 0: run to the configured end
  bool quiet = true;
  /// Called before every update with the 0-based step; tests use it to
  /// corrupt parameters.
  std::function<void(std::size_t, ParameterSet<float>&)> before_step;
};

struct TrainSummary {
  std::size_t steps_done = 0;
  std::vector<double> recon_history;  // per completed step in this session
  std::vector<double> align_a_history, align_m_history;
  std::vector<MetricsRow> rows;
  double seconds = 0;
};

/// One tokenizer training run. Parameters of the alignment heads live in the
/// tokenizer's parameter set under "align.", so the optimizer and checkpoints
/// cover them.
class TokenizerTrainer {
 public:
  using T = float;

  TokenizerTrainer(RunConfig cfg, Dataset data)
      : cfg_(std::move(cfg)), data_(std::move(data)), model_(cfg_.tokenizer, cfg_.seed), adam_(cfg_.optimizer) {
    cfg_.validate();
    if (data_.train.empty()) throw ValidationError("train_tokenizer: empty dataset");
    for (const auto& clip : data_.train) {
      model_.check_clip(clip);
      frame_patches_.push_back(to_tensor<T>(patchify_frame(clip, cfg_.tokenizer.spatial_patch)));
      tubelets_.push_back(to_tensor<T>(patchify_video(clip, cfg_.tokenizer.temporal_patch, cfg_.tokenizer.spatial_patch)));
    }
    if (cfg_.alignment) {
      teacher_ = make_teacher(cfg_.teacher);
      const std::size_t dt = teacher_->dim();
      head_a_ = make_projection_head(model_.params(), "align.head_a", cfg_.tokenizer.hidden, dt, cfg_.seed);
      head_m_ = make_projection_head(model_.params(), "align.head_m", cfg_.tokenizer.hidden, dt, cfg_.seed);
      for (const auto& clip : data_.train) {
        const auto f = teacher_->features(clip, cfg_.tokenizer);
        image_targets_.push_back(to_tensor<T>(f.image));
        video_targets_.push_back(to_tensor<T>(f.video));
      }
    }
  }

  const RunConfig& config() const noexcept { return cfg_; }
  DeraTokenizer<T>& model() noexcept { return model_; }
  std::size_t step() const noexcept { return step_; }
  std::size_t steps_per_epoch() const { return (data_.train.size() + cfg_.batch_size - 1) / cfg_.batch_size; }
  std::size_t total_steps() const { return cfg_.epochs > 0 ? cfg_.epochs * steps_per_epoch() : cfg_.steps; }

  /// Clip indices of the batch for 0-based step `s`: a seeded permutation per
  /// epoch, cut into consecutive batches.
  std::vector<std::size_t> batch_indices(std::size_t s) const {
    const std::size_t n = data_.train.size(), spe = steps_per_epoch();
    const std::size_t epoch = s / spe, pos = s % spe;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    auto rng = step_rng(cfg_.seed, "epoch", epoch);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t lo = pos * cfg_.batch_size, hi = std::min(n, lo + cfg_.batch_size);
    return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
  }

  /// One optimizer update. Throws NumericError before touching parameters
  /// when the loss or any gradient is non-finite.
  StepRecord train_step() {
    const std::size_t s = step_;
    const std::size_t epoch = s / steps_per_epoch();
    const auto idx = batch_indices(s);
    const bool motion_on = epoch >= cfg_.align_motion_start_epoch;

    std::vector<ClipInputs<T>> batch;
    for (auto i : idx) {
      batch.push_back({frame_patches_[i], tubelets_[i], cfg_.alignment ? &image_targets_[i] : nullptr,
                       cfg_.alignment && motion_on ? &video_targets_[i] : nullptr});
    }
    auto step_loss = tokenizer_loss(model_, cfg_.alignment ? &head_a_ : nullptr, cfg_.alignment ? &head_m_ : nullptr,
                                    batch, cfg_.weights, cfg_.sacp);
    const auto& parts = step_loss.parts;
    const auto& total = step_loss.total;
    MetricsRow row;
    if (step_loss.sacp) {
      row.s = step_loss.sacp->s;
      row.conflicted = step_loss.sacp->conflicted;
      row.norm_a = step_loss.sacp->norm_a;
      row.norm_m = step_loss.sacp->norm_m;
    }
    const double loss = total.value();
    if (!std::isfinite(loss)) throw NumericError("train_tokenizer", "non-finite loss at step " + std::to_string(s + 1));

    const auto grads = backward(total.total, model_.params());
    adam_.step(model_.params(), grads, scheduled_lr(cfg_.optimizer, s, total_steps()));
    model_.usage().record(step_loss.codes);

    StepRecord out;
    out.step = ++step_;
    if (cfg_.dead_code_reinit && step_ % steps_per_epoch() == 0) {
      auto rng = step_rng(cfg_.seed, "dead-codes", epoch);
      out.dead_codes_replaced = model_.reinit_dead_codes(step_loss.z, rng);
    }

    row.step = step_;
    row.loss_total = loss;
    row.loss_rec = parts.recon.item();
    row.loss_vq = parts.vq.item();
    if (parts.align_a.defined()) row.loss_align_a = parts.align_a.item();
    if (parts.align_m.defined()) row.loss_align_m = parts.align_m.item();
    const auto stats = code_stats(step_loss.codes, cfg_.tokenizer.codebook_size);
    row.usage = stats.usage;
    row.perplexity = stats.perplexity;
    out.row = row;
    return out;
  }

  EvalReport evaluate_split(bool held_out) const {
    return evaluate(model_, held_out && !data_.eval.empty() ? data_.eval : data_.train);
  }

  Checkpoint make_checkpoint() const {
    Checkpoint ck;
    Json header;
    header["config"] = to_json(cfg_);
    Json state;
    state["step"] = step_;
    state["adam_step"] = adam_.step_count();
    state["usage_epoch"] = model_.usage().epoch;
    state["usage_total"] = model_.usage().total;
    header["state"] = state;
    ck.config_json = header.dump();
    append_parameters(ck, model_.params());
    adam_.save(ck);
    return ck;
  }

  /// Restores parameters, optimizer moments, step and usage counters. The
  /// checkpoint's run config must match this trainer's.
  void restore(const Checkpoint& ck) {
    if (dump_config(checkpoint_run_config(ck)) != dump_config(cfg_)) {
      throw ValidationError("checkpoint was written with a different run config");
    }
    const auto state = checkpoint_state(ck);
    restore_parameters(ck, model_.params());
    adam_.load(ck, state.at("adam_step").get<std::size_t>());
    step_ = state.at("step").get<std::size_t>();
    model_.usage().epoch = state.at("usage_epoch").get<std::vector<std::uint64_t>>();
    model_.usage().total = state.at("usage_total").get<std::vector<std::uint64_t>>();
  }

  /// Runs to the end (or `stop_after` updates), logging every `log_every`
  /// steps and checkpointing every `checkpoint_every` steps and at the end.
  /// On a numeric failure the last written checkpoint is left in place.
  TrainSummary run(const TrainOptions& opt, bool resume = false) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool write = !opt.out_dir.empty();
    const auto ck_path = opt.out_dir / opt.checkpoint_name;
    if (write) std::filesystem::create_directories(opt.out_dir);
    if (resume) restore(load_checkpoint(ck_path));
    MetricsLog log;
    if (write) log = MetricsLog(opt.out_dir / opt.metrics_name, resume, step_);

    TrainSummary sum;
    const std::size_t end = opt.stop_after ? std::min(total_steps(), step_ + opt.stop_after) : total_steps();
    while (step_ < end) {
      if (opt.before_step) opt.before_step(step_, model_.params());
      auto rec = train_step();
      sum.recon_history.push_back(rec.row.loss_rec);
      if (rec.row.loss_align_a) sum.align_a_history.push_back(*rec.row.loss_align_a);
      if (rec.row.loss_align_m) sum.align_m_history.push_back(*rec.row.loss_align_m);
      const bool eval_now = cfg_.eval_every > 0 && step_ % cfg_.eval_every == 0;
      if (eval_now) rec.row.psnr = evaluate_split(true).mean_psnr;
      if (step_ == 1 || step_ % cfg_.log_every == 0 || eval_now || step_ == end) {
        log.write(rec.row);
        sum.rows.push_back(rec.row);
        if (!opt.quiet) {
          std::fprintf(stderr, "step %zu  total %.5f  rec %.5f  vq %.5f%s\n", step_, rec.row.loss_total,
                       rec.row.loss_rec, rec.row.loss_vq, rec.row.psnr ? ("  psnr " + std::to_string(*rec.row.psnr)).c_str() : "");
        }
      }
      if (write && ((cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) || step_ == end)) {
        save_atomically(ck_path);
      }
      ++sum.steps_done;
    }
    sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return sum;
  }

 private:
  void save_atomically(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".tmp";
    save_checkpoint(tmp, make_checkpoint());
    std::filesystem::rename(tmp, path);
  }

  RunConfig cfg_;
  Dataset data_;
  DeraTokenizer<T> model_;
  Adam<T> adam_;
  std::unique_ptr<TeacherProvider> teacher_;
  ProjectionHead<T> head_a_, head_m_;
  std::vector<Tensor<T>> frame_patches_, tubelets_, image_targets_, video_targets_;
  std::size_t step_ = 0;
};

}  // namespace dera

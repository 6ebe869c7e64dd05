#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "dera/harness/model_gradcheck.hpp"
#include "dera/harness/runtime.hpp"
#include "dera/harness/swap_report.hpp"
#include "dera/harness/train_ar.hpp"
#include "dera/harness/train_tokenizer.hpp"

namespace dera {

namespace cli_detail {

namespace fs = std::filesystem;

inline RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

template <class V>
void override_with(V& field, const std::optional<V>& v) {
  if (v) field = *v;
}

/// Clips for commands that operate on an existing tokenizer: an explicit
/// directory, else the procedural set described by the checkpoint's config.
inline std::vector<VideoClip> clips_for(const RunConfig& ck_cfg, const std::string& dataset, bool held_out) {
  auto c = ck_cfg;
  if (!dataset.empty()) c.dataset_dir = dataset;
  auto d = load_dataset(c);
  if (held_out) {
    if (d.eval.empty()) throw ValidationError("dataset has no held-out split");
    return d.eval;
  }
  return d.train;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run config JSON")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "override the run seed");
}

inline RunConfig resolve(const Common& c) {
  auto cfg = config_or_default(c.config);
  override_with(cfg.seed, c.seed);
  return cfg;
}

inline GenMode parse_mode(const std::string& m) {
  if (m == "class") return GenMode::kClass;
  if (m == "prediction") return GenMode::kPrediction;
  throw ValidationError("mode must be 'class' or 'prediction'");
}

inline void write_curves(const fs::path& path, const TrainSummary& aligned, const TrainSummary& baseline) {
  std::ofstream csv(path, std::ios::binary | std::ios::trunc);
  csv << "step,rec_aligned,rec_baseline\n";
  const std::size_t n = std::min(aligned.recon_history.size(), baseline.recon_history.size());
  char line[96];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", i + 1, aligned.recon_history[i], baseline.recon_history[i]);
    csv << line;
  }
}

}  // namespace cli_detail

/// Entry point of the `dera` tool. Exit codes: 0 success, 1 invalid input
/// (bad flags, config, files), 2 numeric failure.
inline int run_cli(int argc, const char* const* argv) {
  using namespace cli_detail;
  CLI::App app{"DeRA video tokenizer toolkit", "dera"};
  app.require_subcommand(1);
  std::function<int()> action;

  // init-config
  std::string init_out;
  auto* init = app.add_subcommand("init-config", "write the default run config as JSON");
  init->add_option("--out", init_out, "output path (stdout when omitted)");
  init->callback([&] {
    action = [&] {
      if (init_out.empty()) std::cout << dump_config(RunConfig{});
      else save_config(init_out, RunConfig{});
      return 0;
    };
  });

  // gen-data
  Common gen_c;
  std::string gen_out;
  std::optional<std::size_t> gen_n, gen_eval;
  auto* gen = app.add_subcommand("gen-data", "render the procedural dataset to DVID files");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-clips", gen_n, "training clips");
  gen->add_option("--n-eval", gen_eval, "held-out clips");
  gen->callback([&] {
    action = [&] {
      auto cfg = resolve(gen_c);
      override_with(cfg.n_clips, gen_n);
      override_with(cfg.n_eval_clips, gen_eval);
      cfg.dataset_dir.clear();
      cfg.validate();
      const auto d = load_dataset(cfg);
      write_dataset(gen_out, d);
      std::cout << "wrote " << d.train.size() << " training and " << d.eval.size() << " held-out clips to " << gen_out
                << "\n";
      return 0;
    };
  });

  // train-tokenizer
  Common tt_c;
  std::string tt_out, tt_dataset;
  std::optional<std::size_t> tt_steps, tt_batch;
  bool tt_resume = false, tt_no_align = false, tt_no_sacp = false, tt_compare = false, tt_verbose = false;
  auto* tt = app.add_subcommand("train-tokenizer", "train the tokenizer");
  add_common(tt, tt_c);
  tt->add_option("--out", tt_out, "run directory")->required();
  tt->add_option("--dataset", tt_dataset, "DVID directory (procedural data when omitted)");
  tt->add_option("--steps", tt_steps, "override the step count");
  tt->add_option("--batch-size", tt_batch, "override the batch size");
  tt->add_flag("--resume", tt_resume, "continue from the run directory's checkpoint");
  tt->add_flag("--no-align", tt_no_align, "disable representation alignment");
  tt->add_flag("--no-sacp", tt_no_sacp, "disable conflict projection");
  tt->add_flag("--compare", tt_compare, "train with and without alignment and write convergence.csv");
  tt->add_flag("-v,--verbose", tt_verbose, "log progress to stderr");
  tt->callback([&] {
    action = [&] {
      auto cfg = resolve(tt_c);
      override_with(cfg.steps, tt_steps);
      override_with(cfg.batch_size, tt_batch);
      if (!tt_dataset.empty()) cfg.dataset_dir = tt_dataset;
      if (tt_no_align) cfg.alignment = false;
      if (tt_no_sacp) cfg.sacp = false;
      cfg.validate();
      if (!deterministic_mode() && tt_verbose) std::cerr << "note: kernels are single-threaded; runs stay bit-exact\n";
      const auto data = load_dataset(cfg);
      TrainOptions opt;
      opt.quiet = !tt_verbose;
      auto report = [](const char* tag, TokenizerTrainer& t, const TrainSummary& s, const fs::path& dir) {
        const auto ev = t.evaluate_split(false);
        const double rec = s.recon_history.empty() ? 0.0 : s.recon_history.back();
        std::printf("%s: %zu steps in %.1fs, final rec %.5f, train psnr %.2f dB, usage %.3f\n", tag, t.step(), s.seconds,
                    rec, ev.mean_psnr, ev.codes.usage);
        Json j{{"steps", t.step()},           {"seconds", s.seconds},        {"final_rec", rec},
               {"train_psnr", ev.mean_psnr}, {"usage", ev.codes.usage}, {"perplexity", ev.codes.perplexity}};
        std::ofstream(dir / "summary.json", std::ios::binary | std::ios::trunc) << j.dump(2) << "\n";
      };
      if (tt_compare) {
        if (tt_resume) throw ValidationError("--compare cannot resume");
        auto aligned_cfg = cfg, base_cfg = cfg;
        aligned_cfg.alignment = true;
        base_cfg.alignment = false;
        TokenizerTrainer aligned(aligned_cfg, data), baseline(base_cfg, data);
        opt.out_dir = fs::path(tt_out) / "aligned";
        const auto sa = aligned.run(opt);
        report("aligned", aligned, sa, opt.out_dir);
        opt.out_dir = fs::path(tt_out) / "baseline";
        const auto sb = baseline.run(opt);
        report("baseline", baseline, sb, opt.out_dir);
        write_curves(fs::path(tt_out) / "convergence.csv", sa, sb);
        return 0;
      }
      TokenizerTrainer trainer(cfg, data);
      opt.out_dir = tt_out;
      const auto s = trainer.run(opt, tt_resume);
      report("tokenizer", trainer, s, opt.out_dir);
      return 0;
    };
  });

  // train-ar
  Common ar_c;
  std::string ar_tok, ar_out, ar_dataset, ar_mode, ar_cache;
  std::optional<std::size_t> ar_steps;
  bool ar_verbose = false;
  auto* tar = app.add_subcommand("train-ar", "train the autoregressive generator on tokenizer codes");
  add_common(tar, ar_c);
  tar->add_option("--tokenizer", ar_tok, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
  tar->add_option("--out", ar_out, "run directory")->required();
  tar->add_option("--dataset", ar_dataset, "DVID directory");
  tar->add_option("--mode", ar_mode, "class or prediction");
  tar->add_option("--cache", ar_cache, "token cache directory (default <out>/cache)");
  tar->add_option("--steps", ar_steps, "override the AR step count");
  tar->add_flag("-v,--verbose", ar_verbose, "log progress to stderr");
  tar->callback([&] {
    action = [&] {
      // Without --config the tokenizer's own run config defines data and AR settings.
      auto cfg = ar_c.config.empty() ? checkpoint_run_config(load_checkpoint(ar_tok)) : load_config(ar_c.config);
      override_with(cfg.seed, ar_c.seed);
      override_with(cfg.ar_steps, ar_steps);
      if (!ar_mode.empty()) cfg.ar.mode = parse_mode(ar_mode);
      if (!ar_dataset.empty()) cfg.dataset_dir = ar_dataset;
      cfg.validate();
      const auto tok_cfg = checkpoint_run_config(load_checkpoint(ar_tok)).tokenizer;
      check_ar_compatible(cfg.ar, tok_cfg);
      const auto clips = load_dataset(cfg).train;
      const fs::path cache = ar_cache.empty() ? fs::path(ar_out) / "cache" : fs::path(ar_cache);
      fs::path used;
      bool hit = false;
      const auto seqs = cached_tokens(ar_tok, clips, cfg.ar.mode, cache, &used, &hit);
      std::cout << (hit ? "reused " : "wrote ") << used.string() << "\n";
      ArTrainer trainer(cfg, make_ar_examples(cfg.ar, seqs));
      ArTrainOptions opt;
      opt.out_dir = ar_out;
      opt.quiet = !ar_verbose;
      const auto s = trainer.run(opt);
      std::printf("ar: %zu steps in %.1fs, initial loss %.4f, final mean loss %.4f\n", trainer.step(), s.seconds,
                  s.initial_loss, trainer.mean_loss());
      return 0;
    };
  });

  // reconstruct
  std::string rc_tok, rc_in, rc_out, rc_frames;
  auto* rc = app.add_subcommand("reconstruct", "tokenize and decode one clip");
  rc->add_option("--tokenizer", rc_tok, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
  rc->add_option("--in", rc_in, "input DVID")->required()->check(CLI::ExistingFile);
  rc->add_option("--out", rc_out, "output DVID")->required();
  rc->add_option("--frames", rc_frames, "also dump PPM frames under this prefix");
  rc->callback([&] {
    action = [&] {
      const auto tok = load_tokenizer(rc_tok);
      const auto clip = load_clip(rc_in);
      tok.check_clip(clip);
      auto rec = tok.reconstruct(clip);
      rec.class_label = clip.class_label;
      save_clip(rc_out, rec);
      if (!rc_frames.empty()) dump_frames(rc_frames, rec);
      std::printf("psnr %.3f dB\n", psnr(clip, rec));
      return 0;
    };
  });

  // generate
  std::string g_ar, g_tok, g_out = "generated.toks", g_video, g_context;
  std::optional<std::size_t> g_class, g_top_k;
  std::optional<double> g_scale, g_temp;
  std::uint64_t g_seed = 0;
  std::size_t g_count = 1;
  auto* gen_cmd = app.add_subcommand("generate", "sample token sequences from an AR checkpoint");
  gen_cmd->add_option("--ar", g_ar, "AR checkpoint")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--tokenizer", g_tok, "tokenizer checkpoint (needed for --context and --video)")
      ->check(CLI::ExistingFile);
  auto* opt_class = gen_cmd->add_option("--class", g_class, "class label to condition on");
  auto* opt_ctx = gen_cmd->add_option("--context", g_context, "DVID clip whose first half conditions prediction")
                      ->check(CLI::ExistingFile);
  opt_class->excludes(opt_ctx);
  gen_cmd->add_option("--cfg-scale", g_scale, "guidance scale");
  gen_cmd->add_option("--temperature", g_temp, "sampling temperature (0: greedy)");
  gen_cmd->add_option("--top-k", g_top_k, "keep the k most likely tokens (0: all)");
  gen_cmd->add_option("--seed", g_seed, "sampling seed");
  gen_cmd->add_option("--count", g_count, "number of samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", g_out, "DERATOKS output");
  gen_cmd->add_option("--video", g_video, "decode samples to DVID files with this path prefix");
  gen_cmd->callback([&] {
    action = [&] {
      const auto model = load_ar_model(g_ar);
      const auto& ac = model.config();
      SampleSettings s{ac.cfg_scale, ac.temperature, ac.top_k, g_seed};
      if (g_scale) s.cfg_scale = *g_scale;
      if (g_temp) s.temperature = *g_temp;
      if (g_top_k) s.top_k = *g_top_k;
      std::optional<DeraTokenizer<float>> tok;
      if (!g_tok.empty()) {
        tok.emplace(load_tokenizer(g_tok));
        check_ar_compatible(ac, tok->config());
      }
      std::vector<std::size_t> context;
      if (ac.mode == GenMode::kClass) {
        if (!g_class) throw ValidationError("class-conditional model: pass --class");
      } else {
        if (g_context.empty()) throw ValidationError("prediction model: pass --context");
        if (!tok) throw ValidationError("--context needs --tokenizer");
        const auto clip = load_clip(g_context);
        tok->check_clip(clip);
        context = tok->tokenize(prediction_context_clip(clip)).indices();
      }
      std::vector<LabeledTokens> out;
      for (std::size_t i = 0; i < g_count; ++i) {
        auto si = s;
        si.seed = g_seed + i;
        LabeledTokens lt;
        if (ac.mode == GenMode::kClass) {
          lt.label = static_cast<std::uint32_t>(*g_class);
          lt.ids = sample_class(model, *g_class, si);
        } else {
          lt.ids = sample_prediction(model, context, si);
        }
        out.push_back(std::move(lt));
      }
      save_tokens(g_out, out);
      if (!g_video.empty()) {
        if (!tok) throw ValidationError("--video needs --tokenizer");
        const auto& tc = tok->config();
        for (std::size_t i = 0; i < out.size(); ++i) {
          auto clip = tok->detokenize(TokenSequence(tc.appearance_tokens, tc.motion_tokens, out[i].ids));
          if (out[i].label) clip.class_label = *out[i].label;
          save_clip(g_video + std::to_string(i) + ".dvid", clip);
        }
      }
      std::cout << "wrote " << out.size() << " sequence(s) to " << g_out << "\n";
      return 0;
    };
  });

  // swap
  std::string sw_tok, sw_dataset, sw_out;
  std::size_t sw_pairs = 8;
  bool sw_train = false;
  auto* sw = app.add_subcommand("swap", "exchange appearance/motion tokens between clip pairs");
  sw->add_option("--tokenizer", sw_tok, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("--dataset", sw_dataset, "DVID directory");
  sw->add_option("--pairs", sw_pairs, "number of clip pairs");
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_flag("--train-split", sw_train, "use training clips instead of the held-out split");
  sw->callback([&] {
    action = [&] {
      const auto ck_cfg = checkpoint_run_config(load_checkpoint(sw_tok));
      const auto tok = load_tokenizer(sw_tok);
      auto clips = clips_for(ck_cfg, sw_dataset, false);
      if (!sw_train) {
        auto c = ck_cfg;
        if (!sw_dataset.empty()) c.dataset_dir = sw_dataset;
        auto d = load_dataset(c);
        if (d.eval.size() >= 2 * sw_pairs) clips = std::move(d.eval);
      }
      const auto rep = run_swap_experiment(tok, clips, sw_pairs, sw_out);
      std::printf("%zu pairs, appearance transfer rate %.3f; report at %s\n", rep.pairs.size(), rep.transfer_rate(),
                  (fs::path(sw_out) / "report.csv").string().c_str());
      return 0;
    };
  });

  // export-features
  Common ef_c;
  std::string ef_out, ef_dataset, ef_teacher;
  auto* ef = app.add_subcommand("export-features", "write teacher features as DFEA files");
  add_common(ef, ef_c);
  ef->add_option("--out", ef_out, "feature directory")->required();
  ef->add_option("--dataset", ef_dataset, "DVID directory");
  ef->add_option("--teacher", ef_teacher, "teacher spec, e.g. random:1234:32");
  ef->callback([&] {
    action = [&] {
      auto cfg = resolve(ef_c);
      if (!ef_dataset.empty()) cfg.dataset_dir = ef_dataset;
      if (!ef_teacher.empty()) cfg.teacher = ef_teacher;
      cfg.validate();
      const auto teacher = make_teacher(cfg.teacher);
      const auto d = load_dataset(cfg);
      std::size_t n = 0;
      for (const auto* split : {&d.train, &d.eval}) {
        for (const auto& clip : *split) {
          save_features(ef_out, content_hash(clip), teacher->features(clip, cfg.tokenizer));
          ++n;
        }
      }
      std::cout << "exported " << teacher->id() << " features for " << n << " clips to " << ef_out << "\n";
      return 0;
    };
  });

  // eval
  std::string ev_tok, ev_dataset;
  bool ev_train = false;
  auto* ev = app.add_subcommand("eval", "PSNR and codebook statistics of a tokenizer checkpoint");
  ev->add_option("--tokenizer", ev_tok, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", ev_dataset, "DVID directory");
  ev->add_flag("--train-split", ev_train, "evaluate the training clips instead of the held-out split");
  ev->callback([&] {
    action = [&] {
      const auto ck_cfg = checkpoint_run_config(load_checkpoint(ev_tok));
      const auto tok = load_tokenizer(ev_tok);
      const auto r = evaluate(tok, clips_for(ck_cfg, ev_dataset, !ev_train));
      std::printf("clip,psnr\n");
      for (std::size_t i = 0; i < r.psnr.size(); ++i) std::printf("%zu,%.4f\n", i, r.psnr[i]);
      std::printf("mean psnr %.4f dB, mean l1 %.5f, usage %.4f, perplexity %.3f\n", r.mean_psnr, r.mean_l1,
                  r.codes.usage, r.codes.perplexity);
      return 0;
    };
  });

  // grad-check
  int gc_points = 10;
  double gc_tol = 1e-4, gc_model_tol = 1e-3;
  std::uint64_t gc_seed = 7;
  bool gc_skip_model = false;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every primitive and the full model");
  gc->add_option("--points", gc_points, "random points per primitive")->check(CLI::PositiveNumber);
  gc->add_option("--tol", gc_tol, "primitive tolerance");
  gc->add_option("--model-tol", gc_model_tol, "whole-model tolerance");
  gc->add_option("--seed", gc_seed, "sampling seed");
  gc->add_flag("--skip-model", gc_skip_model, "only check primitives");
  gc->callback([&] {
    action = [&] {
      bool ok = true;
      std::printf("%-22s %-12s %s\n", "op", "max_rel_err", "result");
      for (const auto& r : run_gradient_suite<double>(gc_points, gc_tol, gc_seed)) {
        const double worst = r.max_rel_err.empty() ? 0.0 : *std::max_element(r.max_rel_err.begin(), r.max_rel_err.end());
        std::printf("%-22s %-12.3e %s\n", r.op.c_str(), worst, r.passed ? "PASS" : "FAIL");
        ok = ok && r.passed;
      }
      if (!gc_skip_model) {
        const auto m = whole_model_grad_check(gc_seed, 3, gc_model_tol);
        for (const auto& p : m.params) {
          std::printf("%-22s %-12.3e %s\n", ("model:" + p.name).c_str(), p.rel_err, p.rel_err < gc_model_tol ? "PASS" : "FAIL");
        }
        ok = ok && m.passed;
      }
      std::printf("%s\n", ok ? "all gradient checks passed" : "gradient checks FAILED");
      return ok ? 0 : 2;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* shown = &app;
    for (const auto* sub : app.get_subcommands()) shown = sub;
    std::cerr << shown->help();
    return 1;
  }

  try {
    return action ? action() : 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed checkpoint header: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dera

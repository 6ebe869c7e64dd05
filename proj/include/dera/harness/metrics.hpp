#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dera/videolab/clip.hpp"

namespace dera {

inline constexpr double kPsnrCap = 99.0;

/// PSNR on [-1, 1] pixels (peak-to-peak 2): 10 log10(4 / MSE), capped.
inline double psnr(const VideoClip& ref, const VideoClip& test) {
  if (!ref.same_dims(test)) throw ValidationError("psnr: clip dimensions differ");
  if (ref.pixels.empty()) throw ValidationError("psnr: empty clip");
  double se = 0;
  for (std::size_t i = 0; i < ref.pixels.size(); ++i) {
    const double d = static_cast<double>(ref.pixels[i]) - static_cast<double>(test.pixels[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(ref.pixels.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(4.0 / mse));
}

struct CodeStats {
  double usage = 0;       // fraction of entries hit at least once
  double perplexity = 0;  // exp of the entropy of the empirical distribution
};

inline CodeStats code_stats(const std::vector<std::uint64_t>& counts) {
  if (counts.empty()) throw ValidationError("code_stats: empty codebook");
  std::uint64_t total = 0, used = 0;
  for (auto c : counts) {
    total += c;
    used += c > 0;
  }
  if (total == 0) return {0.0, 0.0};
  double h = 0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return {static_cast<double>(used) / static_cast<double>(counts.size()), std::exp(h)};
}

inline CodeStats code_stats(const std::vector<std::size_t>& indices, std::size_t codebook_size) {
  std::vector<std::uint64_t> counts(codebook_size, 0);
  for (auto i : indices) ++counts.at(i);
  return code_stats(counts);
}

struct MetricsRow {
  std::size_t step = 0;
  double loss_total = 0, loss_rec = 0, loss_vq = 0;
  std::optional<double> loss_align_a, loss_align_m;
  std::optional<double> s;
  std::optional<bool> conflicted;
  std::optional<double> norm_a, norm_m;
  double usage = 0, perplexity = 0;
  std::optional<double> psnr;
};

inline const char* metrics_header() {
  return "step,loss_total,loss_rec,loss_vq,loss_align_a,loss_align_m,s,conflicted,norm_a,norm_m,usage,perplexity,psnr";
}

/// %.9g keeps every float bit and prints doubles reproducibly; absent values
/// are empty cells.
inline std::string format_metrics_row(const MetricsRow& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  std::string out = std::to_string(r.step);
  for (const auto& cell : {num(r.loss_total), num(r.loss_rec), num(r.loss_vq), opt(r.loss_align_a), opt(r.loss_align_m),
                           opt(r.s), r.conflicted ? std::string(*r.conflicted ? "1" : "0") : std::string(),
                           opt(r.norm_a), opt(r.norm_m), num(r.usage), num(r.perplexity), opt(r.psnr)}) {
    out += ',';
    out += cell;
  }
  return out;
}

/// Single-writer CSV log. A fresh file gets the header; `append` keeps the
/// rows already present (used on resume, after truncating past `keep_until`).
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, bool append, std::optional<std::size_t> keep_until = std::nullopt)
      : path_(path) {
    if (append && std::filesystem::exists(path)) {
      if (keep_until) truncate_after(*keep_until);
      out_.open(path, std::ios::binary | std::ios::app);
    } else {
      out_.open(path, std::ios::binary | std::ios::trunc);
      out_ << metrics_header() << '\n';
    }
    if (!out_) throw ValidationError("cannot open metrics log '" + path.string() + "'");
  }

  void write(const MetricsRow& r) {
    if (!out_.is_open()) return;
    out_ << format_metrics_row(r) << '\n';
    out_.flush();
  }

 private:
  /// Drops rows whose step exceeds `step` (left over from a run that went
  /// further than the checkpoint being resumed).
  void truncate_after(std::size_t step) {
    std::ifstream in(path_, std::ios::binary);
    std::string line, kept;
    bool header = true;
    while (std::getline(in, line)) {
      if (!header) {
        const auto comma = line.find(',');
        if (std::stoull(line.substr(0, comma)) > step) break;
      }
      header = false;
      kept += line + '\n';
    }
    in.close();
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    out << kept;
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace dera

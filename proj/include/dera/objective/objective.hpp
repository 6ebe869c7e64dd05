#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dera/diffcore/ops.hpp"
#include "dera/videolab/clip.hpp"

namespace dera {

struct LossWeights {
  double align_a = 1.0;
  double align_m = 0.5;
  double beta = 0.25;  // commitment
  double recon = 1.0;
  std::map<std::string, double> aux;  // weights of named auxiliary terms

  void validate() const {
    auto check = [](double w, const std::string& name) {
      if (!(w >= 0) || !std::isfinite(w)) throw ValidationError("loss weight " + name + " must be finite and >= 0");
    };
    check(align_a, "align_a");
    check(align_m, "align_m");
    check(beta, "beta");
    check(recon, "recon");
    for (const auto& [k, w] : aux) check(w, "aux." + k);
  }
};

/// Mean absolute error over all elements.
template <class T>
Tensor<T> recon_l1(const Tensor<T>& x, const Tensor<T>& x_rec) {
  if (x.shape() != x_rec.shape()) {
    throw ValidationError("recon_l1: shapes " + shape_str(x.shape()) + " and " + shape_str(x_rec.shape()) + " differ");
  }
  return mean(abs(sub(x_rec, x)));
}

inline double recon_l1(const VideoClip& x, const VideoClip& x_rec) {
  if (!x.same_dims(x_rec)) throw ValidationError("recon_l1: clip dimensions differ");
  double acc = 0;
  for (std::size_t i = 0; i < x.pixels.size(); ++i) acc += std::abs(double(x_rec.pixels[i]) - double(x.pixels[i]));
  return acc / static_cast<double>(x.pixels.size());
}

/// Codebook term ||sg(z) - e||^2 plus beta times commitment ||z - sg(e)||^2,
/// each averaged over tokens and dimensions.
template <class T>
Tensor<T> vq_objective(const Tensor<T>& z_pre, const Tensor<T>& e_quant, T beta) {
  if (z_pre.shape() != e_quant.shape()) {
    throw ValidationError("vq_objective: shapes " + shape_str(z_pre.shape()) + " and " + shape_str(e_quant.shape()) +
                          " differ");
  }
  auto codebook = sub(stop_gradient(z_pre), e_quant);
  auto commit = sub(z_pre, stop_gradient(e_quant));
  return add(mean(mul(codebook, codebook)), scale(mean(mul(commit, commit)), beta));
}

/// Scalar pieces of one step's loss. The reformulated alignment pair is
/// filled in when conflict projection ran.
template <class T>
struct LossParts {
  Tensor<T> recon, vq;
  Tensor<T> align_a, align_m;
  Tensor<T> align_a_re, align_m_re;
  std::map<std::string, Tensor<T>> aux;
};

struct LossTerm {
  std::string name;
  double weight = 0;
  double value = 0;
};

template <class T>
struct TotalLoss {
  Tensor<T> total;
  std::vector<LossTerm> terms;  // what was summed, in order
  double value() const { return static_cast<double>(total.item()); }
};

/// w_rec * recon + vq + lambda_a * align_a + lambda_m * align_m + sum aux.
/// Alignment terms come from the reformulated pair when `sacp` is set.
/// Omitted alignment parts are allowed only with zero weight.
template <class T>
TotalLoss<T> total_loss(const LossParts<T>& parts, const LossWeights& w, bool sacp) {
  w.validate();
  if (!parts.recon.defined()) throw ValidationError("total_loss: missing part 'recon'");
  if (!parts.vq.defined()) throw ValidationError("total_loss: missing part 'vq'");
  TotalLoss<T> out;
  auto accumulate = [&](const std::string& name, double weight, const Tensor<T>& term) {
    out.terms.push_back({name, weight, static_cast<double>(term.item())});
    auto contrib = weight == 1.0 ? term : scale(term, static_cast<T>(weight));
    out.total = out.total.defined() ? add(out.total, contrib) : contrib;
  };
  accumulate("rec", w.recon, parts.recon);
  accumulate("vq", 1.0, parts.vq);
  const auto& a = sacp ? parts.align_a_re : parts.align_a;
  const auto& m = sacp ? parts.align_m_re : parts.align_m;
  const char* suffix = sacp ? "_re" : "";
  if (a.defined()) accumulate(std::string("align_a") + suffix, w.align_a, a);
  else if (w.align_a != 0) throw ValidationError(std::string("total_loss: missing part 'align_a") + suffix + "'");
  if (m.defined()) accumulate(std::string("align_m") + suffix, w.align_m, m);
  else if (w.align_m != 0) throw ValidationError(std::string("total_loss: missing part 'align_m") + suffix + "'");
  for (const auto& [name, weight] : w.aux) {
    const auto it = parts.aux.find(name);
    if (it == parts.aux.end()) throw ValidationError("total_loss: missing auxiliary part '" + name + "'");
    accumulate("aux." + name, weight, it->second);
  }
  return out;
}

}  // namespace dera

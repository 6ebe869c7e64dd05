#pragma once

// Symmetric alignment-conflict projection: when the two alignment gradients
// over the shared encoder point against each other, each loss is shifted by
// a detached multiple of the other.

#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "dera/diffcore/autograd.hpp"
#include "dera/diffcore/ops.hpp"

namespace dera {

struct SacpOutcome {
  double s = 0;  // <g_a, g_m>
  bool conflicted = false;
  std::optional<double> c_a, c_m;
  double norm_a = 0, norm_m = 0;
};

template <class T>
struct SacpResult {
  Tensor<T> loss_a, loss_m;  // reformulated (or the inputs, untouched)
  SacpOutcome outcome;
};

template <class T>
SacpResult<T> sacp_reformulate(const Tensor<T>& loss_a, const Tensor<T>& loss_m, const ParameterSet<T>& params,
                               const std::vector<std::string>& encoder_params, double eps = 1e-8) {
  if (encoder_params.empty()) throw ContractError("sacp: empty encoder parameter set");
  if (!(eps > 0)) throw ContractError("sacp: eps must be positive");
  const auto g_a = backward(loss_a, params, encoder_params);
  const auto g_m = backward(loss_m, params, encoder_params);

  SacpResult<T> r{loss_a, loss_m, {}};
  auto& o = r.outcome;
  o.s = static_cast<double>(static_cast<T>(dot(g_a, g_m)));
  o.norm_a = l2_norm(g_a);
  o.norm_m = l2_norm(g_m);
  if (!std::isfinite(o.s) || !std::isfinite(o.norm_a) || !std::isfinite(o.norm_m)) {
    throw NumericError("sacp", "non-finite gradient statistics");
  }
  if (!(static_cast<T>(o.s) < T(0))) return r;

  o.conflicted = true;
  std::vector<T> coef{static_cast<T>(o.s / (o.norm_m + eps)), static_cast<T>(o.s / (o.norm_a + eps))};
  visit_detached(coef);
  o.c_a = coef[0];
  o.c_m = coef[1];
  r.loss_a = sub(loss_a, scale(loss_m, coef[0]));
  r.loss_m = sub(loss_m, scale(loss_a, coef[1]));
  return r;
}

/// Rolling record of conflict flags.
class ConflictHistory {
 public:
  void push(bool conflicted) { flags_.push_back(conflicted); }
  std::size_t size() const noexcept { return flags_.size(); }

  /// Fraction of conflicted steps among the last `window` (or fewer) entries.
  double rate(std::size_t window) const {
    if (window == 0) throw ContractError("conflict_rate: window must be at least 1");
    const std::size_t n = std::min(window, flags_.size());
    if (n == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = flags_.size() - n; i < flags_.size(); ++i) hits += flags_[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(n);
  }

 private:
  std::deque<bool> flags_;
};

inline double conflict_rate(const std::vector<bool>& history, std::size_t window) {
  ConflictHistory h;
  for (bool b : history) h.push(b);
  return h.rate(window);
}

}  // namespace dera

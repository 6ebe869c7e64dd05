#pragma once

#include <cmath>
#include <map>
#include <numbers>

#include "dera/diffcore/autograd.hpp"
#include "dera/harness/run_config.hpp"
#include "dera/tokenizer/checkpoint.hpp"

namespace dera {

/// Linear warmup to `lr`, then cosine decay to lr * min_lr_ratio at `total`.
inline double scheduled_lr(const OptimizerConfig& o, std::size_t step, std::size_t total) {
  if (o.warmup_steps > 0 && step < o.warmup_steps) {
    return o.lr * static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
  }
  const std::size_t span = total > o.warmup_steps ? total - o.warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, o.warmup_steps)) / static_cast<double>(span));
  const double floor = o.lr * o.min_lr_ratio;
  return floor + (o.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with global-norm gradient clipping. Moments are kept per parameter
/// name in float; the step counter drives bias correction.
template <class T>
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  std::size_t step_count() const noexcept { return t_; }

  /// Applies one update from `g` (gradient over every parameter in `ps`).
  /// Returns the pre-clip global gradient norm.
  double step(ParameterSet<T>& ps, const GradientVector<T>& g, double lr) {
    double sq = 0;
    for (T v : g.flat) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("adam", "non-finite gradient norm");
    const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T c = static_cast<T>(clip);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < g.param_names.size(); ++i) {
      const auto& name = g.param_names[i];
      auto grad = g.block(i);
      auto value = ps.at(name).value.mutable_data();
      auto& [m, v] = moments(name, value.size());
      for (std::size_t k = 0; k < value.size(); ++k) {
        const T gk = grad[k] * c;
        m[k] = b1 * m[k] + (T(1) - b1) * gk;
        v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
        value[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
      }
    }
    return norm;
  }

  void save(Checkpoint& ck, const std::string& prefix = "adam.") const {
    for (const auto& [name, mv] : state_) {
      ck.tensors.push_back({prefix + "m." + name, {mv.first.size()}, std::vector<float>(mv.first.begin(), mv.first.end())});
      ck.tensors.push_back({prefix + "v." + name, {mv.second.size()}, std::vector<float>(mv.second.begin(), mv.second.end())});
    }
  }

  void load(const Checkpoint& ck, std::size_t step_count, const std::string& prefix = "adam.") {
    state_.clear();
    t_ = step_count;
    const std::string pm = prefix + "m.";
    for (const auto& t : ck.tensors) {
      if (t.name.rfind(pm, 0) != 0) continue;
      const std::string name = t.name.substr(pm.size());
      const auto& v = ck.at(prefix + "v." + name);
      state_[name] = {std::vector<T>(t.data.begin(), t.data.end()), std::vector<T>(v.data.begin(), v.data.end())};
    }
  }

 private:
  std::pair<std::vector<T>, std::vector<T>>& moments(const std::string& name, std::size_t n) {
    auto& mv = state_[name];
    if (mv.first.empty()) mv = {std::vector<T>(n, T(0)), std::vector<T>(n, T(0))};
    if (mv.first.size() != n) throw ContractError("adam: state size changed for '" + name + "'");
    return mv;
  }

  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> state_;
};

}  // namespace dera

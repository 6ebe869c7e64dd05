#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dera/diffcore/autograd.hpp"
#include "dera/diffcore/ops.hpp"

namespace dera {

struct GradCheckReport {
  std::string op;
  std::vector<double> max_rel_err;  // one entry per input tensor
  double tol = 0;
  bool passed = false;
};

/// Relative error as used by every finite-difference check in the project.
inline double fd_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

namespace gradcheck_detail {

template <class T>
using Builder = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

inline const std::vector<std::size_t>& embedding_ids() {
  static const std::vector<std::size_t> ids{0, 3, 3, 5, 1};
  return ids;
}
inline const std::vector<std::size_t>& ce_targets() {
  static const std::vector<std::size_t> t{2, 0, 5, 5, 1};
  return t;
}

template <class T>
Builder<T> builder(const std::string& id) {
  using V = std::vector<Tensor<T>>;
  if (id == "add") return [](const V& x) { return add(x[0], x[1]); };
  if (id == "sub") return [](const V& x) { return sub(x[0], x[1]); };
  if (id == "mul") return [](const V& x) { return mul(x[0], x[1]); };
  if (id == "div") return [](const V& x) { return div(x[0], x[1]); };
  if (id == "matmul") return [](const V& x) { return matmul(x[0], x[1]); };
  if (id == "matmul_nt") return [](const V& x) { return matmul(x[0], x[1], false, true); };
  if (id == "matmul_tn") return [](const V& x) { return matmul(x[0], x[1], true, false); };
  if (id == "matmul_tt") return [](const V& x) { return matmul(x[0], x[1], true, true); };
  if (id == "transpose") return [](const V& x) { return transpose(x[0]); };
  if (id == "reshape") return [](const V& x) { return reshape(x[0], {3, 4}); };
  if (id == "concat") return [](const V& x) { return concat(V{x[0], x[1]}, 0); };
  if (id == "concat_axis1") return [](const V& x) { return concat(V{x[0], x[1]}, 1); };
  if (id == "slice") return [](const V& x) { return slice(x[0], 1, 1, 3); };
  if (id == "sum") return [](const V& x) { return sum(x[0]); };
  if (id == "sum_axis") return [](const V& x) { return sum(x[0], 1); };
  if (id == "mean") return [](const V& x) { return mean(x[0]); };
  if (id == "mean_axis") return [](const V& x) { return mean(x[0], -1); };
  if (id == "exp") return [](const V& x) { return exp(x[0]); };
  if (id == "log") return [](const V& x) { return log(x[0]); };
  if (id == "sqrt") return [](const V& x) { return sqrt(x[0]); };
  if (id == "relu") return [](const V& x) { return relu(x[0]); };
  if (id == "gelu") return [](const V& x) { return gelu(x[0]); };
  if (id == "abs") return [](const V& x) { return abs(x[0]); };
  if (id == "softmax") return [](const V& x) { return softmax(x[0]); };
  if (id == "layer_norm") return [](const V& x) { return layer_norm(x[0], x[1], x[2]); };
  if (id == "embedding") return [](const V& x) { return embedding<T>(x[0], embedding_ids()); };
  if (id == "cosine_similarity") return [](const V& x) { return cosine_similarity(x[0], x[1]); };
  if (id == "cross_entropy")
    return [](const V& x) {
      static const std::vector<T> w{T(1), T(0.5), T(0), T(1), T(2)};
      return cross_entropy_with_logits<T>(x[0], ce_targets(), w);
    };
  if (id == "attention")
    return [](const V& x) {
      auto scores = scale(matmul(x[0], x[1], false, true), T(0.5));
      return matmul(softmax(scores), x[2]);
    };
  throw ValidationError("unknown primitive '" + id + "'");
}

}  // namespace gradcheck_detail

/// Names accepted by grad_check.
inline const std::vector<std::string>& primitive_catalogue() {
  static const std::vector<std::string> names{
      "add",  "sub",    "mul",          "div",     "matmul",     "matmul_nt", "matmul_tn",
      "matmul_tt", "transpose", "reshape", "concat", "concat_axis1", "slice", "sum",
      "sum_axis", "mean", "mean_axis", "exp", "log", "sqrt", "relu",
      "gelu", "abs", "softmax", "layer_norm", "embedding", "cosine_similarity", "cross_entropy",
      "attention"};
  return names;
}

/// Random input point for a primitive, respecting its domain (positive inputs
/// for log/sqrt/div denominators, values away from the kinks of relu/abs).
inline std::vector<Tensor<double>> sample_point(const std::string& id, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> positive(0.5, 2.0);
  std::uniform_real_distribution<double> magnitude(0.1, 1.5);
  std::bernoulli_distribution coin(0.5);
  auto gen = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = normal(rng);
    return Tensor<double>::constant(std::move(s), std::move(v));
  };
  auto gen_pos = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = positive(rng);
    return Tensor<double>::constant(std::move(s), std::move(v));
  };
  auto gen_away = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = (coin(rng) ? 1.0 : -1.0) * magnitude(rng);
    return Tensor<double>::constant(std::move(s), std::move(v));
  };
  if (id == "add") return {gen({4, 5}), gen({5})};
  if (id == "sub") return {gen({4, 5}), gen({4, 5})};
  if (id == "mul") return {gen({3, 4}), gen({1, 4})};
  if (id == "div") return {gen({3, 4}), gen_pos({3, 4})};
  if (id == "matmul") return {gen({3, 4}), gen({4, 2})};
  if (id == "matmul_nt") return {gen({3, 4}), gen({2, 4})};
  if (id == "matmul_tn") return {gen({4, 3}), gen({4, 2})};
  if (id == "matmul_tt") return {gen({4, 3}), gen({2, 4})};
  if (id == "transpose") return {gen({3, 5})};
  if (id == "reshape") return {gen({2, 6})};
  if (id == "concat") return {gen({2, 3}), gen({4, 3})};
  if (id == "concat_axis1") return {gen({3, 2}), gen({3, 4})};
  if (id == "slice") return {gen({5, 4})};
  if (id == "sum" || id == "mean") return {gen({3, 4})};
  if (id == "sum_axis" || id == "mean_axis") return {gen({3, 4, 2})};
  if (id == "exp" || id == "gelu") return {gen({3, 4})};
  if (id == "log" || id == "sqrt") return {gen_pos({3, 4})};
  if (id == "relu" || id == "abs") return {gen_away({3, 4})};
  if (id == "softmax") return {gen({7})};
  if (id == "layer_norm") return {gen({4, 8}), gen({8}), gen({8})};
  if (id == "embedding") return {gen({6, 4})};
  if (id == "cosine_similarity") return {gen({16}), gen({16})};
  if (id == "cross_entropy") return {gen({5, 6})};
  if (id == "attention") return {gen({5, 4}), gen({5, 4}), gen({5, 3})};
  throw ValidationError("unknown primitive '" + id + "'");
}

namespace gradcheck_detail {

inline std::vector<double> probe_weights(std::size_t n) {
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL + n);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  std::vector<double> w(n);
  for (auto& x : w) x = d(rng);
  return w;
}

/// Scalarizes op output as sum(out * w) with fixed positive weights.
template <class T>
Tensor<T> probe(const Tensor<T>& out) {
  auto w = probe_weights(out.numel());
  return sum(mul(out, Tensor<T>::constant(out.shape(), std::vector<T>(w.begin(), w.end()))));
}

}  // namespace gradcheck_detail

/// Compares reverse-mode gradients (computed in precision T) with central
/// differences (always in double, step 1e-5) at `point`.
template <class T = double>
GradCheckReport grad_check(const std::string& op_id, const std::vector<Tensor<double>>& point, double tol,
                           double step = 1e-5) {
  const auto build_t = gradcheck_detail::builder<T>(op_id);
  const auto build_d = gradcheck_detail::builder<double>(op_id);

  ParameterSet<T> params;
  std::vector<Tensor<T>> inputs;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < point.size(); ++i) {
    names.push_back("in" + std::to_string(i));
    std::vector<T> v(point[i].data().begin(), point[i].data().end());
    inputs.push_back(params.add(names.back(), point[i].shape(), std::move(v)));
  }
  const auto grads = backward(gradcheck_detail::probe(build_t(inputs)), params, names);

  GradCheckReport report{op_id, {}, tol, true};
  std::vector<Tensor<double>> work;
  for (const auto& p : point) {
    work.push_back(Tensor<double>::constant(p.shape(), std::vector<double>(p.data().begin(), p.data().end())));
  }
  auto eval = [&] { return gradcheck_detail::probe(build_d(work)).item(); };
  for (std::size_t i = 0; i < point.size(); ++i) {
    const auto analytic = grads.block(names[i]);
    auto data = work[i].mutable_data();
    double worst = 0;
    for (std::size_t e = 0; e < data.size(); ++e) {
      const double x0 = data[e];
      data[e] = x0 + step;
      const double up = eval();
      data[e] = x0 - step;
      const double down = eval();
      data[e] = x0;
      worst = std::max(worst, fd_rel_err(static_cast<double>(analytic[e]), (up - down) / (2 * step)));
    }
    report.max_rel_err.push_back(worst);
    report.passed = report.passed && worst < tol;
  }
  return report;
}

/// Runs every catalogue primitive at `points` random points.
template <class T = double>
std::vector<GradCheckReport> run_gradient_suite(int points, double tol, std::uint64_t seed = 7) {
  std::vector<GradCheckReport> out;
  for (const auto& id : primitive_catalogue()) {
    std::mt19937_64 rng(seed ^ fnv1a(id));
    GradCheckReport agg{id, {}, tol, true};
    for (int k = 0; k < points; ++k) {
      auto r = grad_check<T>(id, sample_point(id, rng), tol);
      if (agg.max_rel_err.empty()) agg.max_rel_err.assign(r.max_rel_err.size(), 0.0);
      for (std::size_t i = 0; i < r.max_rel_err.size(); ++i)
        agg.max_rel_err[i] = std::max(agg.max_rel_err[i], r.max_rel_err[i]);
      agg.passed = agg.passed && r.passed;
    }
    out.push_back(std::move(agg));
  }
  return out;
}

}  // namespace dera

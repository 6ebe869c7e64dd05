#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dera/diffcore/tensor.hpp"

namespace dera {

/// A named trainable leaf.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;  // empty, or same length as value
};

/// Flattened gradient over a parameter subset, in lexicographic name order.
template <class T>
struct GradientVector {
  std::vector<std::string> param_names;
  std::vector<std::size_t> offsets;  // offsets[i] = start of param_names[i] in flat
  std::vector<T> flat;

  std::size_t size() const noexcept { return flat.size(); }

  std::span<const T> block(std::size_t i) const {
    const std::size_t end = i + 1 < offsets.size() ? offsets[i + 1] : flat.size();
    return std::span<const T>(flat).subspan(offsets[i], end - offsets[i]);
  }
  std::span<const T> block(const std::string& name) const {
    const auto it = std::find(param_names.begin(), param_names.end(), name);
    if (it == param_names.end()) throw ContractError("gradient has no parameter '" + name + "'");
    return block(static_cast<std::size_t>(it - param_names.begin()));
  }
};

/// Double-accumulated inner product and norm over flat gradients.
template <class T>
double dot(const GradientVector<T>& a, const GradientVector<T>& b) {
  if (a.size() != b.size()) throw ContractError("dot: gradient length mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.flat[i]) * static_cast<double>(b.flat[i]);
  return acc;
}

template <class T>
double l2_norm(const GradientVector<T>& a) {
  double acc = 0;
  for (T v : a.flat) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// Ordered registry of a model's parameters; std::map keeps names sorted.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> init) {
    if (params_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    auto t = Tensor<T>::leaf(std::move(shape), std::move(init), true);
    params_.emplace(name, Parameter<T>{name, t, {}});
    return t;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Exact reverse-mode gradient of a scalar `loss` with respect to the named
/// parameters. Does not touch Parameter::grad and leaves the graph intact, so
/// it can be called repeatedly on the same graph. Unreachable parameters get a
/// zero block.
template <class T>
GradientVector<T> backward(const Tensor<T>& loss, const ParameterSet<T>& params, std::vector<std::string> names) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());

  GradientVector<T> out;
  out.param_names = names;
  std::unordered_map<const Node<T>*, std::size_t> target_offset;
  std::size_t total = 0;
  for (const auto& n : names) {
    const auto& p = params.at(n);
    out.offsets.push_back(total);
    target_offset.emplace(p.value.node(), total);
    total += p.value.numel();
  }
  out.flat.assign(total, T(0));
  if (!loss.requires_grad() || names.empty()) return out;

  // Post-order over nodes that carry gradients.
  std::vector<const Node<T>*> order;
  std::unordered_map<const Node<T>*, std::size_t> index;
  {
    std::vector<std::pair<const Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    index.emplace(loss.node(), SIZE_MAX);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && index.emplace(child, SIZE_MAX).second) stack.emplace_back(child, 0);
        continue;
      }
      index[node] = order.size();
      order.push_back(node);
      stack.pop_back();
    }
  }

  // A node is relevant when some target parameter lies beneath it.
  std::vector<char> relevant(order.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Node<T>* n = order[i];
    if (target_offset.count(n)) relevant[i] = 1;
    for (const auto& in : n->inputs) {
      if (in->requires_grad && relevant[index.at(in.get())]) relevant[i] = 1;
    }
  }
  if (!relevant.back()) return out;

  std::vector<std::vector<T>> grads(order.size());
  grads.back().assign(1, T(1));
  std::vector<T*> gin;
  for (std::size_t i = order.size(); i-- > 0;) {
    const Node<T>* n = order[i];
    if (grads[i].empty() || !relevant[i]) continue;
    if (n->backward) {
      gin.assign(n->inputs.size(), nullptr);
      for (std::size_t k = 0; k < n->inputs.size(); ++k) {
        const Node<T>* in = n->inputs[k].get();
        if (!in->requires_grad) continue;
        const std::size_t j = index.at(in);
        if (!relevant[j]) continue;
        if (grads[j].empty()) grads[j].assign(in->value.size(), T(0));
        gin[k] = grads[j].data();
      }
      n->backward(*n, grads[i].data(), gin);
      for (std::size_t k = 0; k < gin.size(); ++k) {
        if (!gin[k]) continue;
        if (!detail::all_finite(gin[k], n->inputs[k]->value.size())) {
          throw NumericError(n->op, "non-finite gradient flowing to input " + std::to_string(k));
        }
      }
    }
    auto it = target_offset.find(n);
    if (it != target_offset.end()) std::copy(grads[i].begin(), grads[i].end(), out.flat.begin() + it->second);
    if (n != loss.node()) std::vector<T>().swap(grads[i]);
  }
  return out;
}

template <class T>
GradientVector<T> backward(const Tensor<T>& loss, const ParameterSet<T>& params) {
  return backward(loss, params, params.names());
}

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Seeded generator unique to (seed, name). Parameter initialization draws from
/// its own stream so adding or removing a module never shifts the others.
inline std::mt19937_64 named_rng(std::uint64_t seed, std::string_view name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
  return std::mt19937_64(seq);
}

template <class T>
std::vector<T> normal_init(std::uint64_t seed, std::string_view name, std::size_t n, double stddev) {
  auto rng = named_rng(seed, name);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

}  // namespace dera

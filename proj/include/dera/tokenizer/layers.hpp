#pragma once

// Parameterized building blocks shared by the tokenizer and the AR generator.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dera/diffcore/autograd.hpp"
#include "dera/diffcore/ops.hpp"

namespace dera {

template <class T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }
};

template <class T>
Linear<T> make_linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                      std::uint64_t seed, double stddev = 0.02) {
  return {ps.add(name + ".w", {in, out}, normal_init<T>(seed, name + ".w", in * out, stddev)),
          ps.add(name + ".b", {out}, std::vector<T>(out, T(0)))};
}

template <class T>
struct LayerNorm {
  Tensor<T> gain, bias;
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

template <class T>
LayerNorm<T> make_layer_norm(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
  return {ps.add(name + ".g", {dim}, std::vector<T>(dim, T(1))), ps.add(name + ".b", {dim}, std::vector<T>(dim, T(0)))};
}

template <class T>
Tensor<T> make_embedding(ParameterSet<T>& ps, const std::string& name, std::size_t rows, std::size_t dim,
                         std::uint64_t seed, double stddev = 0.02) {
  return ps.add(name, {rows, dim}, normal_init<T>(seed, name, rows * dim, stddev));
}

/// Additive attention mask that hides future positions.
template <class T>
Tensor<T> causal_mask(std::size_t n) {
  std::vector<T> m(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = T(-1e9);
  return Tensor<T>::constant({n, n}, std::move(m));
}

/// Multi-head scaled dot-product attention composed from primitives.
/// q, k, v: N x (heads * head_dim).
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const Tensor<T>* mask) {
  const std::size_t width = q.dim(1);
  const std::size_t hd = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice(q, 1, h * hd, (h + 1) * hd);
    auto kh = heads == 1 ? k : slice(k, 1, h * hd, (h + 1) * hd);
    auto vh = heads == 1 ? v : slice(v, 1, h * hd, (h + 1) * hd);
    auto scores = scale(matmul(qh, kh, false, true), inv_sqrt);
    if (mask) scores = add(scores, *mask);
    outs.push_back(matmul(softmax(scores), vh));
  }
  return heads == 1 ? outs[0] : concat(outs, 1);
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)), GELU MLP
/// with 4x expansion.
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> qkv, proj, fc1, fc2;
  std::size_t width = 0, heads = 1;

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* mask = nullptr) const {
    auto h = qkv(ln1(x));
    auto q = slice(h, 1, 0, width);
    auto k = slice(h, 1, width, 2 * width);
    auto v = slice(h, 1, 2 * width, 3 * width);
    auto y = add(x, proj(multi_head_attention(q, k, v, heads, mask)));
    return add(y, fc2(gelu(fc1(ln2(y)))));
  }
};

/// Heads default to width / 32 (at least one) when `heads` is 0.
inline std::size_t resolve_heads(std::size_t width, std::size_t heads) {
  if (heads == 0) heads = std::max<std::size_t>(1, width / 32);
  return heads;
}

template <class T>
TransformerBlock<T> make_block(ParameterSet<T>& ps, const std::string& name, std::size_t width, std::size_t heads,
                               std::size_t depth, std::uint64_t seed) {
  heads = resolve_heads(width, heads);
  if (width % heads != 0) {
    throw ValidationError("width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const double out_std = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, depth)));
  TransformerBlock<T> b;
  b.width = width;
  b.heads = heads;
  b.ln1 = make_layer_norm(ps, name + ".ln1", width);
  b.qkv = make_linear(ps, name + ".qkv", width, 3 * width, seed);
  b.proj = make_linear(ps, name + ".proj", width, width, seed, out_std);
  b.ln2 = make_layer_norm(ps, name + ".ln2", width);
  b.fc1 = make_linear(ps, name + ".fc1", width, 4 * width, seed);
  b.fc2 = make_linear(ps, name + ".fc2", 4 * width, width, seed, out_std);
  return b;
}

}  // namespace dera

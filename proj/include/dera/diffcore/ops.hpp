#pragma once

// Differentiable primitive catalogue. Every function builds one graph node and
// records the closure that maps the output gradient back to its inputs.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dera/diffcore/tensor.hpp"

namespace dera {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ContractError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

/// Strides of a contiguous block of `inner` trailing elements repeated over
/// the leading axes of `out`.
inline std::vector<std::size_t> row_strides(std::size_t inner, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t d = out.size(); d-- > 0 && acc < inner;) {
    strides[d] = acc;
    acc *= out[d];
  }
  return acc == inner ? strides : std::vector<std::size_t>{};
}

/// Visits every output element with the matching flat offsets into a and b.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t ia = sa[r - 1];
  const std::size_t ib = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, oa + k * ia, ob + k * ib);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class T, class Fwd, class GradA, class GradB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  std::vector<T> out(numel(out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_op<T>(op, std::move(out_shape), std::move(out), {a, b},
                      [grad_a, grad_b](const Node<T>& self, const T* g, std::span<T* const> gin) {
                        const auto& x = self.inputs[0]->value;
                        const auto& y = self.inputs[1]->value;
                        const std::size_t n = self.value.size();
                        if (gin[0])
                          for (std::size_t i = 0; i < n; ++i) gin[0][i] += grad_a(g[i], x[i], y[i], self.value[i]);
                        if (gin[1])
                          for (std::size_t i = 0; i < n; ++i) gin[1][i] += grad_b(g[i], x[i], y[i], self.value[i]);
                      });
  }
  // Row broadcast: one operand repeats along the leading axes of the other.
  const bool b_rows = a.shape() == out_shape && b.numel() > 0 && out.size() % b.numel() == 0 &&
                      broadcast_strides(b.shape(), out_shape) == row_strides(b.numel(), out_shape);
  const bool a_rows = !b_rows && b.shape() == out_shape && a.numel() > 0 && out.size() % a.numel() == 0 &&
                      broadcast_strides(a.shape(), out_shape) == row_strides(a.numel(), out_shape);
  if (a_rows || b_rows) {
    const std::size_t inner = b_rows ? b.numel() : a.numel();
    for (std::size_t o = 0; o < out.size(); o += inner)
      for (std::size_t k = 0; k < inner; ++k)
        out[o + k] = b_rows ? fwd(av[o + k], bv[k]) : fwd(av[k], bv[o + k]);
    return make_op<T>(op, std::move(out_shape), std::move(out), {a, b},
                      [grad_a, grad_b, inner, b_rows](const Node<T>& self, const T* g, std::span<T* const> gin) {
                        const auto& x = self.inputs[0]->value;
                        const auto& y = self.inputs[1]->value;
                        const auto& v = self.value;
                        for (std::size_t o = 0; o < v.size(); o += inner)
                          for (std::size_t k = 0; k < inner; ++k) {
                            const std::size_t i = b_rows ? o + k : k, j = b_rows ? k : o + k;
                            if (gin[0]) gin[0][i] += grad_a(g[o + k], x[i], y[j], v[o + k]);
                            if (gin[1]) gin[1][j] += grad_b(g[o + k], x[i], y[j], v[o + k]);
                          }
                      });
  }
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  for_each_broadcast(out_shape, sa, sb,
                     [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return make_op<T>(
      op, out_shape, std::move(out), {a, b},
      [grad_a, grad_b, sa = std::move(sa), sb = std::move(sb)](const Node<T>& self, const T* g,
                                                               std::span<T* const> gin) {
        const auto& x = self.inputs[0]->value;
        const auto& y = self.inputs[1]->value;
        for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
          if (gin[0]) gin[0][i] += grad_a(g[o], x[i], y[j], self.value[o]);
          if (gin[1]) gin[1][j] += grad_b(g[o], x[i], y[j], self.value[o]);
        });
      });
}

template <class T, class Fwd, class Grad>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Grad grad) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_op<T>(op, x.shape(), std::move(out), {x},
                    [grad](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      const auto& xs = self.inputs[0]->value;
                      for (std::size_t i = 0; i < xs.size(); ++i) gin[0][i] += g[i] * grad(xs[i], self.value[i]);
                    });
}

/// Vectorized transcendental results are evaluated into aligned storage: on
/// an unaligned destination Eigen peels a scalar prologue whose length
/// depends on the address, and the scalar and packet paths round
/// differently. Aligned storage makes results a function of the shape only.
template <class T>
using AlignedArray = Eigen::Array<T, Eigen::Dynamic, 1>;

/// Elementwise view of a flat buffer.
template <class T>
auto array_map(T* p, std::size_t n) {
  return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}
template <class T>
auto array_map(const T* p, std::size_t n) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (+)= op(X) * op(Y), all row-major. X is xr x xc before the optional transpose.
template <class T>
void gemm(bool tx, bool ty, const T* x, std::size_t xr, std::size_t xc, const T* y, std::size_t yr, std::size_t yc,
          T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Map X(x, static_cast<Eigen::Index>(xr), static_cast<Eigen::Index>(xc));
  Map Y(y, static_cast<Eigen::Index>(yr), static_cast<Eigen::Index>(yc));
  const auto m = static_cast<Eigen::Index>(tx ? xc : xr);
  const auto n = static_cast<Eigen::Index>(ty ? yr : yc);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!tx && !ty) C.noalias() += X * Y;
  else if (tx && !ty) C.noalias() += X.transpose() * Y;
  else if (!tx && ty) C.noalias() += X * Y.transpose();
  else C.noalias() += X.transpose() * Y.transpose();
}

inline void require_rank(const char* op, const Shape& s, std::size_t r) {
  if (s.size() != r) {
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

inline std::size_t normalize_axis(const char* op, long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) throw ContractError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

/// outer x axis x inner factorization of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---- elementwise arithmetic (numpy-style broadcasting) ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y, T) { return g * y; },
      [](T g, T x, T, T) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T g, T, T y, T) { return g / y; },
      [](T g, T, T y, T out) { return -g * out / y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return mul(x, Tensor<T>::scalar(c));
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}

// ---- pointwise nonlinearities ----

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T out) { return T(0.5) / out; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = static_cast<T>(0.044715);
  const auto xv = x.data();
  const std::size_t n = xv.size();
  const auto v = detail::array_map(xv.data(), n);
  const detail::AlignedArray<T> tv = (k * (v + c * v * v * v)).tanh();
  const detail::AlignedArray<T> ov = T(0.5) * v * (T(1) + tv);
  std::vector<T> th(tv.data(), tv.data() + n), out(ov.data(), ov.data() + n);
  return make_op<T>("gelu", x.shape(), std::move(out), {x},
                    [th = std::move(th)](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      const auto& xs = self.inputs[0]->value;
                      for (std::size_t i = 0; i < xs.size(); ++i) {
                        const T v = xs[i];
                        const T du = k * (T(1) + T(3) * c * v * v);
                        gin[0][i] += g[i] * (T(0.5) * (T(1) + th[i]) + T(0.5) * v * (T(1) - th[i] * th[i]) * du);
                      }
                    });
}

// ---- linear algebra & layout ----

/// 2-D matrix product op(a) * op(b); transposes are folded into the kernel.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    throw ContractError("matmul: inner dimensions differ: " + shape_str(a.shape()) + (trans_a ? "^T" : "") + " x " +
                        shape_str(b.shape()) + (trans_b ? "^T" : ""));
  }
  std::vector<T> out(m * n);
  detail::gemm<T>(trans_a, trans_b, a.data().data(), ar, ac, b.data().data(), br, bc, out.data(), false);
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                    [=](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      const T* x = self.inputs[0]->value.data();
                      const T* y = self.inputs[1]->value.data();
                      if (gin[0]) {
                        // dA has A's stored layout (ar x ac)
                        if (!trans_a && !trans_b) detail::gemm<T>(false, true, g, m, n, y, br, bc, gin[0], true);
                        else if (!trans_a && trans_b) detail::gemm<T>(false, false, g, m, n, y, br, bc, gin[0], true);
                        else if (trans_a && !trans_b) detail::gemm<T>(false, true, y, br, bc, g, m, n, gin[0], true);
                        else detail::gemm<T>(true, true, y, br, bc, g, m, n, gin[0], true);
                      }
                      if (gin[1]) {
                        if (!trans_a && !trans_b) detail::gemm<T>(true, false, x, ar, ac, g, m, n, gin[1], true);
                        else if (!trans_a && trans_b) detail::gemm<T>(true, false, g, m, n, x, ar, ac, gin[1], true);
                        else if (trans_a && !trans_b) detail::gemm<T>(false, false, x, ar, ac, g, m, n, gin[1], true);
                        else detail::gemm<T>(true, true, g, m, n, x, ar, ac, gin[1], true);
                      }
                    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank("transpose", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return make_op<T>("transpose", {c, r}, std::move(out), {x},
                    [r, c](const Node<T>&, const T* g, std::span<T* const> gin) {
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
                    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ContractError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {x},
                    [](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      for (std::size_t i = 0; i < self.value.size(); ++i) gin[0][i] += g[i];
                    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis = 0) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::normalize_axis("concat", axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ContractError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != ax && p.dim(i) != s0[i]) {
        throw ContractError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
      }
    }
    lens.push_back(p.dim(ax));
    out_shape[ax] += p.dim(ax);
  }
  const auto split = detail::split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t block = lens[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + o * split.len * split.inner + offset);
    }
    offset += block;
  }
  return make_op<T>("concat", out_shape, std::move(out), parts,
                    [split, lens](const Node<T>&, const T* g, std::span<T* const> gin) {
                      std::size_t offset = 0;
                      for (std::size_t p = 0; p < lens.size(); ++p) {
                        const std::size_t block = lens[p] * split.inner;
                        if (gin[p]) {
                          for (std::size_t o = 0; o < split.outer; ++o) {
                            const T* src = g + o * split.len * split.inner + offset;
                            T* dst = gin[p] + o * block;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                          }
                        }
                        offset += block;
                      }
                    });
}

/// Half-open range [begin, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis("slice", axis, x.rank());
  if (begin > end || end > x.dim(ax)) {
    throw ContractError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                        shape_str(x.shape()));
  }
  const auto split = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  const std::size_t block = (end - begin) * split.inner;
  std::vector<T> out(numel(out_shape));
  const auto xv = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.data() + (o * split.len + begin) * split.inner, block, out.data() + o * block);
  }
  return make_op<T>("slice", std::move(out_shape), std::move(out), {x},
                    [split, begin, block](const Node<T>&, const T* g, std::span<T* const> gin) {
                      for (std::size_t o = 0; o < split.outer; ++o) {
                        T* dst = gin[0] + (o * split.len + begin) * split.inner;
                        const T* src = g + o * block;
                        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                      }
                    });
}

// ---- reductions ----

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_op<T>("sum", {}, {acc}, {x}, [](const Node<T>& self, const T* g, std::span<T* const> gin) {
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, long axis) {
  const std::size_t ax = detail::normalize_axis("sum", axis, x.rank());
  const auto split = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  std::vector<T> out(split.outer * split.inner, T(0));
  const auto xv = x.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t l = 0; l < split.len; ++l)
      for (std::size_t i = 0; i < split.inner; ++i)
        out[o * split.inner + i] += xv[(o * split.len + l) * split.inner + i];
  return make_op<T>("sum_axis", std::move(out_shape), std::move(out), {x},
                    [split](const Node<T>&, const T* g, std::span<T* const> gin) {
                      for (std::size_t o = 0; o < split.outer; ++o)
                        for (std::size_t l = 0; l < split.len; ++l)
                          for (std::size_t i = 0; i < split.inner; ++i)
                            gin[0][(o * split.len + l) * split.inner + i] += g[o * split.inner + i];
                    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis) {
  const std::size_t ax = detail::normalize_axis("mean", axis, x.rank());
  return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(ax)));
}

// ---- normalization & attention building blocks ----

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ContractError("softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  detail::AlignedArray<T> buf(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    buf = (detail::array_map(in, n) - mx).exp();
    std::copy_n(buf.data(), n, o);
    T z = 0;
    for (std::size_t i = 0; i < n; ++i) z += o[i];
    const T inv = T(1) / z;
    for (std::size_t i = 0; i < n; ++i) o[i] *= inv;
  }
  return make_op<T>("softmax", x.shape(), std::move(out), {x},
                    [n, rows](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* y = self.value.data() + r * n;
                        const T* gr = g + r * n;
                        T dot = 0;
                        for (std::size_t i = 0; i < n; ++i) dot += gr[i] * y[i];
                        T* dst = gin[0] + r * n;
                        for (std::size_t i = 0; i < n; ++i) dst[i] += y[i] * (gr[i] - dot);
                      }
                    });
}

/// Layer normalization over the last axis with learned gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() == 0) throw ContractError("layer_norm of a scalar");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) throw ContractError("layer_norm: gain/bias size mismatch");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  detail::AlignedArray<T> buf(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (in[i] - mu) * rs;
      (*xhat)[r * n + i] = h;
      out[r * n + i] = h * gv[i] + bv[i];
    }
  }
  return make_op<T>("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                    [n, rows, xhat, rstd](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      const auto& gv = self.inputs[1]->value;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* h = xhat->data() + r * n;
                        const T* gr = g + r * n;
                        if (gin[1])
                          for (std::size_t i = 0; i < n; ++i) gin[1][i] += gr[i] * h[i];
                        if (gin[2])
                          for (std::size_t i = 0; i < n; ++i) gin[2][i] += gr[i];
                        if (gin[0]) {
                          T mean_dh = 0, mean_dh_h = 0;
                          for (std::size_t i = 0; i < n; ++i) {
                            const T dh = gr[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * h[i];
                          }
                          mean_dh /= static_cast<T>(n);
                          mean_dh_h /= static_cast<T>(n);
                          const T rs = (*rstd)[r];
                          T* dst = gin[0] + r * n;
                          for (std::size_t i = 0; i < n; ++i) dst[i] += rs * (gr[i] * gv[i] - mean_dh - h[i] * mean_dh_h);
                        }
                      }
                    });
}

/// Gathers rows of a (V x D) table.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> indices) {
  detail::require_rank("embedding", table.shape(), 2);
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<T> out(idx.size() * d);
  const auto tv = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v) {
      throw ContractError("embedding: index " + std::to_string(idx[r]) + " out of range for table of " +
                          std::to_string(v) + " rows");
    }
    std::copy_n(tv.data() + idx[r] * d, d, out.data() + r * d);
  }
  const std::size_t rows = idx.size();
  return make_op<T>("embedding", {rows, d}, std::move(out), {table},
                    [d, idx = std::move(idx)](const Node<T>&, const T* g, std::span<T* const> gin) {
                      for (std::size_t r = 0; r < idx.size(); ++r) {
                        T* dst = gin[0] + idx[r] * d;
                        for (std::size_t i = 0; i < d; ++i) dst[i] += g[r * d + i];
                      }
                    });
}

/// Row-wise cosine similarity over the last axis: dot / ((|a|+eps)(|b|+eps)).
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  if (a.shape() != b.shape() || a.rank() == 0) {
    throw ContractError("cosine_similarity: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const auto av = a.data();
  const auto bv = b.data();
  auto norms = std::make_shared<std::vector<T>>(2 * rows);
  auto dots = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T x = av[r * n + i], y = bv[r * n + i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*norms)[2 * r] = na;
    (*norms)[2 * r + 1] = nb;
    (*dots)[r] = dot;
    out[r] = dot / ((na + eps) * (nb + eps));
  }
  return make_op<T>("cosine_similarity", std::move(out_shape), std::move(out), {a, b},
                    [n, rows, eps, norms, dots](const Node<T>& self, const T* g, std::span<T* const> gin) {
                      const auto& av = self.inputs[0]->value;
                      const auto& bv = self.inputs[1]->value;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T na = (*norms)[2 * r], nb = (*norms)[2 * r + 1], dot = (*dots)[r];
                        const T da = na + eps, db = nb + eps;
                        const T base = g[r] / (da * db);
                        // d|a|/da = a/|a|; the term vanishes at a = 0 because dot does too.
                        const T ka = na > T(0) ? g[r] * dot / (da * da * db * na) : T(0);
                        const T kb = nb > T(0) ? g[r] * dot / (da * db * db * nb) : T(0);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T x = av[r * n + i], y = bv[r * n + i];
                          if (gin[0]) gin[0][r * n + i] += base * y - ka * x;
                          if (gin[1]) gin[1][r * n + i] += base * x - kb * y;
                        }
                      }
                    });
}

/// Weighted mean next-token cross-entropy. logits: N x V; weight 0 masks a row.
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::size_t> targets,
                                    std::span<const T> weights) {
  detail::require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  if (targets.size() != rows || weights.size() != rows) throw ContractError("cross_entropy: target/weight length");
  T wsum = 0;
  for (T w : weights) wsum += w;
  if (!(wsum > T(0))) throw ContractError("cross_entropy: all positions are masked");
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(rows * v);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= v) throw ContractError("cross_entropy: target id out of range");
    const T* in = lv.data() + r * v;
    const T mx = *std::max_element(in, in + v);
    T z = 0;
    for (std::size_t i = 0; i < v; ++i) z += ((*probs)[r * v + i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < v; ++i) (*probs)[r * v + i] /= z;
    if (weights[r] != T(0)) loss += weights[r] * (std::log(z) + mx - in[targets[r]]);
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  return make_op<T>("cross_entropy", {}, {loss / wsum}, {logits},
                    [rows, v, wsum, probs, tg = std::move(tg), w = std::move(w)](
                        const Node<T>&, const T* g, std::span<T* const> gin) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        if (w[r] == T(0)) continue;
                        const T k = g[0] * w[r] / wsum;
                        T* dst = gin[0] + r * v;
                        const T* p = probs->data() + r * v;
                        for (std::size_t i = 0; i < v; ++i) dst[i] += k * p[i];
                        dst[tg[r]] -= k;
                      }
                    });
}

/// Identity on values, zero gradient. Participates in the detach tape.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  std::vector<T> v(x.data().begin(), x.data().end());
  visit_detached(v);
  return Tensor<T>::constant(x.shape(), std::move(v));
}

/// Index of the smallest entry in each row of an (N x K) matrix; ties go to
/// the lowest index. Not differentiable.
template <class T>
std::vector<std::size_t> argmin_rows(const Tensor<T>& x) {
  detail::require_rank("argmin_rows", x.shape(), 2);
  const std::size_t rows = x.dim(0), k = x.dim(1);
  if (k == 0) throw ContractError("argmin_rows: empty rows");
  std::vector<std::size_t> idx(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * k;
    idx[r] = static_cast<std::size_t>(std::min_element(row, row + k) - row);
  }
  visit_detached(idx);
  return idx;
}

}  // namespace dera

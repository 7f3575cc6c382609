// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "nadir/rng.hpp"
#include "nadir/tensor.hpp"

#ifdef NADIR_USE_CBLAS
#include <cblas.h>
#endif

namespace nadir::ops {

namespace detail {

template <typename T>
void gemm_naive(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A,
                const T* B, T beta, T* C) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        T av = ta ? A[p * m + i] : A[i * k + p];
        T bv = tb ? B[j * k + p] : B[p * n + j];
        acc += av * bv;
      }
      C[i * n + j] = beta * C[i * n + j] + acc;
    }
  }
}

// C[m,n] = beta*C + op(A)*op(B)
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B,
          T beta, T* C) {
#ifdef NADIR_USE_CBLAS
  const auto TA = ta ? CblasTrans : CblasNoTrans;
  const auto TB = tb ? CblasTrans : CblasNoTrans;
  const int lda = static_cast<int>(ta ? m : k);
  const int ldb = static_cast<int>(tb ? k : n);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, TA, TB, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0f, A, lda, B, ldb, beta, C, static_cast<int>(n));
    return;
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, TA, TB, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, A, lda, B, ldb, beta, C, static_cast<int>(n));
    return;
  }
#endif
  gemm_naive(ta, tb, m, n, k, A, B, beta, C);
}

template <typename T>
bool want_grad(const Graph<T>* g, bool any_rg) {
  return g != nullptr && any_rg;
}

inline std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// strides of `small` right-aligned against `big`, 0 where broadcast
inline std::vector<std::size_t> broadcast_strides(const Shape& big, const Shape& small) {
  if (small.size() > big.size())
    throw DimensionError("broadcast rank " + shape_str(small) + " exceeds " + shape_str(big));
  std::vector<std::size_t> st(big.size(), 0);
  auto sst = row_strides(small);
  std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] == big[off + i])
      st[off + i] = sst[i];
    else if (small[i] != 1)
      throw DimensionError("cannot broadcast " + shape_str(small) + " over " + shape_str(big));
  }
  return st;
}

}  // namespace detail

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!same_shape(a.shape(), b.shape()))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// matmul: a [*batch, m, k] x b [*batch, k, n] (or b [k, n], broadcast over
// the batch dims). Standard product; dL/da = dL/dc . b^T, dL/db = a^T . dL/dc.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  std::size_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  bool broadcast_b = (bs.size() == 2 && as.size() > 2);
  if (k != kb || (!broadcast_b && (as.size() != bs.size() ||
                                   !std::equal(as.begin(), as.end() - 2, bs.begin()))))
    throw DimensionError("matmul: shape mismatch " + shape_str(as) + " vs " + shape_str(bs));

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  Tensor<T> c = Tensor<T>::zeros(out_shape);
  std::size_t batch = numel(Shape(as.begin(), as.end() - 2));

  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = c.data().data();
  if (broadcast_b) {
    detail::gemm<T>(false, false, batch * m, n, k, ap, bp, T(0), cp);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::gemm<T>(false, false, m, n, k, ap + i * m * k, bp + i * k * n, T(0),
                      cp + i * m * n);
  }

  bool rg = a.requires_grad() || b.requires_grad();
  if (detail::want_grad(g, rg)) {
    c.set_requires_grad(true);
    Tensor<T> A = a, B = b, C = c;
    g->record([A, B, C, m, n, k, batch, broadcast_b]() mutable {
      const T* dC = C.grad().data();
      if (A.requires_grad()) {
        A.ensure_grad();
        T* dA = A.grad().data();
        if (broadcast_b) {
          detail::gemm<T>(false, true, batch * m, k, n, dC, B.data().data(), T(1), dA);
        } else {
          for (std::size_t i = 0; i < batch; ++i)
            detail::gemm<T>(false, true, m, k, n, dC + i * m * n, B.data().data() + i * k * n,
                            T(1), dA + i * m * k);
        }
      }
      if (B.requires_grad()) {
        B.ensure_grad();
        T* dB = B.grad().data();
        if (broadcast_b) {
          detail::gemm<T>(true, false, k, n, batch * m, A.data().data(), dC, T(1), dB);
        } else {
          for (std::size_t i = 0; i < batch; ++i)
            detail::gemm<T>(true, false, k, n, m, A.data().data() + i * m * k, dC + i * m * n,
                            T(1), dB + i * k * n);
        }
      }
    });
  }
  return c;
}

// a [*batch, m, k] x b^T where b is [*batch, n, k] (or [n, k] broadcast).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul_nt: need rank >= 2");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  std::size_t n = bs[bs.size() - 2], kb = bs[bs.size() - 1];
  bool broadcast_b = (bs.size() == 2 && as.size() > 2);
  if (k != kb || (!broadcast_b && (as.size() != bs.size() ||
                                   !std::equal(as.begin(), as.end() - 2, bs.begin()))))
    throw DimensionError("matmul_nt: shape mismatch " + shape_str(as) + " vs " + shape_str(bs));

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  Tensor<T> c = Tensor<T>::zeros(out_shape);
  std::size_t batch = numel(Shape(as.begin(), as.end() - 2));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = c.data().data();
  if (broadcast_b) {
    detail::gemm<T>(false, true, batch * m, n, k, ap, bp, T(0), cp);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::gemm<T>(false, true, m, n, k, ap + i * m * k, bp + i * n * k, T(0), cp + i * m * n);
  }

  bool rg = a.requires_grad() || b.requires_grad();
  if (detail::want_grad(g, rg)) {
    c.set_requires_grad(true);
    Tensor<T> A = a, B = b, C = c;
    g->record([A, B, C, m, n, k, batch, broadcast_b]() mutable {
      const T* dC = C.grad().data();
      if (A.requires_grad()) {
        A.ensure_grad();
        T* dA = A.grad().data();
        if (broadcast_b) {
          detail::gemm<T>(false, false, batch * m, k, n, dC, B.data().data(), T(1), dA);
        } else {
          for (std::size_t i = 0; i < batch; ++i)
            detail::gemm<T>(false, false, m, k, n, dC + i * m * n, B.data().data() + i * n * k,
                            T(1), dA + i * m * k);
        }
      }
      if (B.requires_grad()) {
        B.ensure_grad();
        T* dB = B.grad().data();
        if (broadcast_b) {
          detail::gemm<T>(true, false, n, k, batch * m, dC, A.data().data(), T(1), dB);
        } else {
          for (std::size_t i = 0; i < batch; ++i)
            detail::gemm<T>(true, false, n, k, m, dC + i * m * n, A.data().data() + i * m * k,
                            T(1), dB + i * n * k);
        }
      }
    });
  }
  return c;
}

// x [.., k] * w [k, n] + bias[n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Graph<T>* g = nullptr) {
  Tensor<T> y = matmul(x, w, g);
  if (!bias.defined()) return y;
  std::size_t n = w.dim(1);
  if (bias.size() != n)
    throw DimensionError("linear: bias size " + std::to_string(bias.size()) + " != " +
                         std::to_string(n));
  std::size_t rows = y.size() / n;
  T* yp = y.data().data();
  const T* bp = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) yp[r * n + j] += bp[j];
  if (detail::want_grad(g, bias.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> B = bias, Y = y;
    g->record([B, Y, rows, n]() mutable {
      B.ensure_grad();
      const T* dY = Y.grad().data();
      T* dB = B.grad().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) dB[j] += dY[r * n + j];
    });
  }
  return y;
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                             Bwd bwd, Graph<T>* g) {
  require_same_shape(a, b, name);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  if (want_grad(g, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> A = a, B = b, O = out;
    g->record([A, B, O, n, bwd]() mutable {
      const T* d = O.grad().data();
      if (A.requires_grad()) A.ensure_grad();
      if (B.requires_grad()) B.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        auto [da, db] = bwd(A.data()[i], B.data()[i], d[i]);
        if (A.requires_grad()) A.grad()[i] += da;
        if (B.requires_grad()) B.grad()[i] += db;
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  return detail::binary_elementwise(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T d) { return std::pair<T, T>(d, d); }, g);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  return detail::binary_elementwise(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T d) { return std::pair<T, T>(d, -d); }, g);
}

// hadamard
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  return detail::binary_elementwise(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T d) { return std::pair<T, T>(d * y, d * x); }, g);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c, Graph<T>* g = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i];
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O, c]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += c * O.grad()[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T c, Graph<T>* g = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] + c;
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += O.grad()[i];
    });
  }
  return out;
}

// x scaled by a 1-element tensor (lambda gating); grads flow to both.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s, Graph<T>* g = nullptr) {
  if (s.size() != 1) throw DimensionError("mul_scalar: scale must have 1 element");
  T sv = s.data()[0];
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = sv * x.data()[i];
  if (detail::want_grad(g, x.requires_grad() || s.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, S = s, O = out;
    g->record([X, S, O, sv]() mutable {
      const T* d = O.grad().data();
      if (X.requires_grad()) {
        X.ensure_grad();
        for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += sv * d[i];
      }
      if (S.requires_grad()) {
        S.ensure_grad();
        T acc = 0;
        for (std::size_t i = 0; i < X.size(); ++i) acc += X.data()[i] * d[i];
        S.grad()[0] += acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x, Graph<T>* g = nullptr) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::exp(x.data()[i]);
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += O.data()[i] * O.grad()[i];
    });
  }
  return out;
}

namespace detail {
template <typename T>
inline constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
inline constexpr T kGeluA = T(0.044715);
}  // namespace detail

// tanh-approximation GELU (constant 0.044715).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x, Graph<T>* g = nullptr) {
  const T kC = detail::kGeluC<T>, kA = detail::kGeluA<T>;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    T v = x.data()[i];
    T u = kC * (v + kA * v * v * v);
    out.data()[i] = T(0.5) * v * (T(1) + std::tanh(u));
  }
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O]() mutable {
      const T kC = detail::kGeluC<T>, kA = detail::kGeluA<T>;
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i) {
        T v = X.data()[i];
        T u = kC * (v + kA * v * v * v);
        T th = std::tanh(u);
        T dudx = kC * (T(1) + T(3) * kA * v * v);
        T dy = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dudx;
        X.grad()[i] += dy * O.grad()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, Graph<T>* g = nullptr) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O]() mutable {
      X.ensure_grad();
      T d = O.grad()[0];
      for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += d;
    });
  }
  return out;
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b, Graph<T>* g = nullptr) {
  return sum(mul(a, b, g), g);
}

namespace detail {

template <typename T>
std::vector<T> permute_copy(const Shape& in_shape, const std::vector<std::size_t>& perm,
                            const std::vector<T>& src) {
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  auto in_st = row_strides(in_shape);
  auto out_st = row_strides(out_shape);
  std::vector<T> dst(src.size());
  std::vector<std::size_t> idx(perm.size(), 0);
  const std::size_t n = src.size();
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t rem = o, src_off = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) {
      std::size_t id = rem / out_st[d];
      rem %= out_st[d];
      src_off += id * in_st[perm[d]];
    }
    dst[o] = src[src_off];
  }
  return dst;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm, Graph<T>* g = nullptr) {
  if (perm.size() != x.rank()) throw DimensionError("permute: axes rank mismatch");
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.shape()[perm[i]];
  Tensor<T> out = Tensor<T>::from(out_shape, detail::permute_copy(x.shape(), perm, x.data()));
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    Tensor<T> X = x, O = out;
    Shape oshape = out_shape;
    g->record([X, O, inv, oshape]() mutable {
      X.ensure_grad();
      auto dg = detail::permute_copy(oshape, inv, O.grad());
      for (std::size_t i = 0; i < dg.size(); ++i) X.grad()[i] += dg[i];
    });
  }
  return out;
}

// transpose of the last two dims
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, Graph<T>* g = nullptr) {
  if (x.rank() < 2) throw DimensionError("transpose: need rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm, g);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape, Graph<T>* g = nullptr) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += O.grad()[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::size_t start, std::size_t len,
                        Graph<T>* g = nullptr) {
  std::size_t last = x.shape().back();
  if (start + len > last) throw DimensionError("slice_lastdim: out of range");
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::size_t rows = x.size() / last;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * last + start, len, out.data().data() + r * len);
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O, rows, last, start, len]() mutable {
      X.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j)
          X.grad()[r * last + start + j] += O.grad()[r * len + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts, Graph<T>* g = nullptr) {
  if (parts.empty()) throw DimensionError("concat_lastdim: empty input");
  Shape base = parts[0].shape();
  std::size_t total_last = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != base.size() ||
        !std::equal(base.begin(), base.end() - 1, p.shape().begin()))
      throw DimensionError("concat_lastdim: incompatible shapes");
    total_last += p.shape().back();
    rg = rg || p.requires_grad();
  }
  Shape out_shape = base;
  out_shape.back() = total_last;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::size_t rows = numel(out_shape) / total_last;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::size_t len = p.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * len, len, out.data().data() + r * total_last + off);
    off += len;
  }
  if (detail::want_grad(g, rg)) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> ps = parts;
    Tensor<T> O = out;
    g->record([ps, O, rows, total_last]() mutable {
      std::size_t off = 0;
      for (auto& p : ps) {
        std::size_t len = p.shape().back();
        if (p.requires_grad()) {
          p.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j)
              p.grad()[r * len + j] += O.grad()[r * total_last + off + j];
        }
        off += len;
      }
    });
  }
  return out;
}

// table [V, d] rows selected by ids; grad scatter-adds into the table.
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, const std::vector<std::int32_t>& ids,
                           Shape prefix_shape, Graph<T>* g = nullptr) {
  if (table.rank() != 2) throw DimensionError("embedding_gather: table must be [V, d]");
  if (numel(prefix_shape) != ids.size())
    throw DimensionError("embedding_gather: ids length does not match prefix shape");
  std::size_t V = table.dim(0), d = table.dim(1);
  Shape out_shape = prefix_shape;
  out_shape.push_back(d);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::int32_t id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw std::out_of_range("embedding_gather: id " + std::to_string(id) +
                              " out of range for vocab " + std::to_string(V));
    std::copy_n(table.data().data() + static_cast<std::size_t>(id) * d, d,
                out.data().data() + i * d);
  }
  if (detail::want_grad(g, table.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> Tb = table, O = out;
    std::vector<std::int32_t> idv = ids;
    g->record([Tb, O, idv, d]() mutable {
      Tb.ensure_grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        T* dst = Tb.grad().data() + static_cast<std::size_t>(idv[i]) * d;
        const T* src = O.grad().data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// x [N, rest] -> rows idx; grad scatter-adds back.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx,
                      Graph<T>* g = nullptr) {
  if (x.rank() < 1) throw DimensionError("gather_rows: need rank >= 1");
  std::size_t N = x.dim(0), stride = x.size() / std::max<std::size_t>(N, 1);
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= N) throw std::out_of_range("gather_rows: row out of range");
    std::copy_n(x.data().data() + idx[i] * stride, stride, out.data().data() + i * stride);
  }
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    std::vector<std::size_t> iv = idx;
    g->record([X, O, iv, stride]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < iv.size(); ++i) {
        T* dst = X.grad().data() + iv[i] * stride;
        const T* src = O.grad().data() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// out = base; out[idx[i], :] += x[i, :]
template <typename T>
Tensor<T> scatter_rows_add(const Tensor<T>& base, const Tensor<T>& x,
                           const std::vector<std::size_t>& idx, Graph<T>* g = nullptr) {
  std::size_t N = base.dim(0), stride = base.size() / std::max<std::size_t>(N, 1);
  if (x.dim(0) != idx.size() || x.size() != idx.size() * stride)
    throw DimensionError("scatter_rows_add: shape mismatch");
  Tensor<T> out = Tensor<T>::from(base.shape(), base.data());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= N) throw std::out_of_range("scatter_rows_add: row out of range");
    T* dst = out.data().data() + idx[i] * stride;
    const T* src = x.data().data() + i * stride;
    for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
  }
  if (detail::want_grad(g, base.requires_grad() || x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> B = base, X = x, O = out;
    std::vector<std::size_t> iv = idx;
    g->record([B, X, O, iv, stride]() mutable {
      if (B.requires_grad()) {
        B.ensure_grad();
        for (std::size_t i = 0; i < B.size(); ++i) B.grad()[i] += O.grad()[i];
      }
      if (X.requires_grad()) {
        X.ensure_grad();
        for (std::size_t i = 0; i < iv.size(); ++i) {
          const T* src = O.grad().data() + iv[i] * stride;
          T* dst = X.grad().data() + i * stride;
          for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// x [N, d] with per-row weights w [N]
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w, Graph<T>* g = nullptr) {
  std::size_t N = x.dim(0), stride = x.size() / std::max<std::size_t>(N, 1);
  if (w.size() != N) throw DimensionError("scale_rows: weight length mismatch");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < stride; ++j)
      out.data()[i * stride + j] = w.data()[i] * x.data()[i * stride + j];
  if (detail::want_grad(g, x.requires_grad() || w.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, W = w, O = out;
    g->record([X, W, O, N, stride]() mutable {
      if (X.requires_grad()) {
        X.ensure_grad();
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < stride; ++j)
            X.grad()[i * stride + j] += W.data()[i] * O.grad()[i * stride + j];
      }
      if (W.requires_grad()) {
        W.ensure_grad();
        for (std::size_t i = 0; i < N; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < stride; ++j)
            acc += X.data()[i * stride + j] * O.grad()[i * stride + j];
          W.grad()[i] += acc;
        }
      }
    });
  }
  return out;
}

// out[k] = x[rows[k], cols[k]] for a [N, M] tensor (gate probability picks).
template <typename T>
Tensor<T> gather_elems(const Tensor<T>& x, const std::vector<std::size_t>& rows,
                       const std::vector<std::size_t>& cols, Graph<T>* g = nullptr) {
  if (x.rank() != 2 || rows.size() != cols.size())
    throw DimensionError("gather_elems: expects [N, M] tensor and equal index lists");
  std::size_t M = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({rows.size()});
  for (std::size_t k = 0; k < rows.size(); ++k)
    out.data()[k] = x.data()[rows[k] * M + cols[k]];
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    std::vector<std::size_t> rv = rows, cv = cols;
    g->record([X, O, rv, cv, M]() mutable {
      X.ensure_grad();
      for (std::size_t k = 0; k < rv.size(); ++k)
        X.grad()[rv[k] * M + cv[k]] += O.grad()[k];
    });
  }
  return out;
}

// Numerically-stabilized softmax over the last dimension. Mask entries set
// to true are excluded and come out exactly 0; a fully-masked row is a
// caller bug and raises.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, const BoolTensor* mask = nullptr,
                          Graph<T>* g = nullptr) {
  std::size_t last = x.rank() ? x.shape().back() : 1;
  std::size_t rows = x.size() / last;
  std::vector<std::size_t> mst;
  if (mask) mst = detail::broadcast_strides(x.shape(), mask->shape);
  auto xst = detail::row_strides(x.shape());

  auto mask_at = [&](std::size_t flat) -> bool {
    if (!mask) return false;
    std::size_t rem = flat, off = 0;
    for (std::size_t d = 0; d < xst.size(); ++d) {
      std::size_t id = rem / xst[d];
      rem %= xst[d];
      off += id * mst[d];
    }
    return mask->v[off] != 0;
  };

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x.data().data() + r * last;
    T* op = out.data().data() + r * last;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < last; ++j) {
      if (mask_at(r * last + j)) continue;
      any = true;
      mx = std::max(mx, xp[j]);
    }
    if (!any) throw InvariantError("softmax_lastdim: fully-masked row " + std::to_string(r));
    T denom = 0;
    for (std::size_t j = 0; j < last; ++j) {
      if (mask_at(r * last + j)) {
        op[j] = 0;
      } else {
        op[j] = std::exp(xp[j] - mx);
        denom += op[j];
      }
    }
    for (std::size_t j = 0; j < last; ++j) op[j] /= denom;
  }
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O, rows, last]() mutable {
      X.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = O.data().data() + r * last;
        const T* dy = O.grad().data() + r * last;
        T* dx = X.grad().data() + r * last;
        T inner = 0;
        for (std::size_t j = 0; j < last; ++j) inner += y[j] * dy[j];
        for (std::size_t j = 0; j < last; ++j) dx[j] += y[j] * (dy[j] - inner);
      }
    });
  }
  return out;
}

// out = x / sqrt(mean(x^2) + eps) * gain over the last dimension.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6),
                  Graph<T>* g = nullptr) {
  std::size_t d = x.rank() ? x.shape().back() : 1;
  if (gain.size() != d)
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match last dim " +
                         std::to_string(d));
  if (eps <= T(0)) throw ConfigError("rmsnorm: eps must be positive");
  std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x.data().data() + r * d;
    T ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += xp[j] * xp[j];
    ms = ms / static_cast<T>(d) + eps;
    T inv = T(1) / std::sqrt(ms);
    inv_rms[r] = inv;
    T* op = out.data().data() + r * d;
    for (std::size_t j = 0; j < d; ++j) op[j] = xp[j] * inv * gain.data()[j];
  }
  if (detail::want_grad(g, x.requires_grad() || gain.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, Gn = gain, O = out;
    g->record([X, Gn, O, rows, d, inv_rms]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xp = X.data().data() + r * d;
        const T* dy = O.grad().data() + r * d;
        T inv = inv_rms[r];
        if (Gn.requires_grad()) {
          Gn.ensure_grad();
          for (std::size_t j = 0; j < d; ++j) Gn.grad()[j] += dy[j] * xp[j] * inv;
        }
        if (X.requires_grad()) {
          X.ensure_grad();
          T* dx = X.grad().data() + r * d;
          T inner = 0;  // sum_i dy_i * g_i * x_i
          for (std::size_t j = 0; j < d; ++j) inner += dy[j] * Gn.data()[j] * xp[j];
          T c = inner * inv * inv * inv / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) dx[j] += dy[j] * Gn.data()[j] * inv - xp[j] * c;
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng, Graph<T>* g = nullptr) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) {
    Tensor<T> out = Tensor<T>::from(x.shape(), x.data());
    if (detail::want_grad(g, x.requires_grad())) {
      out.set_requires_grad(true);
      Tensor<T> X = x, O = out;
      g->record([X, O]() mutable {
        X.ensure_grad();
        for (std::size_t i = 0; i < X.size(); ++i) X.grad()[i] += O.grad()[i];
      });
    }
    return out;
  }
  T keep_scale = T(1.0 / (1.0 - p));
  std::vector<std::uint8_t> keep(x.size());
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    keep[i] = rng.uniform() >= p ? 1 : 0;
    out.data()[i] = keep[i] ? x.data()[i] * keep_scale : T(0);
  }
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O, keep, keep_scale]() mutable {
      X.ensure_grad();
      for (std::size_t i = 0; i < X.size(); ++i)
        if (keep[i]) X.grad()[i] += keep_scale * O.grad()[i];
    });
  }
  return out;
}

// Per-row -log softmax(logits)[target], computed in log space.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                               Graph<T>* g = nullptr) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy_logits: logits must be [N, V]");
  std::size_t N = logits.dim(0), V = logits.dim(1);
  if (targets.size() != N)
    throw DimensionError("cross_entropy_logits: target count mismatch");
  Tensor<T> out = Tensor<T>::zeros({N});
  for (std::size_t r = 0; r < N; ++r) {
    std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw std::out_of_range("cross_entropy_logits: target " + std::to_string(t) +
                              " out of range for vocab " + std::to_string(V));
    const T* xp = logits.data().data() + r * V;
    T mx = xp[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, xp[j]);
    T lse = 0;
    for (std::size_t j = 0; j < V; ++j) lse += std::exp(xp[j] - mx);
    out.data()[r] = mx + std::log(lse) - xp[static_cast<std::size_t>(t)];
  }
  if (detail::want_grad(g, logits.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = logits, O = out;
    std::vector<std::int32_t> tv = targets;
    g->record([X, O, tv, N, V]() mutable {
      X.ensure_grad();
      for (std::size_t r = 0; r < N; ++r) {
        const T* xp = X.data().data() + r * V;
        T* dx = X.grad().data() + r * V;
        T d = O.grad()[r];
        if (d == T(0)) continue;
        T mx = xp[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, xp[j]);
        T denom = 0;
        for (std::size_t j = 0; j < V; ++j) denom += std::exp(xp[j] - mx);
        for (std::size_t j = 0; j < V; ++j) {
          T sm = std::exp(xp[j] - mx) / denom;
          dx[j] += d * (sm - (static_cast<std::size_t>(tv[r]) == j ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

// Rotary embedding over the last dim; dim -2 indexes positions. Rotation
// preserves norms, so the backward pass is the inverse rotation.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<std::size_t>& positions,
               Graph<T>* g = nullptr, double base = 10000.0) {
  if (x.rank() < 2) throw DimensionError("rope: need rank >= 2");
  std::size_t dh = x.shape().back();
  std::size_t Tn = x.shape()[x.rank() - 2];
  if (dh % 2 != 0) throw ConfigError("rope: head dim must be even, got " + std::to_string(dh));
  if (positions.size() != Tn) throw DimensionError("rope: positions length mismatch");
  std::size_t half = dh / 2;
  // cos/sin table [T, dh/2]
  std::vector<T> cs(Tn * half), sn(Tn * half);
  for (std::size_t t = 0; t < Tn; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      double theta = static_cast<double>(positions[t]) *
                     std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cs[t * half + i] = static_cast<T>(std::cos(theta));
      sn[t * half + i] = static_cast<T>(std::sin(theta));
    }
  }
  std::size_t outer = x.size() / (Tn * dh);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < Tn; ++t) {
      const T* xp = x.data().data() + (o * Tn + t) * dh;
      T* op = out.data().data() + (o * Tn + t) * dh;
      for (std::size_t i = 0; i < half; ++i) {
        T c = cs[t * half + i], s = sn[t * half + i];
        T x0 = xp[2 * i], x1 = xp[2 * i + 1];
        op[2 * i] = c * x0 - s * x1;
        op[2 * i + 1] = s * x0 + c * x1;
      }
    }
  }
  if (detail::want_grad(g, x.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> X = x, O = out;
    g->record([X, O, cs, sn, outer, Tn, dh, half]() mutable {
      X.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t t = 0; t < Tn; ++t) {
          const T* dy = O.grad().data() + (o * Tn + t) * dh;
          T* dx = X.grad().data() + (o * Tn + t) * dh;
          for (std::size_t i = 0; i < half; ++i) {
            T c = cs[t * half + i], s = sn[t * half + i];
            dx[2 * i] += c * dy[2 * i] + s * dy[2 * i + 1];
            dx[2 * i + 1] += -s * dy[2 * i] + c * dy[2 * i + 1];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
std::vector<std::int32_t> argmax_lastdim(const Tensor<T>& x) {
  std::size_t last = x.shape().back();
  std::size_t rows = x.size() / last;
  std::vector<std::int32_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xp = x.data().data() + r * last;
    std::size_t best = 0;
    for (std::size_t j = 1; j < last; ++j)
      if (xp[j] > xp[best]) best = j;
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename T>
void check_finite(const Tensor<T>& x, const std::string& what) {
  for (T v : x.data())
    if (!std::isfinite(v)) throw InvariantError("non-finite value in " + what);
}

}  // namespace nadir::ops

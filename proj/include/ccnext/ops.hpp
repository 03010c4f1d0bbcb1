#pragma once

// Differentiable element-wise, broadcasting, reduction and layout ops.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "ccnext/tensor.hpp"

namespace ccnext {

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.vec();
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(y), {x}, [df](Node<T>& self) {
    auto& p = self.parents[0];
    if (!wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p->value[i], self.value[i]);
  });
}

// Strides of `in` laid against `out` with zeros on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) st[off + i] = acc;
    acc *= static_cast<std::size_t>(in[i]);
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b) +
                       " at dim " + std::to_string(i));
    out[i] = std::max(da, db);
  }
  return out;
}

// Visits every output element with its flat offsets into a and b.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = numel(out);
  if (r == 0) {
    if (total) f(0, 0, 0);
    return;
  }
  std::vector<int> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const int inner = out[r - 1];
  for (std::size_t o = 0; o < total;) {
    for (int k = 0; k < inner; ++k, ++o) f(o, ia + k * sa[r - 1], ib + k * sb[r - 1]);
    // carry into outer axes
    for (std::size_t d = r - 1; d-- > 0;) {
      ia += sa[d];
      ib += sb[d];
      if (++idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  const auto& av = a.vec();
  const auto& bv = b.vec();
  if (a.shape() == b.shape()) {
    std::vector<T> y(av.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
    return make_result<T>(a.shape(), std::move(y), {a, b}, [da, db](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (wants_grad(pa)) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * da(pa->value[i], pb->value[i]);
      }
      if (wants_grad(pb)) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * db(pa->value[i], pb->value[i]);
      }
    });
  }
  Shape out = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<T> y(numel(out));
  for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = f(av[ia], bv[ib]); });
  return make_result<T>(out, std::move(y), {a, b}, [da, db, out, sa, sb](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const bool ga = wants_grad(pa), gb = wants_grad(pb);
    T* gA = ga ? pa->grad_buffer().data() : nullptr;
    T* gB = gb ? pb->grad_buffer().data() : nullptr;
    for_each_broadcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const T x = pa->value[ia], z = pb->value[ib];
      if (ga) gA[ia] += self.grad[o] * da(x, z);
      if (gb) gB[ib] += self.grad[o] * db(x, z);
    });
  });
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                        [](T x, T) { return x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                        [](T x, T y) { return -x / (y * y); });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// y = scale * x + shift
template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift = T(0)) {
  return detail::unary(x, [=](T v) { return scale * v + shift; }, [=](T, T) { return scale; });
}
template <class T> Tensor<T> operator*(const Tensor<T>& x, T s) { return affine(x, s); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& x) { return affine(x, s); }
template <class T> Tensor<T> operator+(const Tensor<T>& x, T s) { return affine(x, T(1), s); }
template <class T> Tensor<T> operator-(const Tensor<T>& x) { return affine(x, T(-1)); }

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}
template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}
/// Subgradient 0 at the origin.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::abs(v); },
                       [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// ---------------------------------------------------------- nonlinearities

enum class Activation { gelu, sigmoid, elu };

template <class T>
T sigmoid_scalar(T v) {
  const T y = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  // keep the open interval in finite precision
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  return std::clamp(y, lo, hi);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <class T>
Tensor<T> elu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : std::expm1(v); },
                       [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
}

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation kind) {
  switch (kind) {
    case Activation::gelu: return gelu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::elu: return elu(x);
  }
  throw Error("activate: unknown activation");
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.vec()) s += v;
  return detail::make_result<T>(Shape{}, {s}, {x}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (auto& e : g) e += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return affine(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Mean over the listed axes, keeping them as size-1 extents.
template <class T>
Tensor<T> mean_dims(const Tensor<T>& x, std::vector<int> axes) {
  Shape out = x.shape();
  std::size_t count = 1;
  for (int a : axes) {
    if (a < 0 || a >= x.rank()) throw ShapeError("mean_dims: axis " + std::to_string(a) + " out of range");
    count *= static_cast<std::size_t>(out[a]);
    out[a] = 1;
  }
  auto so = detail::broadcast_strides(out, x.shape());
  std::vector<std::size_t> zero(x.shape().size(), 0);
  std::vector<T> y(numel(out), T(0));
  const auto& xv = x.vec();
  detail::for_each_broadcast(x.shape(), so, zero, [&](std::size_t i, std::size_t o, std::size_t) { y[o] += xv[i]; });
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : y) v *= inv;
  Shape in_shape = x.shape();
  return detail::make_result<T>(out, std::move(y), {x}, [in_shape, so, zero, inv](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    detail::for_each_broadcast(in_shape, so, zero,
                               [&](std::size_t i, std::size_t o, std::size_t) { g[i] += self.grad[o] * inv; });
  });
}

// -------------------------------------------------------------------- layout

/// Contiguous sub-range [start, start+length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.rank() || start < 0 || length < 0 || start + length > s[axis])
    throw ShapeError("slice: bad range on axis " + std::to_string(axis) + " of " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  Shape out = s;
  out[axis] = length;
  std::vector<T> y(numel(out));
  const auto& xv = x.vec();
  const std::size_t full = static_cast<std::size_t>(s[axis]);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * full + start) * inner, length * inner, y.begin() + o * length * inner);
  return detail::make_result<T>(out, std::move(y), {x}, [=](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < static_cast<std::size_t>(length) * inner; ++k)
        g[(o * full + start) * inner + k] += self.grad[o * length * inner + k];
  });
}

/// Concatenation along the channel axis of 4-D tensors.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: " + to_string(sa) + " vs " + to_string(sb));
  const std::size_t n = sa[0], hw = static_cast<std::size_t>(sa[2]) * sa[3];
  const std::size_t ca = sa[1] * hw, cb = sb[1] * hw;
  std::vector<T> y(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.vec().begin() + i * ca, ca, y.begin() + i * (ca + cb));
    std::copy_n(b.vec().begin() + i * cb, cb, y.begin() + i * (ca + cb) + ca);
  }
  return detail::make_result<T>(Shape{sa[0], sa[1] + sb[1], sa[2], sa[3]}, std::move(y), {a, b},
                                [=](detail::Node<T>& self) {
                                  auto& pa = self.parents[0];
                                  auto& pb = self.parents[1];
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const T* src = self.grad.data() + i * (ca + cb);
                                    if (detail::wants_grad(pa)) {
                                      T* g = pa->grad_buffer().data() + i * ca;
                                      for (std::size_t k = 0; k < ca; ++k) g[k] += src[k];
                                    }
                                    if (detail::wants_grad(pb)) {
                                      T* g = pb->grad_buffer().data() + i * cb;
                                      for (std::size_t k = 0; k < cb; ++k) g[k] += src[ca + k];
                                    }
                                  }
                                });
}

/// Axis permutation of a 4-D tensor: out.shape[i] = in.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::array<int, 4> perm) {
  if (x.rank() != 4) throw ShapeError("permute: expects rank 4, got " + to_string(x.shape()));
  const Shape& s = x.shape();
  std::array<std::size_t, 4> in_stride{static_cast<std::size_t>(s[1]) * s[2] * s[3],
                                       static_cast<std::size_t>(s[2]) * s[3], static_cast<std::size_t>(s[3]), 1};
  Shape out{s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]};
  std::array<std::size_t, 4> st{in_stride[perm[0]], in_stride[perm[1]], in_stride[perm[2]], in_stride[perm[3]]};
  std::vector<std::size_t> map(x.size());
  std::size_t o = 0;
  for (int i = 0; i < out[0]; ++i)
    for (int j = 0; j < out[1]; ++j)
      for (int k = 0; k < out[2]; ++k)
        for (int l = 0; l < out[3]; ++l) map[o++] = i * st[0] + j * st[1] + k * st[2] + l * st[3];
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.vec()[map[i]];
  return detail::make_result<T>(out, std::move(y), {x}, [map = std::move(map)](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
  });
}

/// Batched matrix product over the last two axes of rank-4 tensors:
/// (B0,B1,M,K) x (B0,B1,K,N) -> (B0,B1,M,N).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2])
    throw ShapeError("matmul: " + to_string(sa) + " x " + to_string(sb));
  const int batches = sa[0] * sa[1], M = sa[2], K = sa[3], N = sb[3];
  std::vector<T> y(static_cast<std::size_t>(batches) * M * N, T(0));
  for (int bt = 0; bt < batches; ++bt) {
    const T* A = a.vec().data() + static_cast<std::size_t>(bt) * M * K;
    const T* B = b.vec().data() + static_cast<std::size_t>(bt) * K * N;
    T* C = y.data() + static_cast<std::size_t>(bt) * M * N;
    for (int i = 0; i < M; ++i)
      for (int k = 0; k < K; ++k) {
        const T av = A[i * K + k];
        for (int j = 0; j < N; ++j) C[i * N + j] += av * B[k * N + j];
      }
  }
  return detail::make_result<T>(Shape{sa[0], sa[1], M, N}, std::move(y), {a, b}, [=](detail::Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (int bt = 0; bt < batches; ++bt) {
      const T* G = self.grad.data() + static_cast<std::size_t>(bt) * M * N;
      const T* A = pa->value.data() + static_cast<std::size_t>(bt) * M * K;
      const T* B = pb->value.data() + static_cast<std::size_t>(bt) * K * N;
      if (detail::wants_grad(pa)) {
        T* gA = pa->grad_buffer().data() + static_cast<std::size_t>(bt) * M * K;
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            T s = 0;
            for (int j = 0; j < N; ++j) s += G[i * N + j] * B[k * N + j];
            gA[i * K + k] += s;
          }
      }
      if (detail::wants_grad(pb)) {
        T* gB = pb->grad_buffer().data() + static_cast<std::size_t>(bt) * K * N;
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            const T av = A[i * K + k];
            for (int j = 0; j < N; ++j) gB[k * N + j] += av * G[i * N + j];
          }
      }
    }
  });
}

/// Softmax over the last axis, stabilised by max subtraction.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
  const std::size_t n = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = n ? x.size() / n : 0;
  std::vector<T> y(x.size());
  const auto& xv = x.vec();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* out = y.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
  }
  return detail::make_result<T>(x.shape(), std::move(y), {x}, [n, rows](detail::Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants_grad(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = self.value.data() + r * n;
      const T* gy = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yv[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yv[j] * (gy[j] - dot);
    }
  });
}

// ----------------------------------------------------------------- resampling

template <class T>
Tensor<T> upsample_nearest_2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest_2x: expects (N,C,H,W), got " + to_string(x.shape()));
  const int planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> y(x.size() * 4);
  const auto& xv = x.vec();
  for (int p = 0; p < planes; ++p)
    for (int h = 0; h < 2 * H; ++h)
      for (int w = 0; w < 2 * W; ++w)
        y[(static_cast<std::size_t>(p) * 2 * H + h) * 2 * W + w] = xv[(static_cast<std::size_t>(p) * H + h / 2) * W + w / 2];
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(y), {x},
                                [=](detail::Node<T>& self) {
                                  auto& pr = self.parents[0];
                                  if (!detail::wants_grad(pr)) return;
                                  auto& g = pr->grad_buffer();
                                  for (int p = 0; p < planes; ++p)
                                    for (int h = 0; h < 2 * H; ++h)
                                      for (int w = 0; w < 2 * W; ++w)
                                        g[(static_cast<std::size_t>(p) * H + h / 2) * W + w / 2] +=
                                            self.grad[(static_cast<std::size_t>(p) * 2 * H + h) * 2 * W + w];
                                });
}

/// Bilinear resize to (out_h, out_w) with half-pixel centres (align_corners = false).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ShapeError("resize_bilinear: expects (N,C,H,W), got " + to_string(x.shape()));
  const int planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return x;
  struct Tap {
    int i0, i1;
    T w1;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const T scale = static_cast<T>(in) / static_cast<T>(out);
    for (int o = 0; o < out; ++o) {
      T src = std::max(T(0), (static_cast<T>(o) + T(0.5)) * scale - T(0.5));
      int i0 = std::min(static_cast<int>(src), in - 1);
      int i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<T>(i0)};
    }
    return t;
  };
  auto ty = taps(H, out_h), tx = taps(W, out_w);
  std::vector<T> y(static_cast<std::size_t>(planes) * out_h * out_w);
  const auto& xv = x.vec();
  for (int p = 0; p < planes; ++p) {
    const T* src = xv.data() + static_cast<std::size_t>(p) * H * W;
    T* dst = y.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[ox];
        const T top = src[a.i0 * W + b.i0] * (T(1) - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        const T bot = src[a.i1 * W + b.i0] * (T(1) - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        dst[oy * out_w + ox] = top * (T(1) - a.w1) + bot * a.w1;
      }
    }
  }
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(y), {x},
                                [=](detail::Node<T>& self) {
                                  auto& pr = self.parents[0];
                                  if (!detail::wants_grad(pr)) return;
                                  auto& g = pr->grad_buffer();
                                  for (int p = 0; p < planes; ++p) {
                                    T* gs = g.data() + static_cast<std::size_t>(p) * H * W;
                                    const T* gd = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
                                    for (int oy = 0; oy < out_h; ++oy) {
                                      const Tap& a = ty[oy];
                                      for (int ox = 0; ox < out_w; ++ox) {
                                        const Tap& b = tx[ox];
                                        const T v = gd[oy * out_w + ox];
                                        gs[a.i0 * W + b.i0] += v * (T(1) - a.w1) * (T(1) - b.w1);
                                        gs[a.i0 * W + b.i1] += v * (T(1) - a.w1) * b.w1;
                                        gs[a.i1 * W + b.i0] += v * a.w1 * (T(1) - b.w1);
                                        gs[a.i1 * W + b.i1] += v * a.w1 * b.w1;
                                      }
                                    }
                                  }
                                });
}

/// 3x3 box mean, stride 1, reflect padding (edge sample not repeated).
template <class T>
Tensor<T> avg_pool3x3_reflect(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("avg_pool3x3_reflect: expects (N,C,H,W), got " + to_string(x.shape()));
  const int planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 2 || W < 2) throw ShapeError("avg_pool3x3_reflect: reflect padding needs H,W >= 2");
  auto refl = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  std::vector<T> y(x.size());
  const auto& xv = x.vec();
  constexpr T ninth = T(1) / T(9);
  for (int p = 0; p < planes; ++p) {
    const T* src = xv.data() + static_cast<std::size_t>(p) * H * W;
    T* dst = y.data() + static_cast<std::size_t>(p) * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        T s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) s += src[refl(h + dy, H) * W + refl(w + dx, W)];
        dst[h * W + w] = s * ninth;
      }
  }
  return detail::make_result<T>(x.shape(), std::move(y), {x}, [=](detail::Node<T>& self) {
    auto& pr = self.parents[0];
    if (!detail::wants_grad(pr)) return;
    auto& g = pr->grad_buffer();
    for (int p = 0; p < planes; ++p) {
      T* gs = g.data() + static_cast<std::size_t>(p) * H * W;
      const T* gd = self.grad.data() + static_cast<std::size_t>(p) * H * W;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const T v = gd[h * W + w] * ninth;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) gs[refl(h + dy, H) * W + refl(w + dx, W)] += v;
        }
    }
  });
}

// ---------------------------------------------------------------- utilities

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.vec().begin(), x.vec().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace ccnext

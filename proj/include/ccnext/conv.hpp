#pragma once

// 2-D convolution (cross-correlation) with groups, zero padding and stride.
// Dense groups go through im2col + GEMM; depthwise runs direct loops.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include <optional>

#include "ccnext/parallel.hpp"
#include "ccnext/tensor.hpp"

namespace ccnext {

struct ConvGeometry {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad, groups;
  int ho, wo;

  int cin_g() const { return cin / groups; }
  int cout_g() const { return cout / groups; }
  std::size_t patch() const { return static_cast<std::size_t>(cin_g()) * kh * kw; }
  std::size_t pixels() const { return static_cast<std::size_t>(ho) * wo; }
  bool depthwise() const { return groups == cin && cout == cin && groups > 1; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

inline ConvGeometry conv_geometry(const Shape& in, const Shape& wt, int stride, int pad, int groups) {
  if (in.size() != 4) throw ShapeError("conv2d: input must be (N,Cin,H,W), got " + to_string(in));
  if (wt.size() != 4) throw ShapeError("conv2d: weight must be (Cout,Cin/groups,kh,kw), got " + to_string(wt));
  if (groups < 1 || in[1] % groups != 0)
    throw ShapeError("conv2d: Cin=" + std::to_string(in[1]) + " not divisible by groups=" + std::to_string(groups));
  if (wt[0] % groups != 0)
    throw ShapeError("conv2d: Cout=" + std::to_string(wt[0]) + " not divisible by groups=" + std::to_string(groups));
  if (wt[1] != in[1] / groups)
    throw ShapeError("conv2d: weight dim 1 (Cin/groups) is " + std::to_string(wt[1]) + ", expected " +
                     std::to_string(in[1] / groups));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
  ConvGeometry g{in[0], in[1], in[2], in[3], wt[0], wt[2], wt[3], stride, pad, groups, 0, 0};
  const int eh = g.h + 2 * pad - g.kh, ew = g.w + 2 * pad - g.kw;
  if (eh < 0) throw ShapeError("conv2d: kernel height " + std::to_string(g.kh) + " exceeds padded input height");
  if (ew < 0) throw ShapeError("conv2d: kernel width " + std::to_string(g.kw) + " exceeds padded input width");
  g.ho = eh / stride + 1;
  g.wo = ew / stride + 1;
  return g;
}

// cols: (cin_g*kh*kw) x (ho*wo), row-major.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.pixels();
  for (int c = 0; c < g.cin_g(); ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * P;
        const T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t P = g.pixels();
  for (int c = 0; c < g.cin_g(); ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * P;
        T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

template <class T>
void depthwise_forward(const T* in, const T* wt, const ConvGeometry& g, T* out) {
  for (int c = 0; c < g.cin; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * g.h * g.w;
    const T* k = wt + static_cast<std::size_t>(c) * g.kh * g.kw;
    T* o = out + static_cast<std::size_t>(c) * g.pixels();
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        T s = 0;
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) s += plane[iy * g.w + ix] * k[ky * g.kw + kx];
          }
        }
        o[oy * g.wo + ox] = s;
      }
  }
}

template <class T>
void depthwise_backward(const T* in, const T* wt, const T* gout, const ConvGeometry& g, T* gin, T* gwt) {
  for (int c = 0; c < g.cin; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * g.h * g.w;
    const T* k = wt + static_cast<std::size_t>(c) * g.kh * g.kw;
    const T* go = gout + static_cast<std::size_t>(c) * g.pixels();
    T* gi = gin ? gin + static_cast<std::size_t>(c) * g.h * g.w : nullptr;
    T* gk = gwt ? gwt + static_cast<std::size_t>(c) * g.kh * g.kw : nullptr;
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        const T v = go[oy * g.wo + ox];
        for (int ky = 0; ky < g.kh; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.kw; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            if (gi) gi[iy * g.w + ix] += v * k[ky * g.kw + kx];
            if (gk) gk[ky * g.kw + kx] += v * plane[iy * g.w + ix];
          }
        }
      }
  }
}

}  // namespace detail

/// Cross-correlation of (N,Cin,H,W) with (Cout,Cin/groups,kh,kw) plus optional bias (Cout).
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 int stride = 1, int padding = 0, int groups = 1) {
  const ConvGeometry g = detail::conv_geometry(input.shape(), weight.shape(), stride, padding, groups);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout))
    throw ShapeError("conv2d: bias must have shape (" + std::to_string(g.cout) + "), got " + to_string(bias->shape()));

  const std::size_t in_item = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_item = static_cast<std::size_t>(g.cout) * g.pixels();
  const std::size_t w_group = static_cast<std::size_t>(g.cout_g()) * g.patch();
  std::vector<T> out(static_cast<std::size_t>(g.n) * out_item);
  const T* X = input.vec().data();
  const T* Wt = weight.vec().data();

  parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t n) {
    const T* img = X + n * in_item;
    T* o = out.data() + n * out_item;
    if (g.depthwise()) {
      detail::depthwise_forward(img, Wt, g, o);
    } else {
      std::vector<T> cols(g.pointwise() ? 0 : g.patch() * g.pixels());
      for (int gr = 0; gr < g.groups; ++gr) {
        const T* src = img + static_cast<std::size_t>(gr) * g.cin_g() * g.h * g.w;
        if (!g.pointwise()) {
          detail::im2col(src, g, cols.data());
          src = cols.data();
        }
        detail::MapM<T>(o + static_cast<std::size_t>(gr) * g.cout_g() * g.pixels(), g.cout_g(), g.pixels()).noalias() =
            detail::MapC<T>(Wt + gr * w_group, g.cout_g(), g.patch()) *
            detail::MapC<T>(src, g.patch(), g.pixels());
      }
    }
    if (bias) {
      for (int c = 0; c < g.cout; ++c) {
        const T b = bias->vec()[c];
        T* row = o + static_cast<std::size_t>(c) * g.pixels();
        for (std::size_t p = 0; p < g.pixels(); ++p) row[p] += b;
      }
    }
  });

  Tensor<T> b = bias ? *bias : Tensor<T>();
  return detail::make_result<T>(Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), {input, weight, b},
                                [g, in_item, out_item, w_group](detail::Node<T>& self) {
    auto& pin = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    const bool gin = detail::wants_grad(pin), gw = detail::wants_grad(pw), gb = detail::wants_grad(pb);
    const T* X = pin->value.data();
    const T* Wt = pw->value.data();
    const T* G = self.grad.data();
    T* GX = gin ? pin->grad_buffer().data() : nullptr;
    const std::size_t wsize = pw->value.size();
    // per-item weight gradients, reduced in item order afterwards
    std::vector<T> gw_items(gw ? wsize * g.n : 0, T(0));

    parallel_for(static_cast<std::size_t>(g.n), [&](std::size_t n) {
      const T* img = X + n * in_item;
      const T* go = G + n * out_item;
      T* gwi = gw ? gw_items.data() + n * wsize : nullptr;
      if (g.depthwise()) {
        detail::depthwise_backward(img, Wt, go, g, gin ? GX + n * in_item : nullptr, gwi);
        return;
      }
      std::vector<T> cols(g.patch() * g.pixels());
      for (int gr = 0; gr < g.groups; ++gr) {
        const T* src = img + static_cast<std::size_t>(gr) * g.cin_g() * g.h * g.w;
        const T* gog = go + static_cast<std::size_t>(gr) * g.cout_g() * g.pixels();
        auto Gm = detail::MapC<T>(gog, g.cout_g(), g.pixels());
        if (gw) {
          const T* colsrc = src;
          if (!g.pointwise()) {
            detail::im2col(src, g, cols.data());
            colsrc = cols.data();
          }
          detail::MapM<T>(gwi + gr * w_group, g.cout_g(), g.patch()).noalias() =
              Gm * detail::MapC<T>(colsrc, g.patch(), g.pixels()).transpose();
        }
        if (gin) {
          T* gdst = GX + n * in_item + static_cast<std::size_t>(gr) * g.cin_g() * g.h * g.w;
          auto Wm = detail::MapC<T>(Wt + gr * w_group, g.cout_g(), g.patch());
          if (g.pointwise()) {
            detail::MapM<T>(gdst, g.patch(), g.pixels()).noalias() += Wm.transpose() * Gm;
          } else {
            detail::MapM<T>(cols.data(), g.patch(), g.pixels()).noalias() = Wm.transpose() * Gm;
            detail::col2im_add(cols.data(), g, gdst);
          }
        }
      }
    });

    if (gw) {
      auto& dst = pw->grad_buffer();
      for (int n = 0; n < g.n; ++n)
        for (std::size_t i = 0; i < wsize; ++i) dst[i] += gw_items[n * wsize + i];
    }
    if (gb) {
      auto& dst = pb->grad_buffer();
      for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.cout; ++c) {
          const T* row = G + n * out_item + static_cast<std::size_t>(c) * g.pixels();
          T s = 0;
          for (std::size_t p = 0; p < g.pixels(); ++p) s += row[p];
          dst[c] += s;
        }
    }
  });
}

}  // namespace ccnext

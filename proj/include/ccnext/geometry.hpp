#pragma once

#include <cmath>
#include <string>

#include "ccnext/ops.hpp"

namespace ccnext {

/// Rectified stereo pair calibration.
struct StereoCamera {
  double fx = 0;
  double cx = 0;
  double cy = 0;
  double baseline_m = 0;
  int width = 0;
  int height = 0;

  double focal_baseline() const { return fx * baseline_m; }

  void validate() const {
    if (!(fx > 0)) throw DomainError("camera: fx must be > 0");
    if (!(baseline_m > 0)) throw DomainError("camera: baseline_m must be > 0");
    if (width <= 0 || height <= 0) throw DomainError("camera: width and height must be positive");
    if (!(cx >= 0 && cx < width)) throw DomainError("camera: cx must lie in [0, width)");
    if (!(cy >= 0 && cy < height)) throw DomainError("camera: cy must lie in [0, height)");
  }
};

/// Depth interval onto which the network's sigmoid is mapped through
/// depth = 1 / (a * sigma + b).
struct DepthRange {
  double d_min = 0.1;
  double d_max = 100.0;

  static DepthRange make(double d_min, double d_max) {
    if (!(d_min > 0 && d_min < d_max)) throw DomainError("depth range: need 0 < d_min < d_max");
    return DepthRange{d_min, d_max};
  }
  double scale_a() const { return 1.0 / d_min - 1.0 / d_max; }
  double scale_b() const { return 1.0 / d_max; }
};

/// KITTI-style training uses a 0.1 m stand-in baseline and rescales depth by
/// 5.4 afterwards; the direct mode uses the true baseline throughout.
enum class DepthConvention { kitti, direct };

inline constexpr double kKittiDepthFactor = 5.4;

template <class T>
Tensor<T> sigmoid_to_depth(const Tensor<T>& sigma, const DepthRange& range) {
  for (T s : sigma.vec())
    if (!(s > T(0) && s < T(1)))
      throw DomainError("sigmoid_to_depth: value " + std::to_string(s) + " outside (0,1); missing sigmoid head?");
  return reciprocal(affine(sigma, static_cast<T>(range.scale_a()), static_cast<T>(range.scale_b())));
}

enum class Conversion { disparity_to_depth, depth_to_disparity };

/// depth = B * fx / disparity and its inverse (the same map).
template <class T>
Tensor<T> disparity_depth_convert(const Tensor<T>& x, const StereoCamera& cam, Conversion) {
  for (T v : x.vec())
    if (!(v > T(0))) throw DomainError("disparity_depth_convert: inputs must be strictly positive");
  return affine(reciprocal(x), static_cast<T>(cam.focal_baseline()));
}

/// Metric depth tagged with whether the KITTI factor was already applied.
template <class T>
struct MetricDepth {
  Tensor<T> meters;
  bool kitti_rescaled = false;
};

template <class T>
MetricDepth<T> kitti_depth_rescale(const MetricDepth<T>& depth) {
  if (depth.kitti_rescaled) throw Error("kitti_depth_rescale: depth already rescaled");
  return {affine(depth.meters, static_cast<T>(kKittiDepthFactor)), true};
}

/// Largest disparity (pixels) at encoder scale s (downsampling 2^s) for scene
/// depths no closer than d_min.
inline double max_disparity_bound(const StereoCamera& cam, double d_min, int scale_s) {
  if (!(d_min > 0)) throw DomainError("max_disparity_bound: d_min must be > 0");
  if (scale_s < 0) throw DomainError("max_disparity_bound: scale must be >= 0");
  return cam.focal_baseline() / (d_min * std::ldexp(1.0, scale_s));
}

inline double window_width(double max_disparity) { return 2.0 * max_disparity + 1.0; }

enum class WarpDirection {
  right_to_left,  // out(x) = source(x - d): brings the right view onto the left
  left_to_right,  // out(x) = source(x + d)
};

/// Horizontal bilinear resampling of `source` (N,C,H,W) by a per-pixel
/// disparity (N,1,H,W). Samples outside the row clamp to the border.
template <class T>
Tensor<T> reproject_view(const Tensor<T>& source, const Tensor<T>& disparity, WarpDirection dir) {
  if (source.rank() != 4 || disparity.rank() != 4)
    throw ShapeError("reproject_view: expects 4-D source and disparity");
  const int N = source.dim(0), C = source.dim(1), H = source.dim(2), W = source.dim(3);
  if (disparity.dim(0) != N || disparity.dim(1) != 1 || disparity.dim(2) != H || disparity.dim(3) != W)
    throw ShapeError("reproject_view: disparity " + to_string(disparity.shape()) + " does not match source " +
                     to_string(source.shape()));
  const T sign = dir == WarpDirection::right_to_left ? T(-1) : T(1);
  const std::size_t P = static_cast<std::size_t>(H) * W;

  // Per-pixel sample taps, shared by all channels.
  struct Tap {
    int x0, x1;
    T frac;
    bool inside;  // false when clamped (zero derivative in d)
  };
  std::vector<Tap> taps(static_cast<std::size_t>(N) * P);
  const T* D = disparity.vec().data();
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t i = static_cast<std::size_t>(n) * P + static_cast<std::size_t>(y) * W + x;
        T xs = static_cast<T>(x) + sign * D[i];
        if (std::isnan(xs)) {  // keep the index valid and let the NaN reach the output
          taps[i] = {0, 0, xs, false};
          continue;
        }
        bool inside = true;
        if (xs <= T(0)) {
          inside = xs == T(0);
          xs = T(0);
        } else if (xs >= T(W - 1)) {
          inside = xs == T(W - 1);
          xs = T(W - 1);
        }
        const int x0 = static_cast<int>(std::floor(xs));
        taps[i] = {x0, std::min(x0 + 1, W - 1), xs - static_cast<T>(x0), inside};
      }

  std::vector<T> out(source.size());
  const T* S = source.vec().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* plane = S + (static_cast<std::size_t>(n) * C + c) * P;
      T* o = out.data() + (static_cast<std::size_t>(n) * C + c) * P;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const Tap& t = taps[static_cast<std::size_t>(n) * P + static_cast<std::size_t>(y) * W + x];
          const T* row = plane + static_cast<std::size_t>(y) * W;
          o[y * W + x] = row[t.x0] * (T(1) - t.frac) + row[t.x1] * t.frac;
        }
    }

  return detail::make_result<T>(source.shape(), std::move(out), {source, disparity},
                                [=, taps = std::move(taps)](detail::Node<T>& self) {
    auto& ps = self.parents[0];
    auto& pd = self.parents[1];
    const bool gs = detail::wants_grad(ps), gd = detail::wants_grad(pd);
    T* GS = gs ? ps->grad_buffer().data() : nullptr;
    T* GD = gd ? pd->grad_buffer().data() : nullptr;
    const T* S = ps->value.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * P;
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * W + x;
            const Tap& t = taps[static_cast<std::size_t>(n) * P + pix];
            const T g = self.grad[base + pix];
            const std::size_t row = base + static_cast<std::size_t>(y) * W;
            if (gs) {
              GS[row + t.x0] += g * (T(1) - t.frac);
              GS[row + t.x1] += g * t.frac;
            }
            if (gd && t.inside && t.x1 != t.x0)
              GD[static_cast<std::size_t>(n) * P + pix] += g * sign * (S[row + t.x1] - S[row + t.x0]);
          }
      }
  });
}

}  // namespace ccnext

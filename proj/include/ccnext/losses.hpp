#pragma once

// Photometric self-supervision: SSIM + L1 reprojection error with auto-masking,
// edge-aware smoothness on mean-normalized disparity, averaged over scales and
// both views.

#include <sstream>
#include <string>
#include <vector>

#include "ccnext/geometry.hpp"
#include "ccnext/model.hpp"

namespace ccnext {

struct LossConfig {
  double alpha = 0.85;
  double gamma = 1e-3;
  int num_scales = 4;
  bool automask = true;

  void validate() const {
    if (!(alpha >= 0 && alpha <= 1)) throw DomainError("loss config: alpha must lie in [0, 1]");
    if (!(gamma >= 0)) throw DomainError("loss config: gamma must be >= 0");
    if (num_scales < 1) throw DomainError("loss config: num_scales must be >= 1");
  }
};

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel SSIM from 3x3 reflect-padded mean filters.
template <class T>
Tensor<T> ssim_map(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  const Tensor<T> mu_a = avg_pool3x3_reflect(a);
  const Tensor<T> mu_b = avg_pool3x3_reflect(b);
  const Tensor<T> mu_aa = mul(mu_a, mu_a), mu_bb = mul(mu_b, mu_b), mu_ab = mul(mu_a, mu_b);
  const Tensor<T> var_a = sub(avg_pool3x3_reflect(mul(a, a)), mu_aa);
  const Tensor<T> var_b = sub(avg_pool3x3_reflect(mul(b, b)), mu_bb);
  const Tensor<T> cov = sub(avg_pool3x3_reflect(mul(a, b)), mu_ab);
  const Tensor<T> num = mul(affine(mu_ab, T(2), c1), affine(cov, T(2), c2));
  const Tensor<T> den = mul(affine(add(mu_aa, mu_bb), T(1), c1), affine(add(var_a, var_b), T(1), c2));
  return div(num, den);
}

/// (alpha/2)(1 - SSIM) + (1 - alpha)|target - reprojected|, averaged over
/// channels; (N,1,H,W).
template <class T>
Tensor<T> photometric_error(const Tensor<T>& target, const Tensor<T>& reprojected, double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw DomainError("photometric_error: alpha must lie in [0, 1]");
  if (target.shape() != reprojected.shape())
    throw ShapeError("photometric_error: " + to_string(target.shape()) + " vs " + to_string(reprojected.shape()));
  const T a = static_cast<T>(alpha);
  const Tensor<T> structural = affine(ssim_map(target, reprojected), -a / 2, a / 2);
  const Tensor<T> l1 = affine(abs(sub(target, reprojected)), T(1) - a);
  return mean_dims(add(structural, l1), {1});
}

/// 1 where the reprojection explains the pixel strictly better than the
/// unwarped other view. Carries no gradient.
template <class T>
Tensor<T> automask(const Tensor<T>& pe_reprojected, const Tensor<T>& pe_static) {
  if (pe_reprojected.shape() != pe_static.shape())
    throw ShapeError("automask: " + to_string(pe_reprojected.shape()) + " vs " + to_string(pe_static.shape()));
  std::vector<T> m(pe_reprojected.size());
  const auto& a = pe_reprojected.vec();
  const auto& b = pe_static.vec();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] < b[i] ? T(1) : T(0);
  return Tensor<T>(pe_reprojected.shape(), std::move(m));
}

/// Mean of `values` over mask-1 entries; the plain mean when the mask is empty.
template <class T>
Tensor<T> masked_mean(const Tensor<T>& values, const Tensor<T>& mask) {
  if (values.shape() != mask.shape())
    throw ShapeError("masked_mean: " + to_string(values.shape()) + " vs " + to_string(mask.shape()));
  double count = 0;
  for (T v : mask.vec()) count += v;
  if (count == 0) return mean(values);
  return affine(sum(mul(values, mask.detach())), static_cast<T>(1.0 / count));
}

/// Edge-aware smoothness of the mean-normalized disparity (N,1,H,W) against
/// the reference image (N,C,H,W). Each axis is averaged on its own; an axis of
/// extent 1 contributes nothing.
template <class T>
Tensor<T> smoothness_loss(const Tensor<T>& disp, const Tensor<T>& reference_image) {
  if (disp.rank() != 4 || disp.dim(1) != 1)
    throw ShapeError("smoothness_loss: disparity must be (N,1,H,W), got " + to_string(disp.shape()));
  if (reference_image.rank() != 4 || reference_image.dim(0) != disp.dim(0) ||
      reference_image.dim(2) != disp.dim(2) || reference_image.dim(3) != disp.dim(3))
    throw ShapeError("smoothness_loss: image " + to_string(reference_image.shape()) + " does not match disparity " +
                     to_string(disp.shape()));
  const Tensor<T> dmean = mean_dims(disp, {2, 3});
  for (T v : dmean.vec())
    if (!(v > T(0))) throw DomainError("smoothness_loss: disparity mean must be > 0, got " + std::to_string(v));
  const Tensor<T> dn = div(disp, dmean);
  const int H = disp.dim(2), W = disp.dim(3);
  auto axis_term = [&](int axis, int extent) -> std::optional<Tensor<T>> {
    if (extent < 2) return std::nullopt;
    const Tensor<T> dd = abs(sub(slice(dn, axis, 1, extent - 1), slice(dn, axis, 0, extent - 1)));
    const Tensor<T> di = mean_dims(
        abs(sub(slice(reference_image, axis, 1, extent - 1), slice(reference_image, axis, 0, extent - 1))), {1});
    return mean(mul(dd, exp(affine(di, T(-1)))));
  };
  auto tx = axis_term(3, W);
  auto ty = axis_term(2, H);
  if (tx && ty) return add(*tx, *ty);
  if (tx) return *tx;
  if (ty) return *ty;
  return affine(sum(dn), T(0));
}

/// Pixel disparity from a sigmoid map: B*fx*(a*sigma + b).
template <class T>
Tensor<T> sigmoid_to_disparity(const Tensor<T>& sigma, const StereoCamera& cam, const DepthRange& range) {
  const double fb = cam.focal_baseline();
  return affine(sigma, static_cast<T>(fb * range.scale_a()), static_cast<T>(fb * range.scale_b()));
}

struct LossTerm {
  int scale = 0;
  View view = View::left;
  double pe = 0;
  double smooth = 0;
  double mask_fraction = 0;
};

template <class T>
struct LossResult {
  Tensor<T> total;
  std::vector<LossTerm> terms;
};

/// Total objective over both views and the first cfg.num_scales outputs.
template <class T>
LossResult<T> total_loss(const Tensor<T>& left, const Tensor<T>& right, const DisparityOutput<T>& out_l,
                         const DisparityOutput<T>& out_r, const StereoCamera& cam, const DepthRange& range,
                         const LossConfig& cfg) {
  cfg.validate();
  if (left.shape() != right.shape())
    throw ShapeError("total_loss: left " + to_string(left.shape()) + " vs right " + to_string(right.shape()));
  const int m = cfg.num_scales;
  if (static_cast<int>(out_l.sigmoids.size()) < m || static_cast<int>(out_r.sigmoids.size()) < m)
    throw ShapeError("total_loss: outputs carry fewer than " + std::to_string(m) + " scales");
  const int H = left.dim(2), W = left.dim(3);

  LossResult<T> res;
  std::optional<Tensor<T>> acc;
  for (View view : {View::left, View::right}) {
    const bool is_left = view == View::left;
    const Tensor<T>& target = is_left ? left : right;
    const Tensor<T>& source = is_left ? right : left;
    const DisparityOutput<T>& out = is_left ? out_l : out_r;
    const WarpDirection dir = is_left ? WarpDirection::right_to_left : WarpDirection::left_to_right;
    Tensor<T> pe_static;
    if (cfg.automask) {
      NoGradGuard ng;
      pe_static = photometric_error(target, source, cfg.alpha);
    }
    for (int k = 0; k < m; ++k) {
      try {
        const Tensor<T>& sig = out.sigmoids[k];
        const Tensor<T> full = (sig.dim(2) == H && sig.dim(3) == W) ? sig : resize_bilinear(sig, H, W);
        const Tensor<T> disp = sigmoid_to_disparity(full, cam, range);
        const Tensor<T> reprojected = reproject_view(source, disp, dir);
        const Tensor<T> pe = photometric_error(target, reprojected, cfg.alpha);
        Tensor<T> pe_term;
        double fraction = 1.0;
        if (cfg.automask) {
          const Tensor<T> mask = automask(pe.detach(), pe_static);
          double count = 0;
          for (T v : mask.vec()) count += v;
          fraction = count / static_cast<double>(mask.size());
          pe_term = masked_mean(pe, mask);
        } else {
          pe_term = mean(pe);
        }
        const Tensor<T> sm = smoothness_loss(disp, reprojected);
        const Tensor<T> term = add(pe_term, affine(sm, static_cast<T>(cfg.gamma)));
        acc = acc ? add(*acc, term) : term;
        res.terms.push_back({k, view, static_cast<double>(pe_term.item()), static_cast<double>(sm.item()), fraction});
      } catch (const Error& e) {
        std::ostringstream msg;
        msg << "total_loss (scale " << k << ", view " << (is_left ? "left" : "right") << "): " << e.what();
        throw Error(msg.str());
      }
    }
  }
  res.total = affine(*acc, static_cast<T>(1.0 / (2.0 * m)));
  return res;
}

}  // namespace ccnext

#pragma once

// Procedural rectified stereo scenes: a textured background plane plus
// fronto-parallel rectangles at integer disparities, rendered far to near.
// Each layer's texture lives in left-image coordinates, so the right view
// samples layer l at x + d_l and warping back by the ground truth is exact on
// visible pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "ccnext/geometry.hpp"

namespace ccnext {

struct SyntheticSceneConfig {
  int width = 128;
  int height = 64;
  int max_disparity = 16;
  int num_layers = 4;
  int texture_octaves = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (width < 8 || height < 8) throw DomainError("synthetic scene: width and height must be >= 8");
    if (max_disparity < 1) throw DomainError("synthetic scene: max_disparity must be >= 1");
    if (4 * max_disparity >= width)
      throw DomainError("synthetic scene: max_disparity " + std::to_string(max_disparity) +
                        " must be below width/4 = " + std::to_string(width / 4.0));
    if (num_layers < 1) throw DomainError("synthetic scene: num_layers must be >= 1");
    if (texture_octaves < 1) throw DomainError("synthetic scene: texture_octaves must be >= 1");
  }
};

template <class T>
struct SamplePair {
  std::string id;
  Tensor<T> left;   // (1,3,H,W) in [0,1]
  Tensor<T> right;  // (1,3,H,W) in [0,1]
  StereoCamera camera;
  std::optional<Tensor<T>> gt_disparity;    // (1,1,H,W) px, left view; 0 marks invalid
  std::optional<Tensor<T>> occlusion_mask;  // (1,1,H,W), 1 where the left pixel is not seen by the right camera
};

/// Camera whose sigmoid range (0.1 .. 100 depth units) maps onto
/// (max_disparity/1000, max_disparity) pixels.
inline StereoCamera synthetic_camera(int width, int height, int max_disparity) {
  StereoCamera cam;
  cam.fx = width;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.width = width;
  cam.height = height;
  cam.baseline_m = 0.1 * max_disparity / cam.fx;
  return cam;
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// Octaved value noise in [0,1] at integer pixel coordinates.
class ValueNoise {
 public:
  ValueNoise(std::uint64_t key, int octaves, int base_cell) : key_(key), octaves_(octaves), base_cell_(base_cell) {}

  double operator()(int x, int y) const {
    double v = 0, norm = 0, amp = 1;
    int cell = base_cell_;
    for (int o = 0; o < octaves_; ++o) {
      v += amp * lattice(o, x, y, std::max(cell, 1));
      norm += amp;
      amp *= 0.5;
      cell /= 2;
    }
    return v / norm;
  }

 private:
  double hash01(int o, long ix, long iy) const {
    std::uint64_t h = mix64(key_ ^ mix64(static_cast<std::uint64_t>(o) * 0x9e3779b97f4a7c15ULL ^
                                         mix64(static_cast<std::uint64_t>(ix) * 0xd6e8feb86659fd93ULL ^
                                               static_cast<std::uint64_t>(iy))));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  double lattice(int o, int x, int y, int cell) const {
    const long ix = static_cast<long>(std::floor(static_cast<double>(x) / cell));
    const long iy = static_cast<long>(std::floor(static_cast<double>(y) / cell));
    const double fx = static_cast<double>(x - ix * cell) / cell, fy = static_cast<double>(y - iy * cell) / cell;
    const double sx = fx * fx * (3 - 2 * fx), sy = fy * fy * (3 - 2 * fy);
    const double a = hash01(o, ix, iy), b = hash01(o, ix + 1, iy);
    const double c = hash01(o, ix, iy + 1), d = hash01(o, ix + 1, iy + 1);
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy;
  }

  std::uint64_t key_;
  int octaves_;
  int base_cell_;
};

struct Layer {
  int disparity;
  int x0, x1, y0, y1;  // support in left coordinates, half-open
  double base[3];
  std::vector<ValueNoise> noise;  // one per channel

  bool covers(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

}  // namespace detail

template <class T>
SamplePair<T> generate_synthetic_pair(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  const int W = cfg.width, H = cfg.height, L = cfg.num_layers;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<detail::Layer> layers;
  for (int l = 0; l < L; ++l) {
    detail::Layer layer;
    const double u = (l + 0.3 + 0.7 * unit(rng)) / L;
    layer.disparity = std::max(1, static_cast<int>(std::floor(cfg.max_disparity * u)));
    if (l == 0) {
      layer.x0 = std::numeric_limits<int>::min() / 2;
      layer.x1 = std::numeric_limits<int>::max() / 2;
      layer.y0 = 0;
      layer.y1 = H;
    } else {
      const int w = W / 4 + static_cast<int>(unit(rng) * (W / 2 - W / 4));
      const int h = std::max(2, H / 4 + static_cast<int>(unit(rng) * (H / 2 - H / 4)));
      layer.x0 = static_cast<int>(unit(rng) * (W - w));
      layer.y0 = static_cast<int>(unit(rng) * (H - h));
      layer.x1 = layer.x0 + w;
      layer.y1 = layer.y0 + h;
    }
    const int cell = std::max(2, (l == 0 ? W : W / 2) / 8);
    for (int c = 0; c < 3; ++c) {
      layer.base[c] = 0.25 + 0.75 * unit(rng);
      layer.noise.emplace_back(detail::mix64(cfg.seed * 1315423911ULL + static_cast<std::uint64_t>(l) * 3 + c),
                               cfg.texture_octaves, cell);
    }
    layers.push_back(std::move(layer));
  }

  auto shade = [&](const detail::Layer& layer, int c, int x, int y) {
    return static_cast<T>(layer.base[c] * (0.2 + 0.8 * layer.noise[c](x, y)));
  };
  // nearest layer whose support holds left coordinate (x + d_l) for a right pixel x
  auto visible_in_right = [&](int xr, int y) {
    for (int l = L - 1; l >= 0; --l)
      if (layers[l].covers(xr + layers[l].disparity, y)) return l;
    return 0;
  };

  const std::size_t P = static_cast<std::size_t>(H) * W;
  std::vector<T> left(3 * P), right(3 * P), gt(P), occ(P);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      int lv = 0;
      for (int l = L - 1; l >= 0; --l)
        if (layers[l].covers(x, y)) {
          lv = l;
          break;
        }
      const int rv = visible_in_right(x, y);
      for (int c = 0; c < 3; ++c) {
        left[c * P + i] = shade(layers[lv], c, x, y);
        right[c * P + i] = shade(layers[rv], c, x + layers[rv].disparity, y);
      }
      const int d = layers[lv].disparity;
      gt[i] = static_cast<T>(d);
      occ[i] = (x - d < 0 || visible_in_right(x - d, y) != lv) ? T(1) : T(0);
    }

  SamplePair<T> s;
  s.id = "seed" + std::to_string(cfg.seed);
  s.left = Tensor<T>({1, 3, H, W}, std::move(left));
  s.right = Tensor<T>({1, 3, H, W}, std::move(right));
  s.camera = synthetic_camera(W, H, cfg.max_disparity);
  s.gt_disparity = Tensor<T>({1, 1, H, W}, std::move(gt));
  s.occlusion_mask = Tensor<T>({1, 1, H, W}, std::move(occ));
  return s;
}

/// Fraction of left pixels without a correspondence in the right view.
template <class T>
double occlusion_fraction(const SamplePair<T>& s) {
  if (!s.occlusion_mask) throw Error("occlusion_fraction: sample has no occlusion mask");
  double n = 0;
  for (T v : s.occlusion_mask->vec()) n += v;
  return n / static_cast<double>(s.occlusion_mask->size());
}

}  // namespace ccnext

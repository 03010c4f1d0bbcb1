#pragma once

// Siamese ConvNeXt-style encoder with windowed cross-attention after the
// first three stages, per-view skip fusion and the ICEP decoder.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ccnext/attention.hpp"

namespace ccnext {

struct ModelConfig {
  std::array<int, 4> stage_channels{16, 32, 64, 128};
  std::array<int, 4> stage_depths{2, 2, 6, 2};
  /// Projection width of each cross-attention block; 0 uses the stage width.
  std::array<int, 3> c_in_attention{0, 0, 0};
  /// Decoder widths at strides 1, 2, 4, 8, 16.
  std::array<int, 5> decoder_channels{8, 8, 16, 32, 48};
  int num_output_scales = 4;
  int input_h = 64;
  int input_w = 128;
  /// Largest full-resolution disparity B*fx/d_min in pixels; sets the
  /// attention half windows (clipped to the feature width).
  double max_disparity_px = 16.0;
  bool cross_attention = true;
  AttentionOptions attention;
  double layer_scale_init = 1e-6;

  static ModelConfig toy() { return {}; }

  static ModelConfig pico() {
    ModelConfig c;
    c.stage_channels = {64, 128, 256, 512};
    c.decoder_channels = {16, 32, 64, 128, 192};
    c.input_h = 384;
    c.input_w = 1280;
    c.max_disparity_px = 0.54 * 720.0 / 0.1;
    return c;
  }

  void validate() const {
    for (int c : stage_channels)
      if (c <= 0) throw DomainError("model config: stage channels must be positive");
    for (int d : stage_depths)
      if (d < 0) throw DomainError("model config: stage depths must be >= 0");
    for (int c : decoder_channels)
      if (c <= 0) throw DomainError("model config: decoder channels must be positive");
    for (int c : c_in_attention)
      if (c < 0) throw DomainError("model config: attention width must be >= 0");
    if (num_output_scales < 1 || num_output_scales > 4)
      throw DomainError("model config: num_output_scales must lie in [1, 4]");
    if (input_h <= 0 || input_w <= 0 || input_h % 32 || input_w % 32)
      throw DomainError("model config: input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                        " must be divisible by 32");
    if (!(max_disparity_px > 0)) throw DomainError("model config: max_disparity_px must be > 0");
  }
};

/// Per-view encoder features at strides 4, 8, 16, 32.
template <class T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> skips;
  const Tensor<T>& bottleneck() const { return skips[3]; }
};

/// Sigmoid disparity maps at strides 1, 2, 4, 8 (finest first).
template <class T>
struct DisparityOutput {
  std::vector<Tensor<T>> sigmoids;
};

enum class View { left, right };

template <class T>
struct StereoOutput {
  std::optional<DisparityOutput<T>> left;
  std::optional<DisparityOutput<T>> right;
};

namespace layers {

template <class T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;

  static Conv create(ParameterStore<T>& store, const std::string& name, int cin, int cout, int k, int stride, int pad,
                     int groups, std::mt19937_64& rng) {
    Conv c;
    c.weight = store.add(name + ".weight", trunc_normal<T>({cout, cin / groups, k, k}, T(0.02), rng));
    c.bias = store.add(name + ".bias", Tensor<T>::zeros({cout}));
    c.stride = stride;
    c.padding = pad;
    c.groups = groups;
    return c;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d<T>(x, weight, bias, stride, padding, groups); }
};

template <class T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static Norm create(ParameterStore<T>& store, const std::string& name, int c) {
    return {store.add(name + ".gamma", Tensor<T>::full({c}, T(1))), store.add(name + ".beta", Tensor<T>::zeros({c}))};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_channels(x, gamma, beta); }
};

// dw7x7 -> norm -> 1x1 (4C) -> GELU -> 1x1 (C) -> layer scale -> residual
template <class T>
struct InvertedBottleneck {
  Conv<T> dw, pw1, pw2;
  Norm<T> norm;
  Tensor<T> scale;

  static InvertedBottleneck create(ParameterStore<T>& store, const std::string& name, int c, double layer_scale,
                                   std::mt19937_64& rng) {
    InvertedBottleneck b;
    b.dw = Conv<T>::create(store, name + ".dwconv", c, c, 7, 1, 3, c, rng);
    b.norm = Norm<T>::create(store, name + ".norm", c);
    b.pw1 = Conv<T>::create(store, name + ".pwconv1", c, 4 * c, 1, 1, 0, 1, rng);
    b.pw2 = Conv<T>::create(store, name + ".pwconv2", 4 * c, c, 1, 1, 0, 1, rng);
    b.scale = store.add(name + ".layer_scale", Tensor<T>::full({1, c, 1, 1}, static_cast<T>(layer_scale)));
    return b;
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    const Tensor<T> h = pw2(gelu(pw1(norm(dw(x)))));
    return add(x, mul(h, scale));
  }
};

// two 3x3 convolutions with a residual connection
template <class T>
struct IntraSkip {
  Conv<T> a, b;

  static IntraSkip create(ParameterStore<T>& store, const std::string& name, int c, std::mt19937_64& rng) {
    return {Conv<T>::create(store, name + ".conv_a", c, c, 3, 1, 1, 1, rng),
            Conv<T>::create(store, name + ".conv_b", c, c, 3, 1, 1, 1, rng)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return elu(add(x, b(elu(a(x))))); }
};

}  // namespace layers

template <class T>
class CCNeXt {
 public:
  explicit CCNeXt(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto& C = cfg_.stage_channels;
    const double ls = cfg_.layer_scale_init;

    patchify_ = layers::Conv<T>::create(store_, "encoder.stem.patchify", 3, C[0], 4, 4, 0, 1, rng);
    stem_norm_ = layers::Norm<T>::create(store_, "encoder.stem.norm", C[0]);
    stem_block_ = layers::InvertedBottleneck<T>::create(store_, "encoder.stem.block", C[0], ls, rng);
    for (int s = 0; s < 4; ++s) {
      const std::string pre = "encoder.stage" + std::to_string(s);
      if (s > 0) {
        down_norm_[s] = layers::Norm<T>::create(store_, "encoder.down" + std::to_string(s) + ".norm", C[s - 1]);
        down_[s] = layers::Conv<T>::create(store_, "encoder.down" + std::to_string(s) + ".conv", C[s - 1], C[s], 2, 2,
                                           0, 1, rng);
      }
      for (int b = 0; b < cfg_.stage_depths[s]; ++b)
        blocks_[s].push_back(
            layers::InvertedBottleneck<T>::create(store_, pre + ".block" + std::to_string(b), C[s], ls, rng));
    }
    if (cfg_.cross_attention)
      for (int s = 0; s < 3; ++s) {
        const int c_in = cfg_.c_in_attention[s] ? cfg_.c_in_attention[s] : C[s];
        attention_[s] = WindowedCAParams<T>::create(store_, "encoder.ca" + std::to_string(s), C[s], c_in, 0, rng,
                                                    cfg_.attention);
      }
    for (int s = 0; s < 4; ++s)
      fuse_[s] = layers::Conv<T>::create(store_, "fusion.level" + std::to_string(s), 2 * C[s], C[s], 3, 1, 1, 1, rng);

    // decoder, coarse to fine; D[k] is the width at stride 2^k
    const auto& D = cfg_.decoder_channels;
    auto conv3 = [&](const std::string& name, int cin, int cout) {
      return layers::Conv<T>::create(store_, "decoder." + name, cin, cout, 3, 1, 1, 1, rng);
    };
    up_[4] = conv3("up4", C[3], D[4]);
    iconv_[4] = conv3("iconv4", D[4] + C[2], D[4]);
    skip_[0] = layers::IntraSkip<T>::create(store_, "decoder.skip4", D[4], rng);
    up_[3] = conv3("up3", D[4], D[3]);
    iconv_[3] = conv3("iconv3", D[3] + C[1], D[3]);
    skip_[1] = layers::IntraSkip<T>::create(store_, "decoder.skip3", D[3], rng);
    up_[2] = conv3("up2", D[3], D[2]);
    up_[1] = conv3("up1", D[2], D[1]);
    up_[0] = conv3("up0", D[1], D[0]);
    iconv_[0] = conv3("iconv0", D[0] + C[0], D[0]);
    // head k produces y_k at stride 2^k
    for (int k = 0; k < cfg_.num_output_scales; ++k) heads_[k] = conv3("head" + std::to_string(k), D[k], 1);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  /// Attention half window at encoder stage s for feature width w.
  int half_window(int stage, int feature_w) const {
    const double bound = cfg_.max_disparity_px / std::ldexp(1.0, stage + 2);
    return std::min(static_cast<int>(std::ceil(bound - 1e-9)), feature_w - 1);
  }

  Tensor<T> stem_forward(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != 3)
      throw ShapeError("stem: expected (N,3,H,W) image, got " + to_string(image.shape()));
    if (image.dim(2) % 4 || image.dim(3) % 4)
      throw ShapeError("stem: image height and width must be divisible by 4, got " + to_string(image.shape()));
    return stem_block_(stem_norm_(patchify_(image)));
  }

  std::pair<FeaturePyramid<T>, FeaturePyramid<T>> encode(const Tensor<T>& left, const Tensor<T>& right) const {
    if (left.shape() != right.shape())
      throw ShapeError("encoder: left " + to_string(left.shape()) + " vs right " + to_string(right.shape()));
    check_input(left);
    FeaturePyramid<T> pl, pr;
    Tensor<T> xl = stem_forward(left), xr = stem_forward(right);
    for (int s = 0; s < 4; ++s) {
      if (s > 0) {
        xl = down_[s](down_norm_[s](xl));
        xr = down_[s](down_norm_[s](xr));
      }
      for (const auto& b : blocks_[s]) {
        xl = b(xl);
        xr = b(xr);
      }
      if (s < 3 && cfg_.cross_attention) {
        WindowedCAParams<T> ca = attention_[s];
        ca.half_window = half_window(s, xl.dim(3));
        std::tie(xl, xr) = windowed_cross_attention(xl, xr, ca);
      }
      pl.skips[s] = xl;
      pr.skips[s] = xr;
    }
    return {pl, pr};
  }

  /// 3x3 reduction of [target, other] at one pyramid level.
  Tensor<T> fuse(int level, const Tensor<T>& target, const Tensor<T>& other) const {
    if (level < 0 || level > 3) throw DomainError("fuse: level must lie in [0, 3]");
    if (target.shape() != other.shape())
      throw ShapeError("fuse: level " + std::to_string(level) + " target " + to_string(target.shape()) + " vs " +
                       to_string(other.shape()));
    return fuse_[level](concat_channels(target, other));
  }

  std::array<Tensor<T>, 4> fuse_views(const FeaturePyramid<T>& pl, const FeaturePyramid<T>& pr, View target) const {
    const auto& a = target == View::left ? pl : pr;
    const auto& b = target == View::left ? pr : pl;
    std::array<Tensor<T>, 4> out;
    for (int s = 0; s < 4; ++s) out[s] = fuse(s, a.skips[s], b.skips[s]);
    return out;
  }

  DisparityOutput<T> decode(const std::vector<Tensor<T>>& fused) const {
    if (fused.size() != 4) throw ShapeError("decoder: expected 4 pyramid levels, got " + std::to_string(fused.size()));
    return decode(std::array<Tensor<T>, 4>{fused[0], fused[1], fused[2], fused[3]});
  }

  DisparityOutput<T> decode(const std::array<Tensor<T>, 4>& x) const {
    const int m = cfg_.num_output_scales;
    std::array<Tensor<T>, 4> y;
    Tensor<T> h = elu(up_[4](upsample_nearest_2x(x[3])));    // stride 16
    h = skip_[0](elu(iconv_[4](concat_channels(h, x[2]))));
    h = elu(up_[3](upsample_nearest_2x(h)));                  // stride 8
    h = skip_[1](elu(iconv_[3](concat_channels(h, x[1]))));
    if (m > 3) y[3] = sigmoid(heads_[3](h));
    h = elu(up_[2](upsample_nearest_2x(h)));                  // stride 4
    if (m > 2) y[2] = sigmoid(heads_[2](h));
    h = elu(up_[1](upsample_nearest_2x(h)));                  // stride 2
    if (m > 1) y[1] = sigmoid(heads_[1](h));
    h = elu(up_[0](upsample_nearest_2x(h)));                  // stride 1
    const Tensor<T> top = upsample_nearest_2x(upsample_nearest_2x(x[0]));
    h = elu(iconv_[0](concat_channels(h, top)));
    y[0] = sigmoid(heads_[0](h));
    DisparityOutput<T> out;
    for (int k = 0; k < m; ++k) out.sigmoids.push_back(y[k]);
    return out;
  }

  /// Runs the shared encoder once and the decoder for each requested view.
  StereoOutput<T> forward(const Tensor<T>& left, const Tensor<T>& right, bool want_left = true,
                          bool want_right = true) const {
    auto [pl, pr] = encode(left, right);
    StereoOutput<T> out;
    if (want_left) out.left = decode(fuse_views(pl, pr, View::left));
    if (want_right) out.right = decode(fuse_views(pl, pr, View::right));
    return out;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("model: expected (N,3,H,W) input, got " + to_string(x.shape()));
    if (x.dim(2) % 32 || x.dim(3) % 32)
      throw ShapeError("model: input height and width must be divisible by 32, got " + to_string(x.shape()));
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  layers::Conv<T> patchify_;
  layers::Norm<T> stem_norm_;
  layers::InvertedBottleneck<T> stem_block_;
  std::array<layers::Norm<T>, 4> down_norm_;
  std::array<layers::Conv<T>, 4> down_;
  std::array<std::vector<layers::InvertedBottleneck<T>>, 4> blocks_;
  std::array<WindowedCAParams<T>, 3> attention_;
  std::array<layers::Conv<T>, 4> fuse_;
  std::array<layers::Conv<T>, 5> up_;
  std::array<layers::Conv<T>, 5> iconv_;
  std::array<layers::IntraSkip<T>, 2> skip_;
  std::array<layers::Conv<T>, 4> heads_;
};

}  // namespace ccnext

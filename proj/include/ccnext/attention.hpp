#pragma once

// Epipolar cross-attention between the two views of a rectified pair.
//
// For the right-view output every query pixel (x, y) of Q_r attends to the
// keys K_l on the same row y; Y_r = W_out(softmax(Q_r K_l^T) V_l) + X_r. The
// left-view output mirrors it with the roles swapped. The windowed variant
// restricts the candidates to |x' - x| <= half_window (clipped at the row
// ends, never padded).

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

#include "ccnext/conv.hpp"
#include "ccnext/nn.hpp"

namespace ccnext {

enum class WindowMode {
  symmetric,  // x' in [x - hw, x + hw]
  one_sided,  // right queries look rightward into the left view, left queries leftward
};

struct AttentionOptions {
  bool scale_logits = false;  // multiply logits by 1/sqrt(c_in)
  WindowMode mode = WindowMode::symmetric;
  bool shared_weights = true;  // one q/k/v/out set serves both directions
};

/// Candidate offsets [lo, hi] relative to the query column.
struct WindowSpan {
  int lo;
  int hi;
};

namespace detail {

// Fused windowed attention core on (N,C,H,W) tensors: for each query pixel,
// softmax over the clipped candidate span of the same row.
template <class T>
Tensor<T> windowed_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, WindowSpan span,
                                  T logit_scale) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 4)
    throw ShapeError("attention: q/k/v shapes differ: " + to_string(q.shape()) + ", " + to_string(k.shape()) + ", " +
                     to_string(v.shape()));
  const int N = q.dim(0), C = q.dim(1), H = q.dim(2), W = q.dim(3);
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const int stride = std::min(W, span.hi - span.lo + 1);  // slots per query

  // channel-last copies for contiguous dot products
  auto to_last = [&](const std::vector<T>& src) {
    std::vector<T> dst(src.size());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p)
          dst[(static_cast<std::size_t>(n) * P + p) * C + c] = src[(static_cast<std::size_t>(n) * C + c) * P + p];
    return dst;
  };
  std::vector<T> Qt = to_last(q.vec()), Kt = to_last(k.vec()), Vt = to_last(v.vec());
  std::vector<T> probs(static_cast<std::size_t>(N) * P * stride, T(0));
  std::vector<T> outT(q.size(), T(0));

  auto range = [=](int x) { return std::pair<int, int>{std::max(0, x + span.lo), std::min(W - 1, x + span.hi)}; };

  parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t qi = n * P + static_cast<std::size_t>(y) * W + x;
        const auto [lo, hi] = range(x);
        T* pr = probs.data() + qi * stride;
        const T* qv = Qt.data() + qi * C;
        T mx = -std::numeric_limits<T>::infinity();
        for (int xs = lo; xs <= hi; ++xs) {
          const T* kv = Kt.data() + (n * P + static_cast<std::size_t>(y) * W + xs) * C;
          T s = 0;
          for (int c = 0; c < C; ++c) s += qv[c] * kv[c];
          pr[xs - lo] = s * logit_scale;
          mx = std::max(mx, pr[xs - lo]);
        }
        T z = 0;
        for (int j = 0; j <= hi - lo; ++j) z += (pr[j] = std::exp(pr[j] - mx));
        T* o = outT.data() + qi * C;
        for (int j = 0; j <= hi - lo; ++j) {
          pr[j] /= z;
          const T* vv = Vt.data() + (n * P + static_cast<std::size_t>(y) * W + lo + j) * C;
          for (int c = 0; c < C; ++c) o[c] += pr[j] * vv[c];
        }
      }
  });

  std::vector<T> out(q.size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p)
        out[(static_cast<std::size_t>(n) * C + c) * P + p] = outT[(static_cast<std::size_t>(n) * P + p) * C + c];

  return make_result<T>(q.shape(), std::move(out), {q, k, v},
                        [=, Qt = std::move(Qt), Kt = std::move(Kt), Vt = std::move(Vt),
                         probs = std::move(probs)](Node<T>& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    auto& pv = self.parents[2];
    std::vector<T> gQ(Qt.size(), T(0)), gK(Kt.size(), T(0)), gV(Vt.size(), T(0));
    // gradient of the output in channel-last order
    std::vector<T> G(self.grad.size());
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p)
          G[(static_cast<std::size_t>(n) * P + p) * C + c] = self.grad[(static_cast<std::size_t>(n) * C + c) * P + p];

    parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
      std::vector<T> dp(static_cast<std::size_t>(stride));
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t qi = n * P + static_cast<std::size_t>(y) * W + x;
          const auto [lo, hi] = range(x);
          const T* pr = probs.data() + qi * stride;
          const T* g = G.data() + qi * C;
          T dot = 0;
          for (int j = 0; j <= hi - lo; ++j) {
            const std::size_t ki = n * P + static_cast<std::size_t>(y) * W + lo + j;
            const T* vv = Vt.data() + ki * C;
            T* gv = gV.data() + ki * C;
            T s = 0;
            for (int c = 0; c < C; ++c) {
              s += g[c] * vv[c];
              gv[c] += pr[j] * g[c];
            }
            dp[j] = s;
            dot += pr[j] * s;
          }
          const T* qv = Qt.data() + qi * C;
          T* gq = gQ.data() + qi * C;
          for (int j = 0; j <= hi - lo; ++j) {
            const T dl = pr[j] * (dp[j] - dot) * logit_scale;
            const std::size_t ki = n * P + static_cast<std::size_t>(y) * W + lo + j;
            const T* kv = Kt.data() + ki * C;
            T* gk = gK.data() + ki * C;
            for (int c = 0; c < C; ++c) {
              gq[c] += dl * kv[c];
              gk[c] += dl * qv[c];
            }
          }
        }
    });

    auto scatter = [&](const std::shared_ptr<Node<T>>& p, const std::vector<T>& gl) {
      if (!wants_grad(p)) return;
      auto& dst = p->grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (std::size_t px = 0; px < P; ++px)
            dst[(static_cast<std::size_t>(n) * C + c) * P + px] += gl[(static_cast<std::size_t>(n) * P + px) * C + c];
    };
    scatter(pq, gQ);
    scatter(pk, gK);
    scatter(pv, gV);
  });
}

}  // namespace detail

/// 1x1 convolution weights for one attention direction.
template <class T>
struct AttentionProjections {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct WindowedCAParams {
  int c = 0;
  int c_in = 0;
  int half_window = 0;
  AttentionOptions options;
  // [0] serves right-view queries (Y_r); [1] left-view queries, aliasing [0]
  // when weights are shared.
  std::array<AttentionProjections<T>, 2> proj;

  T logit_scale() const { return options.scale_logits ? T(1) / std::sqrt(static_cast<T>(c_in)) : T(1); }

  /// Registers parameters under `prefix` with truncated-normal(0.02) weights.
  static WindowedCAParams create(ParameterStore<T>& store, const std::string& prefix, int c, int c_in, int half_window,
                                 std::mt19937_64& rng, AttentionOptions options = {}) {
    WindowedCAParams p;
    p.c = c;
    p.c_in = c_in;
    p.half_window = half_window;
    p.options = options;
    const int sets = options.shared_weights ? 1 : 2;
    for (int d = 0; d < sets; ++d) {
      const std::string pre = prefix + (options.shared_weights ? "" : (d == 0 ? ".right" : ".left"));
      auto& a = p.proj[d];
      a.wq = store.add(pre + ".q.weight", trunc_normal<T>({c_in, c, 1, 1}, T(0.02), rng));
      a.bq = store.add(pre + ".q.bias", Tensor<T>::zeros({c_in}));
      a.wk = store.add(pre + ".k.weight", trunc_normal<T>({c_in, c, 1, 1}, T(0.02), rng));
      a.bk = store.add(pre + ".k.bias", Tensor<T>::zeros({c_in}));
      a.wv = store.add(pre + ".v.weight", trunc_normal<T>({c_in, c, 1, 1}, T(0.02), rng));
      a.bv = store.add(pre + ".v.bias", Tensor<T>::zeros({c_in}));
      a.wo = store.add(pre + ".out.weight", trunc_normal<T>({c, c_in, 1, 1}, T(0.02), rng));
      a.bo = store.add(pre + ".out.bias", Tensor<T>::zeros({c}));
    }
    if (options.shared_weights) p.proj[1] = p.proj[0];
    return p;
  }
};

/// Candidate span for queries of the given view.
inline WindowSpan window_span(int half_window, WindowMode mode, bool right_queries) {
  if (mode == WindowMode::symmetric) return {-half_window, half_window};
  return right_queries ? WindowSpan{0, half_window} : WindowSpan{-half_window, 0};
}

namespace detail {

template <class T>
void check_attention_inputs(const Tensor<T>& x_l, const Tensor<T>& x_r, const WindowedCAParams<T>& p) {
  if (x_l.shape() != x_r.shape())
    throw ShapeError("cross attention: left " + to_string(x_l.shape()) + " vs right " + to_string(x_r.shape()));
  if (x_l.rank() != 4 || x_l.dim(1) != p.c)
    throw ShapeError("cross attention: expected (N," + std::to_string(p.c) + ",H,W), got " + to_string(x_l.shape()));
  if (p.half_window < 0) throw DomainError("cross attention: half_window must be >= 0");
}

template <class T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return conv2d<T>(x, w, b, 1, 0, 1);
}

}  // namespace detail

/// Windowed epipolar cross-attention. Returns (Y_l, Y_r).
template <class T>
std::pair<Tensor<T>, Tensor<T>> windowed_cross_attention(const Tensor<T>& x_l, const Tensor<T>& x_r,
                                                         const WindowedCAParams<T>& p) {
  detail::check_attention_inputs(x_l, x_r, p);
  const int W = x_l.dim(3);
  if (p.half_window > W - 1)
    throw ShapeError("cross attention: half_window " + std::to_string(p.half_window) + " reaches past a row of width " +
                     std::to_string(W));
  auto direction = [&](const Tensor<T>& xq, const Tensor<T>& xkv, const AttentionProjections<T>& a, bool right) {
    const Tensor<T> q = detail::conv1x1(xq, a.wq, a.bq);
    const Tensor<T> k = detail::conv1x1(xkv, a.wk, a.bk);
    const Tensor<T> v = detail::conv1x1(xkv, a.wv, a.bv);
    const Tensor<T> att =
        detail::windowed_attention_core(q, k, v, window_span(p.half_window, p.options.mode, right), p.logit_scale());
    return add(detail::conv1x1(att, a.wo, a.bo), xq);
  };
  Tensor<T> y_r = direction(x_r, x_l, p.proj[0], true);
  Tensor<T> y_l = direction(x_l, x_r, p.proj[1], false);
  return {y_l, y_r};
}

/// Unrestricted row attention built from generic layout/matmul/softmax ops.
template <class T>
std::pair<Tensor<T>, Tensor<T>> full_row_cross_attention(const Tensor<T>& x_l, const Tensor<T>& x_r,
                                                         const WindowedCAParams<T>& p) {
  detail::check_attention_inputs(x_l, x_r, p);
  auto direction = [&](const Tensor<T>& xq, const Tensor<T>& xkv, const AttentionProjections<T>& a) {
    const Tensor<T> q = permute(detail::conv1x1(xq, a.wq, a.bq), {0, 2, 3, 1});   // N,H,W,C
    const Tensor<T> k = permute(detail::conv1x1(xkv, a.wk, a.bk), {0, 2, 1, 3});  // N,H,C,W
    const Tensor<T> v = permute(detail::conv1x1(xkv, a.wv, a.bv), {0, 2, 3, 1});  // N,H,W,C
    Tensor<T> logits = matmul(q, k);
    if (p.options.scale_logits) logits = affine(logits, p.logit_scale());
    const Tensor<T> att = permute(matmul(softmax_lastdim(logits), v), {0, 3, 1, 2});
    return add(detail::conv1x1(att, a.wo, a.bo), xq);
  };
  Tensor<T> y_r = direction(x_r, x_l, p.proj[0]);
  Tensor<T> y_l = direction(x_l, x_r, p.proj[1]);
  return {y_l, y_r};
}

// -------------------------------------------------------------------- FLOPs

// mixed: 1x1 convolutions as MACs, attention products at two FLOPs per MAC,
// the split some layer-hook profilers produce.
enum class MacConvention { one_flop, two_flops, mixed };

struct AttentionFlops {
  double projections = 0;  // q, k, v and output 1x1 convolutions
  double qk = 0;           // logits
  double av = 0;           // weighted sum of values
  double total() const { return projections + qk + av; }
};

/// Analytic FLOPs of one attention direction on an (N,C,H,W) input. Every
/// query sees `window_width` candidates; softmax, residual and other
/// element-wise work are not counted.
inline AttentionFlops flop_count_cross_attention(const std::array<std::int64_t, 4>& shape, std::int64_t c_in,
                                                 std::int64_t window_width, MacConvention convention) {
  const auto [N, C, H, W] = shape;
  if (window_width < 1 || window_width > W)
    throw DomainError("flop_count_cross_attention: window width must lie in [1, W]");
  const double per_mac_conv = convention == MacConvention::two_flops ? 2.0 : 1.0;
  const double per_mac = convention == MacConvention::one_flop ? 1.0 : 2.0;
  const double pixels = static_cast<double>(N) * H * W;
  AttentionFlops f;
  f.projections = per_mac_conv * 4.0 * pixels * static_cast<double>(C) * static_cast<double>(c_in);
  f.qk = per_mac * pixels * static_cast<double>(window_width) * static_cast<double>(c_in);
  f.av = f.qk;
  return f;
}

}  // namespace ccnext

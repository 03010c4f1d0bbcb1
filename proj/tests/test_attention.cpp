#include <gtest/gtest.h>

#include "ccnext/attention.hpp"
#include "ccnext/grad_check.hpp"
#include "support.hpp"

using namespace ccnext;
using ccnext::testing::max_abs_diff;
using ccnext::testing::random_tensor;
using TD = Tensor<double>;

namespace {

template <class T>
WindowedCAParams<T> make_params(int c, int c_in, int hw, std::uint64_t seed, AttentionOptions opt = {},
                                ParameterStore<T>* store_out = nullptr) {
  ParameterStore<T> local;
  ParameterStore<T>& store = store_out ? *store_out : local;
  std::mt19937_64 rng(seed);
  auto p = WindowedCAParams<T>::create(store, "ca", c, c_in, hw, rng, opt);
  // Larger weights and nonzero biases than the default init so that the
  // softmax is far from uniform and every bias path is exercised.
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store.at(i).tensor.mutable_values()) v = std::uniform_real_distribution<T>(-0.8, 0.8)(rng);
  return p;
}

double conv1x1_at(const TD& x, const TD& w, const TD& b, int n, int o, int y, int xx) {
  double s = b.vec()[o];
  for (int c = 0; c < x.dim(1); ++c) s += w.at(o, c, 0, 0) * x.at(n, c, y, xx);
  return s;
}

// Per-pixel brute force of one direction: queries from xq, keys/values from
// xkv, candidates x' with lo <= x' - x <= hi.
TD loop_direction(const TD& xq, const TD& xkv, const AttentionProjections<double>& a, int lo, int hi, double scale) {
  const int N = xq.dim(0), C = xq.dim(1), H = xq.dim(2), W = xq.dim(3), Ci = a.wq.dim(0);
  TD y(xq.shape());
  auto out = y.mutable_values();
  for (int n = 0; n < N; ++n)
    for (int r = 0; r < H; ++r)
      for (int x = 0; x < W; ++x) {
        std::vector<double> q(Ci);
        for (int k = 0; k < Ci; ++k) q[k] = conv1x1_at(xq, a.wq, a.bq, n, k, r, x);
        std::vector<double> logits;
        std::vector<int> cand;
        for (int xp = std::max(0, x + lo); xp <= std::min(W - 1, x + hi); ++xp) {
          double s = 0;
          for (int k = 0; k < Ci; ++k) s += q[k] * conv1x1_at(xkv, a.wk, a.bk, n, k, r, xp);
          logits.push_back(s * scale);
          cand.push_back(xp);
        }
        const double m = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double& l : logits) z += (l = std::exp(l - m));
        std::vector<double> att(Ci, 0.0);
        for (std::size_t j = 0; j < cand.size(); ++j)
          for (int k = 0; k < Ci; ++k) att[k] += logits[j] / z * conv1x1_at(xkv, a.wv, a.bv, n, k, r, cand[j]);
        for (int c = 0; c < C; ++c) {
          double s = a.bo.vec()[c] + xq.at(n, c, r, x);
          for (int k = 0; k < Ci; ++k) s += a.wo.at(c, k, 0, 0) * att[k];
          out[((static_cast<std::size_t>(n) * C + c) * H + r) * W + x] = s;
        }
      }
  return y;
}

}  // namespace

// ----------------------------------------------------------------- examples

TEST(WindowedAttention, HandWorkedTwoPixelCase) {
  ParameterStore<double> store;
  std::mt19937_64 rng(0);
  auto p = WindowedCAParams<double>::create(store, "ca", 1, 1, 1, rng);
  for (auto* t : {&p.proj[0].wq, &p.proj[0].wk, &p.proj[0].wv, &p.proj[0].wo}) t->mutable_values()[0] = 1.0;
  TD xl({1, 1, 1, 2}, std::vector<double>{1, 0}), xr({1, 1, 1, 2}, std::vector<double>{0, 1});
  auto [yl, yr] = windowed_cross_attention(xl, xr, p);
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(yr.vec()[0], 0.5, 1e-12);
  EXPECT_NEAR(yr.vec()[1], 1.0 + s1, 1e-12);
  EXPECT_NEAR(yr.vec()[1], 1.7311, 1e-4);
  auto [fl, fr] = full_row_cross_attention(xl, xr, p);
  EXPECT_LT(max_abs_diff(yr, fr), 1e-15);
  EXPECT_LT(max_abs_diff(yl, fl), 1e-15);
}

TEST(WindowedAttention, ZeroWindowAttendsOwnColumn) {
  std::mt19937_64 rng(1);
  auto p = make_params<double>(3, 2, 0, 2);
  auto xl = random_tensor<double>({2, 3, 4, 5}, rng), xr = random_tensor<double>({2, 3, 4, 5}, rng);
  auto [yl, yr] = windowed_cross_attention(xl, xr, p);
  const auto& a = p.proj[0];
  // Att = V_l pixelwise, so Y_r = out(v(x_l)) + x_r
  auto expect = add(conv2d<double>(conv2d<double>(xl, a.wv, a.bv), a.wo, a.bo), xr);
  EXPECT_LT(max_abs_diff(yr, expect), 1e-12);
}

TEST(WindowedAttention, WindowTooWideThrows) {
  auto p = make_params<double>(2, 2, 5, 3);
  TD x({1, 2, 2, 5});
  EXPECT_THROW(windowed_cross_attention(x, x, p), ShapeError);
  p.half_window = 4;
  EXPECT_NO_THROW(windowed_cross_attention(x, x, p));
  EXPECT_THROW(windowed_cross_attention(x, TD({1, 2, 2, 6}), p), ShapeError);
  EXPECT_THROW(windowed_cross_attention(TD({1, 3, 2, 5}), TD({1, 3, 2, 5}), p), ShapeError);
}

// ------------------------------------------------------------------ oracles

TEST(FullRowAttention, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(4);
  for (bool scaled : {false, true}) {
    AttentionOptions opt;
    opt.scale_logits = scaled;
    auto p = make_params<double>(3, 4, 5, 5, opt);
    auto xl = random_tensor<double>({2, 3, 4, 6}, rng), xr = random_tensor<double>({2, 3, 4, 6}, rng);
    auto [yl, yr] = full_row_cross_attention(xl, xr, p);
    const double s = p.logit_scale();
    EXPECT_LT(max_abs_diff(yr, loop_direction(xr, xl, p.proj[0], -6, 6, s)), 1e-6);
    EXPECT_LT(max_abs_diff(yl, loop_direction(xl, xr, p.proj[1], -6, 6, s)), 1e-6);
  }
}

TEST(WindowedAttention, MatchesLoopOracleForEveryWindow) {
  std::mt19937_64 rng(6);
  for (auto mode : {WindowMode::symmetric, WindowMode::one_sided})
    for (bool shared : {true, false})
      for (int hw = 0; hw < 7; ++hw) {
        AttentionOptions opt;
        opt.mode = mode;
        opt.shared_weights = shared;
        auto p = make_params<double>(3, 2, hw, 7 + hw, opt);
        auto xl = random_tensor<double>({1, 3, 3, 7}, rng), xr = random_tensor<double>({1, 3, 3, 7}, rng);
        auto [yl, yr] = windowed_cross_attention(xl, xr, p);
        const auto sr = window_span(hw, mode, true), sl = window_span(hw, mode, false);
        EXPECT_LT(max_abs_diff(yr, loop_direction(xr, xl, p.proj[0], sr.lo, sr.hi, 1.0)), 1e-12);
        EXPECT_LT(max_abs_diff(yl, loop_direction(xl, xr, p.proj[1], sl.lo, sl.hi, 1.0)), 1e-12);
      }
}

TEST(WindowedAttention, FullWindowEqualsFullRowFloat32) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const int W = 3 + trial * 3;
    auto p = make_params<float>(4, 3, W - 1, 9 + trial);
    auto xl = random_tensor<float>({2, 4, 3, W}, rng), xr = random_tensor<float>({2, 4, 3, W}, rng);
    auto [wl, wr] = windowed_cross_attention(xl, xr, p);
    auto [fl, fr] = full_row_cross_attention(xl, xr, p);
    EXPECT_LT(max_abs_diff(wl, fl), 1e-6);
    EXPECT_LT(max_abs_diff(wr, fr), 1e-6);
  }
}

TEST(FullRowAttention, WeightsSumToOne) {
  // With V = 1 everywhere, Att is the row sum of the softmax weights.
  std::mt19937_64 rng(10);
  auto p = make_params<double>(2, 3, 0, 11);
  for (auto& v : p.proj[0].wv.mutable_values()) v = 0;
  for (auto& v : p.proj[0].bv.mutable_values()) v = 1;
  auto xl = random_tensor<double>({1, 2, 3, 9}, rng, -3, 3), xr = random_tensor<double>({1, 2, 3, 9}, rng, -3, 3);
  p.half_window = 8;
  auto [yl, yr] = windowed_cross_attention(xl, xr, p);
  auto [fl, fr] = full_row_cross_attention(xl, xr, p);
  const auto& a = p.proj[0];
  auto ones = add(conv2d<double>(TD({1, 3, 3, 9}, 1.0), a.wo, a.bo), xr);
  EXPECT_LT(max_abs_diff(fr, ones), 1e-12);
  EXPECT_LT(max_abs_diff(yr, ones), 1e-12);
}

// --------------------------------------------------------------- properties

TEST(WindowedAttention, EpipolarLocality) {
  std::mt19937_64 rng(12);
  const int H = 3, W = 9;
  for (auto mode : {WindowMode::symmetric, WindowMode::one_sided})
    for (int hw : {0, 2, 3}) {
      AttentionOptions opt;
      opt.mode = mode;
      auto p = make_params<double>(2, 2, hw, 13 + hw, opt);
      auto xl = random_tensor<double>({1, 2, H, W}, rng), xr = random_tensor<double>({1, 2, H, W}, rng);
      const auto base = windowed_cross_attention(xl, xr, p).second;
      const auto span = window_span(hw, mode, true);
      for (int yp = 0; yp < H; ++yp)
        for (int xp = 0; xp < W; ++xp) {
          TD pert = xl.detach();
          pert.mutable_values()[static_cast<std::size_t>(yp) * W + xp] += 0.7;
          const auto out = windowed_cross_attention(pert, xr, p).second;
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
              const bool may = y == yp && xp - x >= span.lo && xp - x <= span.hi;
              bool changed = false;
              for (int c = 0; c < 2; ++c) changed = changed || out.at(0, c, y, x) != base.at(0, c, y, x);
              EXPECT_EQ(changed, may) << "hw " << hw << " source (" << yp << "," << xp << ") target (" << y << ","
                                      << x << ")";
            }
        }
    }
}

TEST(WindowedAttention, RowPermutationEquivariance) {
  std::mt19937_64 rng(14);
  const int H = 5, W = 6, C = 3;
  auto p = make_params<double>(C, 2, 2, 15);
  auto xl = random_tensor<double>({2, C, H, W}, rng), xr = random_tensor<double>({2, C, H, W}, rng);
  std::vector<int> perm{3, 0, 4, 1, 2};
  auto permute_rows = [&](const TD& t) {
    TD out(t.shape());
    auto o = out.mutable_values();
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) o[((static_cast<std::size_t>(n) * C + c) * H + y) * W + x] = t.at(n, c, perm[y], x);
    return out;
  };
  auto [yl, yr] = windowed_cross_attention(xl, xr, p);
  auto [pl, pr] = windowed_cross_attention(permute_rows(xl), permute_rows(xr), p);
  EXPECT_TRUE(ccnext::testing::bitwise_equal(pl, permute_rows(yl)));
  EXPECT_TRUE(ccnext::testing::bitwise_equal(pr, permute_rows(yr)));
}

TEST(WindowedAttention, SharedWeightsServeBothDirections) {
  ParameterStore<double> shared_store, split_store;
  make_params<double>(4, 2, 1, 16, {}, &shared_store);
  AttentionOptions split;
  split.shared_weights = false;
  make_params<double>(4, 2, 1, 16, split, &split_store);
  EXPECT_EQ(shared_store.size(), 8u);
  EXPECT_EQ(split_store.size(), 16u);
  EXPECT_EQ(shared_store.at(0).name, "ca.q.weight");
  EXPECT_EQ(split_store.at(0).name, "ca.right.q.weight");
  // swapping the inputs swaps the outputs under shared weights
  std::mt19937_64 rng(17);
  auto p = make_params<double>(4, 2, 2, 18);
  auto a = random_tensor<double>({1, 4, 2, 7}, rng), b = random_tensor<double>({1, 4, 2, 7}, rng);
  auto [y1l, y1r] = windowed_cross_attention(a, b, p);
  auto [y2l, y2r] = windowed_cross_attention(b, a, p);
  EXPECT_TRUE(ccnext::testing::bitwise_equal(y1l, y2r));
  EXPECT_TRUE(ccnext::testing::bitwise_equal(y1r, y2l));
}

TEST(WindowedAttention, GradCheckWholeBlock) {
  std::mt19937_64 rng(19);
  for (auto mode : {WindowMode::symmetric, WindowMode::one_sided}) {
    AttentionOptions opt;
    opt.mode = mode;
    opt.shared_weights = mode == WindowMode::symmetric;
    ParameterStore<double> store;
    auto p = make_params<double>(3, 2, 2, 20, opt, &store);
    auto xl = random_tensor<double>({2, 3, 3, 6}, rng, -1, 1, true);
    auto xr = random_tensor<double>({2, 3, 3, 6}, rng, -1, 1, true);
    std::vector<TD> params{xl, xr};
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store.at(i).name.find("k.bias") == std::string::npos) params.push_back(store.at(i).tensor);
    auto f = [&] {
      auto [yl, yr] = windowed_cross_attention(xl, xr, p);
      return add(ccnext::testing::probe(yl, 1), ccnext::testing::probe(yr, 2));
    };
    EXPECT_LT(grad_check<double>(f, params, 1e-6), 1e-5);
    // A key bias adds q.b to every logit of a query; softmax removes it.
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store.at(i).name.find("k.bias") != std::string::npos) {
        for (double g : store.at(i).tensor.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
      }
  }
}

TEST(FullRowAttention, GradCheck) {
  std::mt19937_64 rng(21);
  ParameterStore<double> store;
  AttentionOptions opt;
  opt.scale_logits = true;
  auto p = make_params<double>(2, 3, 0, 22, opt, &store);
  auto xl = random_tensor<double>({1, 2, 2, 5}, rng, -1, 1, true);
  auto xr = random_tensor<double>({1, 2, 2, 5}, rng, -1, 1, true);
  std::vector<TD> params{xl, xr};
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.at(i).name.find("k.bias") == std::string::npos) params.push_back(store.at(i).tensor);
  auto f = [&] {
    auto [yl, yr] = full_row_cross_attention(xl, xr, p);
    return add(ccnext::testing::probe(yl, 1), ccnext::testing::probe(yr, 2));
  };
  EXPECT_LT(grad_check<double>(f, params, 1e-6), 1e-5);
}

// -------------------------------------------------------------------- FLOPs

namespace {

// Counts multiply-accumulates by walking the computation.
double loop_count_macs(std::int64_t N, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t ci,
                       std::int64_t w) {
  double macs = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        macs += 3 * C * ci;  // q, k, v at this pixel
        macs += ci * C;      // output projection
        for (std::int64_t j = 0; j < w; ++j) macs += 2 * ci;  // one logit and one value accumulation
      }
  return macs;
}

}  // namespace

TEST(FlopCount, ClosedFormExample) {
  const auto f = flop_count_cross_attention({1, 64, 144, 320}, 64, 320, MacConvention::one_flop);
  EXPECT_DOUBLE_EQ(f.projections, 4.0 * 144 * 320 * 64 * 64);
  EXPECT_NEAR(f.projections / 1e6, 754.97, 0.005);
  EXPECT_NEAR(f.qk / 1e6, 943.72, 0.005);
  EXPECT_EQ(f.qk, f.av);
  EXPECT_NEAR(f.total() / 1e9, 2.642, 0.0005);
  const auto g = flop_count_cross_attention({1, 64, 144, 320}, 64, 320, MacConvention::two_flops);
  EXPECT_DOUBLE_EQ(g.total(), 2 * f.total());
}

TEST(FlopCount, MatchesLoopCountingOracle) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    auto r = [&](int lo, int hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng); };
    const auto N = r(1, 2), C = r(1, 16), H = r(1, 6), W = r(1, 20), ci = r(1, 16), w = r(1, W);
    const auto f = flop_count_cross_attention({N, C, H, W}, ci, w, MacConvention::one_flop);
    EXPECT_EQ(f.total(), loop_count_macs(N, C, H, W, ci, w));
  }
}

TEST(FlopCount, AffineAndMonotoneInWindow) {
  const std::array<std::int64_t, 4> s{1, 64, 144, 320};
  const double f1 = flop_count_cross_attention(s, 64, 1, MacConvention::one_flop).total();
  const double f2 = flop_count_cross_attention(s, 64, 2, MacConvention::one_flop).total();
  const double slope = f2 - f1;
  EXPECT_GT(slope, 0);
  for (std::int64_t w = 1; w <= 320; ++w) {
    const double f = flop_count_cross_attention(s, 64, w, MacConvention::one_flop).total();
    EXPECT_DOUBLE_EQ(f, f1 + slope * static_cast<double>(w - 1));
    if (w < 320) {
      EXPECT_LT(f, flop_count_cross_attention(s, 64, 320, MacConvention::one_flop).total());
    }
  }
  EXPECT_THROW(flop_count_cross_attention(s, 64, 0, MacConvention::one_flop), DomainError);
  EXPECT_THROW(flop_count_cross_attention(s, 64, 321, MacConvention::one_flop), DomainError);
}

TEST(FlopCount, MixedConventionSplitsConvAndAttention) {
  const std::array<std::int64_t, 4> s{1, 64, 144, 320};
  for (std::int64_t w : {1, 20, 41, 320}) {
    const auto one = flop_count_cross_attention(s, 64, w, MacConvention::one_flop);
    const auto two = flop_count_cross_attention(s, 64, w, MacConvention::two_flops);
    const auto mix = flop_count_cross_attention(s, 64, w, MacConvention::mixed);
    EXPECT_EQ(mix.projections, one.projections);
    EXPECT_EQ(mix.qk, two.qk);
    EXPECT_EQ(mix.av, two.av);
  }
  // Uniform conventions leave ratios unchanged; the mixed one does not.
  auto ratio = [&](MacConvention c) {
    return flop_count_cross_attention(s, 64, 40, c).total() / flop_count_cross_attention(s, 64, 320, c).total();
  };
  EXPECT_DOUBLE_EQ(ratio(MacConvention::one_flop), ratio(MacConvention::two_flops));
  EXPECT_DOUBLE_EQ(ratio(MacConvention::one_flop), 0.375);
  EXPECT_DOUBLE_EQ(ratio(MacConvention::mixed), 0.325 / 1.2);
}

#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ccnext/ops.hpp"

namespace ccnext {

/// Normalizes each spatial position's channel vector to zero mean and unit
/// variance, then applies a per-channel affine map.
template <class T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  if (x.rank() != 4) throw ShapeError("layer_norm_channels: expects (N,C,H,W), got " + to_string(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.size() != static_cast<std::size_t>(C) || beta.size() != static_cast<std::size_t>(C))
    throw ShapeError("layer_norm_channels: gamma/beta length must equal C=" + std::to_string(C));
  if (!(eps > T(0))) throw DomainError("layer_norm_channels: eps must be > 0");

  std::vector<T> y(x.size()), xhat(x.size()), inv_std(N * P);
  const T* X = x.vec().data();
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const T* px = X + static_cast<std::size_t>(n) * C * P + p;
      T mu = 0;
      for (int c = 0; c < C; ++c) mu += px[c * P];
      mu /= C;
      T var = 0;
      for (int c = 0; c < C; ++c) var += (px[c * P] - mu) * (px[c * P] - mu);
      var /= C;
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[n * P + p] = is;
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(n) * C + c) * P + p;
        xhat[i] = (X[i] - mu) * is;
        y[i] = gamma.vec()[c] * xhat[i] + beta.vec()[c];
      }
    }
  return detail::make_result<T>(x.shape(), std::move(y), {x, gamma, beta},
                                [N, C, P, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    const T* G = self.grad.data();
    const T* gam = pg->value.data();
    if (detail::wants_grad(pg) || detail::wants_grad(pb)) {
      T* gg = detail::wants_grad(pg) ? pg->grad_buffer().data() : nullptr;
      T* gb = detail::wants_grad(pb) ? pb->grad_buffer().data() : nullptr;
      for (int c = 0; c < C; ++c) {
        T sg = 0, sb = 0;
        for (int n = 0; n < N; ++n)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (static_cast<std::size_t>(n) * C + c) * P + p;
            sg += G[i] * xhat[i];
            sb += G[i];
          }
        if (gg) gg[c] += sg;
        if (gb) gb[c] += sb;
      }
    }
    if (!detail::wants_grad(px)) return;
    T* GX = px->grad_buffer().data();
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        T m1 = 0, m2 = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * C + c) * P + p;
          const T d = G[i] * gam[c];
          m1 += d;
          m2 += d * xhat[i];
        }
        m1 /= C;
        m2 /= C;
        const T is = inv_std[n * P + p];
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(n) * C + c) * P + p;
          GX[i] += is * (G[i] * gam[c] - m1 - xhat[i] * m2);
        }
      }
  });
}

/// A named trainable tensor plus its Adam moments.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> m;
  std::vector<T> v;
  long step_count = 0;
};

/// Ordered registry of a model's parameters. Names are unique.
template <class T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw Error("parameter store: duplicate name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{name, t, std::vector<T>(t.size(), T(0)), std::vector<T>(t.size(), T(0)), 0});
    return t;
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  Parameter<T>& at(std::size_t i) { return params_.at(i); }
  const Parameter<T>& at(std::size_t i) const { return params_.at(i); }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Truncated normal in [-2 std, 2 std] by rejection.
template <class T>
Tensor<T> trunc_normal(Shape shape, T stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(numel(shape));
  for (auto& e : v) {
    double z;
    do z = dist(rng);
    while (std::abs(z) > 2.0);
    e = static_cast<T>(z * stddev);
  }
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace ccnext

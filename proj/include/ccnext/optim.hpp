#pragma once

#include <cmath>

#include "ccnext/nn.hpp"

namespace ccnext {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter. Gradients are left
/// untouched; the caller resets them.
template <class T>
void adam_step(ParameterStore<T>& params, const AdamOptions& opt) {
  if (!(opt.lr >= 0.0)) throw DomainError("adam_step: lr must be >= 0");
  for (auto& p : params)
    if (!p.tensor.has_grad()) throw Error("adam_step: parameter '" + p.name + "' has no gradient");
  for (auto& p : params) {
    ++p.step_count;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step_count));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step_count));
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.m[i] = static_cast<T>(opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i]);
      p.v[i] = static_cast<T>(opt.beta2 * p.v[i] + (1.0 - opt.beta2) * static_cast<double>(g[i]) * g[i]);
      const double mhat = p.m[i] / c1;
      const double vhat = p.v[i] / c2;
      w[i] = static_cast<T>(w[i] - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.tensor.mutable_grad()) g *= s;
  }
  return norm;
}

}  // namespace ccnext

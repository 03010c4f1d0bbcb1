#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "ccnext/tensor.hpp"

namespace ccnext {

struct GradCheckOptions {
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of a scalar computation against central
/// differences. Returns the worst per-tensor relative error
/// ||analytic - numeric|| / (||analytic|| + ||numeric|| + 1e-12), norms taken
/// over the probed entries of each tensor.
template <class T>
double grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double eps,
                  const GradCheckOptions& opt = {}) {
  if (!(eps > 0)) throw DomainError("grad_check: eps must be > 0");
  {
    NoGradGuard ng;
    const Tensor<T> a = f();
    const Tensor<T> b = f();
    if (a.size() != 1) throw ShapeError("grad_check: computation must return a scalar");
    if (std::memcmp(a.vec().data(), b.vec().data(), sizeof(T)) != 0)
      throw Error("grad_check: computation is not deterministic");
  }
  for (auto& p : params) {
    if (!p.requires_grad()) throw Error("grad_check: every checked tensor must require grad");
    p.zero_grad();
  }
  f().backward();

  std::mt19937_64 rng(opt.seed);
  double worst = 0;
  for (auto& p : params) {
    std::vector<std::size_t> idx(p.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_entries && idx.size() > opt.max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries);
    }
    const auto analytic = p.grad();
    auto w = p.mutable_values();
    double diff2 = 0, a2 = 0, n2 = 0;
    NoGradGuard ng;
    for (std::size_t i : idx) {
      const T saved = w[i];
      w[i] = static_cast<T>(saved + eps);
      const double up = f().item();
      w[i] = static_cast<T>(saved - eps);
      const double down = f().item();
      w[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff2) / (std::sqrt(a2) + std::sqrt(n2) + 1e-12));
  }
  return worst;
}

}  // namespace ccnext

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ccnext/tensor.hpp"

namespace ccnext {

struct DepthMetrics {
  double abs_rel = 0;
  double sq_rel = 0;
  double rmse = 0;
  double rmse_log = 0;
  double d1_25 = 0;
  double d1_25_2 = 0;
  double d1_25_3 = 0;
};

struct DisparityMetrics {
  double epe = 0;
  double d1_error = 0;
};

namespace detail {

template <class T>
void check_metric_inputs(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, const char* who) {
  if (pred.shape() != gt.shape() || gt.shape() != mask.shape())
    throw ShapeError(std::string(who) + ": pred " + to_string(pred.shape()) + ", gt " + to_string(gt.shape()) +
                     ", mask " + to_string(mask.shape()) + " differ");
}

}  // namespace detail

/// Depth errors over pixels whose mask entry is nonzero.
template <class T>
DepthMetrics depth_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  detail::check_metric_inputs(pred, gt, mask, "depth_metrics");
  const auto& p = pred.vec();
  const auto& g = gt.vec();
  const auto& m = mask.vec();
  double abs_rel = 0, sq_rel = 0, se = 0, sle = 0;
  std::size_t n = 0, a1 = 0, a2 = 0, a3 = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] == T(0)) continue;
    const double pv = p[i], gv = g[i];
    if (!(gv > 0)) throw DomainError("depth_metrics: nonpositive ground truth inside the mask");
    if (!(pv > 0)) throw DomainError("depth_metrics: nonpositive prediction inside the mask; clamp first");
    const double d = pv - gv;
    abs_rel += std::abs(d) / gv;
    sq_rel += d * d / gv;
    se += d * d;
    const double ld = std::log(pv) - std::log(gv);
    sle += ld * ld;
    const double ratio = std::max(pv / gv, gv / pv);
    a1 += ratio < 1.25;
    a2 += ratio < 1.25 * 1.25;
    a3 += ratio < 1.25 * 1.25 * 1.25;
    ++n;
  }
  if (n == 0) throw DomainError("depth_metrics: empty valid mask");
  const double inv = 1.0 / static_cast<double>(n);
  return {abs_rel * inv, sq_rel * inv, std::sqrt(se * inv), std::sqrt(sle * inv), a1 * inv, a2 * inv, a3 * inv};
}

/// End-point error and the fraction of pixels off by more than 3 px and 5%.
template <class T>
DisparityMetrics disparity_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  detail::check_metric_inputs(pred, gt, mask, "disparity_metrics");
  const auto& p = pred.vec();
  const auto& g = gt.vec();
  const auto& m = mask.vec();
  double epe = 0;
  std::size_t n = 0, bad = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] == T(0)) continue;
    const double e = std::abs(static_cast<double>(p[i]) - g[i]);
    epe += e;
    bad += e > 3.0 && e > 0.05 * g[i];
    ++n;
  }
  if (n == 0) throw DomainError("disparity_metrics: empty valid mask");
  return {epe / static_cast<double>(n), static_cast<double>(bad) / static_cast<double>(n)};
}

/// (1,1,h,w) mask of the usual driving-benchmark evaluation crop; all ones
/// when disabled.
template <class T>
Tensor<T> garg_crop_mask(int h, int w, bool enabled = true) {
  if (h <= 0 || w <= 0) throw DomainError("garg_crop_mask: h and w must be positive");
  Tensor<T> m({1, 1, h, w}, enabled ? T(0) : T(1));
  if (!enabled) return m;
  const int r0 = static_cast<int>(std::floor(0.40810811 * h)), r1 = static_cast<int>(std::floor(0.99189189 * h));
  const int c0 = static_cast<int>(std::floor(0.03594771 * w)), c1 = static_cast<int>(std::floor(0.96405229 * w));
  auto v = m.mutable_values();
  for (int y = r0; y < r1; ++y)
    for (int x = c0; x < c1; ++x) v[static_cast<std::size_t>(y) * w + x] = T(1);
  return m;
}

/// Evaluation range: predictions clamped into [min_depth, max_depth], ground
/// truth valid inside (0, max_depth].
struct EvalRange {
  double min_depth = 1e-3;
  double max_depth = 80.0;
};

template <class T>
Tensor<T> clamp_depth(const Tensor<T>& depth, const EvalRange& r) {
  std::vector<T> v(depth.vec());
  for (auto& x : v) x = static_cast<T>(std::clamp<double>(x, r.min_depth, r.max_depth));
  return Tensor<T>(depth.shape(), std::move(v));
}

template <class T>
Tensor<T> depth_valid_mask(const Tensor<T>& gt, const EvalRange& r) {
  std::vector<T> v(gt.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gt.vec()[i] > T(0) && gt.vec()[i] <= r.max_depth ? T(1) : T(0);
  return Tensor<T>(gt.shape(), std::move(v));
}

/// 1 where the ground truth is valid (nonzero).
template <class T>
Tensor<T> gt_valid_mask(const Tensor<T>& gt) {
  std::vector<T> v(gt.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gt.vec()[i] > T(0) ? T(1) : T(0);
  return Tensor<T>(gt.shape(), std::move(v));
}

/// Median ratio gt/pred over the mask; off by default for stereo.
template <class T>
double median_scale(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask) {
  std::vector<double> pv, gv;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (mask.vec()[i] != T(0)) {
      pv.push_back(pred.vec()[i]);
      gv.push_back(gt.vec()[i]);
    }
  if (pv.empty()) throw DomainError("median_scale: empty mask");
  auto med = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size() / 2;
    return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
  };
  return med(gv) / med(pv);
}

// ------------------------------------------------------------------ reports

inline const std::array<const char*, 9>& metric_names() {
  static const std::array<const char*, 9> names{"abs_rel", "sq_rel",  "rmse", "rmse_log", "d1_25",
                                                "d1_25_2", "d1_25_3", "epe",  "d1_err"};
  return names;
}

struct MetricRow {
  std::string image;
  DepthMetrics depth;
  std::optional<DisparityMetrics> disparity;

  /// Value by column index of metric_names(); NaN for an absent disparity pair.
  double value(std::size_t k) const {
    switch (k) {
      case 0: return depth.abs_rel;
      case 1: return depth.sq_rel;
      case 2: return depth.rmse;
      case 3: return depth.rmse_log;
      case 4: return depth.d1_25;
      case 5: return depth.d1_25_2;
      case 6: return depth.d1_25_3;
      case 7: return disparity ? disparity->epe : std::nan("");
      case 8: return disparity ? disparity->d1_error : std::nan("");
    }
    throw DomainError("metric index out of range");
  }
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

class MetricReport {
 public:
  void add(MetricRow row) { rows_.push_back(std::move(row)); }
  std::size_t n_images() const { return rows_.size(); }
  const std::vector<MetricRow>& rows() const { return rows_; }
  bool has_disparity() const {
    return !rows_.empty() && std::all_of(rows_.begin(), rows_.end(), [](const MetricRow& r) { return r.disparity; });
  }

  void sort_by_image() {
    std::stable_sort(rows_.begin(), rows_.end(), [](const MetricRow& a, const MetricRow& b) { return a.image < b.image; });
  }

  std::vector<double> column(std::size_t k) const {
    std::vector<double> v;
    for (const auto& r : rows_) v.push_back(r.value(k));
    return v;
  }
  double mean(std::size_t k) const {
    double s = 0;
    for (double x : column(k)) s += x;
    return s / static_cast<double>(rows_.size());
  }
  double median(std::size_t k) const { return median_of(column(k)); }

  /// One row per image, then "*mean" and "*median" aggregate rows.
  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("metric report: cannot write '" + path + "'");
    os << "image";
    for (const char* n : metric_names()) os << ',' << n;
    os << '\n';
    auto cell = [](double v) {
      if (std::isnan(v)) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      return std::string(buf);
    };
    for (const auto& r : rows_) {
      os << r.image;
      for (std::size_t k = 0; k < metric_names().size(); ++k) os << ',' << cell(r.value(k));
      os << '\n';
    }
    if (rows_.empty()) return;
    for (int agg = 0; agg < 2; ++agg) {
      os << (agg == 0 ? "*mean" : "*median");
      for (std::size_t k = 0; k < metric_names().size(); ++k) os << ',' << cell(agg == 0 ? mean(k) : median(k));
      os << '\n';
    }
  }

  static MetricReport read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("metric report: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw IoError("metric report: '" + path + "' is empty");
    MetricReport rep;
    int lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '*') continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string c;
      while (std::getline(ss, c, ',')) cells.push_back(c);
      if (line.back() == ',') cells.emplace_back();
      if (cells.size() != 1 + metric_names().size())
        throw IoError("metric report: '" + path + "' line " + std::to_string(lineno) + " has " +
                      std::to_string(cells.size()) + " cells");
      auto num = [&](std::size_t k) {
        try {
          return std::stod(cells[k]);
        } catch (const std::exception&) {
          throw IoError("metric report: '" + path + "' line " + std::to_string(lineno) + ": bad number '" + cells[k] +
                        "'");
        }
      };
      MetricRow r;
      r.image = cells[0];
      r.depth = {num(1), num(2), num(3), num(4), num(5), num(6), num(7)};
      if (!cells[8].empty() && !cells[9].empty()) r.disparity = DisparityMetrics{num(8), num(9)};
      rep.add(std::move(r));
    }
    return rep;
  }

 private:
  std::vector<MetricRow> rows_;
};

}  // namespace ccnext

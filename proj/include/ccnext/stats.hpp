#pragma once

// Shapiro-Wilk normality test (Royston's approximation), Wilcoxon signed-rank
// test with Bonferroni correction, and the per-metric median comparison.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "ccnext/metrics.hpp"

namespace ccnext {

struct ShapiroWilkResult {
  double w = 0;
  double p = 0;
};

namespace detail {

inline double poly(const double* c, int nord, double x) {
  double r = c[nord - 1];
  for (int i = nord - 2; i >= 0; --i) r = r * x + c[i];
  return r;
}

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }
inline double normal_upper(double z) { return boost::math::cdf(boost::math::complement(boost::math::normal(), z)); }

}  // namespace detail

inline ShapiroWilkResult shapiro_wilk(std::vector<double> x) {
  const int n = static_cast<int>(x.size());
  if (n < 3 || n > 5000) throw DomainError("shapiro_wilk: sample size must lie in [3, 5000], got " + std::to_string(n));
  std::sort(x.begin(), x.end());
  if (!(x.back() - x.front() > 0)) throw DomainError("shapiro_wilk: sample is constant");

  // antisymmetric coefficients a[0..n-1] for ascending order statistics
  std::vector<double> a(n, 0.0);
  const double an = n;
  if (n == 3) {
    a[0] = -std::sqrt(0.5);
    a[2] = std::sqrt(0.5);
  } else {
    static const double c1[] = {0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056};
    static const double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
    std::vector<double> m(n);
    double summ2 = 0;
    for (int i = 0; i < n; ++i) {
      m[i] = detail::normal_quantile((i + 1 - 0.375) / (an + 0.25));
      summ2 += m[i] * m[i];
    }
    const double ssumm2 = std::sqrt(summ2), rsn = 1.0 / std::sqrt(an);
    const double a1 = detail::poly(c1, 6, rsn) + m[n - 1] / ssumm2;
    int i1;
    double fac;
    if (n > 5) {
      i1 = 2;
      const double a2 = detail::poly(c2, 6, rsn) + m[n - 2] / ssumm2;
      fac = std::sqrt((summ2 - 2 * m[n - 1] * m[n - 1] - 2 * m[n - 2] * m[n - 2]) / (1 - 2 * a1 * a1 - 2 * a2 * a2));
      a[n - 2] = a2;
      a[1] = -a2;
    } else {
      i1 = 1;
      fac = std::sqrt((summ2 - 2 * m[n - 1] * m[n - 1]) / (1 - 2 * a1 * a1));
    }
    a[n - 1] = a1;
    a[0] = -a1;
    for (int i = i1; i < n - i1; ++i) a[i] = m[i] / fac;
  }

  double mean = 0;
  for (double v : x) mean += v;
  mean /= an;
  double num = 0, den = 0;
  for (int i = 0; i < n; ++i) {
    num += a[i] * x[i];
    den += (x[i] - mean) * (x[i] - mean);
  }
  double w = std::min(1.0, num * num / den);

  ShapiroWilkResult r{w, 1.0};
  if (n == 3) {
    const double pi6 = 6.0 / std::numbers::pi, stqr = std::numbers::pi / 3.0;
    r.p = std::max(0.0, pi6 * (std::asin(std::sqrt(w)) - stqr));
    return r;
  }
  if (w >= 1.0) return r;
  static const double g[] = {-2.273, 0.459};
  static const double c3[] = {0.544, -0.39978, 0.025054, -6.714e-4};
  static const double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
  static const double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
  static const double c6[] = {-0.4803, -0.082676, 0.0030302};
  double y = std::log(1.0 - w), mu, sigma;
  if (n <= 11) {
    const double gamma = detail::poly(g, 2, an);
    if (y >= gamma) {
      r.p = 1e-99;
      return r;
    }
    y = -std::log(gamma - y);
    mu = detail::poly(c3, 4, an);
    sigma = std::exp(detail::poly(c4, 4, an));
  } else {
    const double xx = std::log(an);
    mu = detail::poly(c5, 4, xx);
    sigma = std::exp(detail::poly(c6, 3, xx));
  }
  r.p = detail::normal_upper((y - mu) / sigma);
  return r;
}

struct WilcoxonResult {
  double statistic = 0;  // min(W+, W-)
  double p_raw = 1;
  double p_bonferroni = 1;
  int n_effective = 0;
  bool exact = false;
};

inline constexpr int kWilcoxonExactMax = 25;

/// Two-sided signed-rank test on paired samples. Zero differences are
/// dropped; tied magnitudes share midranks.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                           int correction_count = 1) {
  if (a.size() != b.size())
    throw ShapeError("wilcoxon: samples differ in length (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  if (correction_count < 1) throw DomainError("wilcoxon: correction_count must be >= 1");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0) d.push_back(a[i] - b[i]);
  const int n = static_cast<int>(d.size());
  if (n == 0) throw DomainError("wilcoxon: all paired differences are zero");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int i, int j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<int> rank2(n);  // doubled midranks, always integral
  double tie_term = 0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    for (int k = i; k <= j; ++k) rank2[order[k]] = i + j + 2;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long plus2 = 0, total2 = 0;
  for (int i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) plus2 += rank2[i];
  }
  const long minus2 = total2 - plus2;

  WilcoxonResult r;
  r.n_effective = n;
  r.statistic = std::min(plus2, minus2) / 2.0;
  if (n <= kWilcoxonExactMax) {
    // counts of each doubled rank sum over the 2^n sign patterns
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1;
    long reach = 0;
    for (int i = 0; i < n; ++i) {
      reach += rank2[i];
      for (long s = reach; s >= rank2[i]; --s) count[s] += count[s - rank2[i]];
    }
    const double patterns = std::ldexp(1.0, n);
    double lower = 0, upper = 0;
    for (long s = 0; s <= total2; ++s) {
      if (s <= plus2) lower += count[s];
      if (s >= plus2) upper += count[s];
    }
    r.p_raw = std::min(1.0, 2.0 * std::min(lower, upper) / patterns);
    r.exact = true;
  } else {
    const double nn = n;
    const double mean = nn * (nn + 1) / 4.0;
    const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
    const double z = (plus2 / 2.0 - mean) / std::sqrt(var);
    r.p_raw = std::min(1.0, 2.0 * detail::normal_upper(std::abs(z)));
  }
  r.p_bonferroni = std::min(1.0, r.p_raw * correction_count);
  return r;
}

struct ComparisonRow {
  std::string metric;
  std::string model;
  double median = 0;
  bool reference = false;
  bool identical = false;  // every paired difference vs the reference is zero
  double p_raw = 1;
  double p_bonferroni = 1;
  bool significant = false;
};

/// Medians per metric and model, plus Wilcoxon tests of every model against
/// `reports[reference]`, Bonferroni-corrected over all (models-1)*metrics
/// comparisons.
inline std::vector<ComparisonRow> compare_models(std::vector<MetricReport> reports, const std::vector<std::string>& names,
                                                 double alpha = 0.05, std::size_t reference = 0) {
  if (reports.size() < 2) throw DomainError("compare_models: need at least two reports");
  if (names.size() != reports.size()) throw DomainError("compare_models: one name per report required");
  if (reference >= reports.size()) throw DomainError("compare_models: reference index out of range");
  for (auto& r : reports) r.sort_by_image();
  for (std::size_t k = 1; k < reports.size(); ++k) {
    const auto& a = reports[0].rows();
    const auto& b = reports[k].rows();
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].image == b[i].image;
    if (!same)
      throw DomainError("compare_models: reports '" + names[0] + "' and '" + names[k] +
                        "' do not cover the same image set");
  }
  if (reports[0].n_images() == 0) throw DomainError("compare_models: reports are empty");
  bool disparity = true;
  for (const auto& r : reports) disparity = disparity && r.has_disparity();
  const std::size_t metrics = disparity ? metric_names().size() : 7;
  const int corrections = static_cast<int>((reports.size() - 1) * metrics);

  std::vector<ComparisonRow> out;
  for (std::size_t k = 0; k < metrics; ++k) {
    const auto ref = reports[reference].column(k);
    for (std::size_t m = 0; m < reports.size(); ++m) {
      ComparisonRow row;
      row.metric = metric_names()[k];
      row.model = names[m];
      const auto col = reports[m].column(k);
      row.median = median_of(col);
      if (m == reference) {
        row.reference = true;
      } else if (col == ref) {
        row.identical = true;
      } else {
        const auto w = wilcoxon_signed_rank(col, ref, corrections);
        row.p_raw = w.p_raw;
        row.p_bonferroni = w.p_bonferroni;
        row.significant = w.p_bonferroni < alpha;
      }
      out.push_back(row);
    }
  }
  return out;
}

/// CSV with columns metric, model, median, p_raw, p_bonferroni, significant.
/// The reference model leaves the p columns empty; identical models report 1.
inline void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRow>& rows) {
  os << "metric,model,median,p_raw,p_bonferroni,significant\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.reference)
      std::snprintf(buf, sizeof buf, "%s,%s,%.9g,,,reference\n", r.metric.c_str(), r.model.c_str(), r.median);
    else
      std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%s\n", r.metric.c_str(), r.model.c_str(), r.median, r.p_raw,
                    r.p_bonferroni, r.identical ? "identical" : (r.significant ? "yes" : "no"));
    os << buf;
  }
}

inline void write_comparison_csv(const std::string& path, const std::vector<ComparisonRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("comparison: cannot write '" + path + "'");
  write_comparison_csv(os, rows);
  if (!os) throw IoError("comparison: write failed for '" + path + "'");
}

}  // namespace ccnext

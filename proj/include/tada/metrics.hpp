#pragma once

// Masked angular-error evaluation. Errors are pooled over all valid pixels of
// all evaluated images; thresholds use strict "<".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/tensor.hpp"

namespace tada::metrics {

class MetricsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) comp_ += (sum_ - t) + x;
    else comp_ += (x - t) + sum_;
    sum_ = t;
  }
  [[nodiscard]] double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0, comp_ = 0.0;
};

struct RunMeta {
  std::string regime;
  std::string da_mode = "none";
  std::uint64_t seed = 0;
  std::string spec_hash;
  std::string config_hash;
  std::string condition;  ///< dataset condition name, e.g. "mismatched"
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunMeta, regime, da_mode, seed, spec_hash, config_hash, condition)

struct MetricsReport {
  double rmse_deg = 0.0;
  double mean_deg = 0.0;
  double median_deg = 0.0;
  double pct_below_11_25 = 0.0;
  double pct_below_30 = 0.0;
  std::uint64_t n_pixels = 0;
  RunMeta meta;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MetricsReport, rmse_deg, mean_deg, median_deg, pct_below_11_25,
                                                pct_below_30, n_pixels, meta)

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"pct_below_11_25", "pct_below_30", "rmse_deg", "mean_deg", "median_deg"};
  return names;
}

inline double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "rmse_deg") return r.rmse_deg;
  if (name == "mean_deg") return r.mean_deg;
  if (name == "median_deg") return r.median_deg;
  if (name == "pct_below_11_25") return r.pct_below_11_25;
  if (name == "pct_below_30") return r.pct_below_30;
  throw MetricsError("unknown metric " + name);
}

/// Per-pixel angular error in degrees for valid pixels. Normals are pixel-major
/// interleaved xyz triples; `valid` has one entry per pixel.
template <class T>
std::vector<double> angular_error_map(std::span<const T> pred, std::span<const T> gt, std::span<const std::uint8_t> valid) {
  if (pred.size() != gt.size() || pred.size() != valid.size() * 3) throw MetricsError("angular_error_map: size mismatch");
  std::vector<double> out;
  for (std::size_t p = 0; p < valid.size(); ++p) {
    if (!valid[p]) continue;
    double dot = 0.0;
    for (int c = 0; c < 3; ++c) dot += static_cast<double>(pred[p * 3 + c]) * static_cast<double>(gt[p * 3 + c]);
    out.push_back(std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi);
  }
  if (out.empty()) throw MetricsError("angular_error_map: empty mask");
  return out;
}

/// NCHW prediction/label tensors with an [N, h, w] mask.
template <class T>
std::vector<double> angular_error_map(const Tensor<T>& pred, const Tensor<T>& gt, std::span<const std::uint8_t> valid) {
  pred.require_same(gt, "angular_error_map");
  const Shape4 s = pred.shape();
  if (s.c != 3 || valid.size() != static_cast<std::size_t>(s.n) * s.plane()) throw MetricsError("angular_error_map: bad shapes");
  std::vector<double> out;
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        if (!valid[(static_cast<std::size_t>(n) * s.h + i) * s.w + j]) continue;
        double dot = 0.0;
        for (int c = 0; c < 3; ++c) dot += static_cast<double>(pred(n, c, i, j)) * static_cast<double>(gt(n, c, i, j));
        out.push_back(std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi);
      }
  if (out.empty()) throw MetricsError("angular_error_map: empty mask");
  return out;
}

/// Pooled statistics over all supplied errors. Median is the lower middle for even counts.
inline MetricsReport aggregate(std::span<const double> errors) {
  if (errors.empty()) throw MetricsError("aggregate: no valid pixels");
  CompensatedSum sum, sq;
  std::size_t below11 = 0, below30 = 0;
  for (double e : errors) {
    sum.add(e);
    sq.add(e * e);
    below11 += e < 11.25;
    below30 += e < 30.0;
  }
  const auto n = static_cast<double>(errors.size());
  std::vector<double> sorted(errors.begin(), errors.end());
  const std::size_t mid = (sorted.size() - 1) / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  MetricsReport r;
  r.n_pixels = errors.size();
  r.mean_deg = sum.value() / n;
  r.rmse_deg = std::sqrt(sq.value() / n);
  // Rounding can leave rmse a few ulps under the mean for constant errors.
  r.rmse_deg = std::max(r.rmse_deg, r.mean_deg);
  r.median_deg = sorted[mid];
  r.pct_below_11_25 = static_cast<double>(below11) / n;
  r.pct_below_30 = static_cast<double>(below30) / n;
  return r;
}

inline MetricsReport aggregate(const std::vector<std::vector<double>>& maps) {
  std::vector<double> pooled;
  for (const auto& m : maps) pooled.insert(pooled.end(), m.begin(), m.end());
  return aggregate(std::span<const double>(pooled));
}

// ---------------------------------------------------------------------------
// Multi-run aggregation

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation
  std::size_t n = 0;
};

inline MetricStats stats_of(std::span<const double> values) {
  MetricStats s;
  s.n = values.size();
  if (values.empty()) return s;
  CompensatedSum sum;
  for (double v : values) sum.add(v);
  s.mean = sum.value() / static_cast<double>(s.n);
  if (s.n > 1) {
    CompensatedSum sq;
    for (double v : values) sq.add((v - s.mean) * (v - s.mean));
    s.std = std::sqrt(sq.value() / static_cast<double>(s.n - 1));
  }
  return s;
}

struct RunsSummary {
  RunMeta meta;  ///< shared metadata; seed is 0
  std::vector<std::uint64_t> seeds;
  std::map<std::string, MetricStats> stats;
};

/// Mean and sample std per metric across seeds of one method.
inline RunsSummary aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw MetricsError("aggregate_runs needs at least two runs");
  RunsSummary out;
  out.meta = reports.front().meta;
  out.meta.seed = 0;
  for (const auto& r : reports) {
    if (r.meta.regime != out.meta.regime || r.meta.da_mode != out.meta.da_mode || r.meta.spec_hash != out.meta.spec_hash ||
        r.meta.condition != out.meta.condition) {
      throw MetricsError("aggregate_runs: mismatched run metadata (" + r.meta.regime + "/" + r.meta.da_mode + " vs " +
                         out.meta.regime + "/" + out.meta.da_mode + ")");
    }
    out.seeds.push_back(r.meta.seed);
  }
  for (const auto& name : metric_names()) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(metric_value(r, name));
    out.stats[name] = stats_of(v);
  }
  return out;
}

struct Comparison {
  double diff = 0.0;        ///< mean(a) - mean(b)
  double pooled_std = 0.0;  ///< sqrt((s_a^2 + s_b^2) / 2)
  double welch_t = 0.0;
  bool significant = false; ///< |diff| exceeds pooled std (and the t threshold, if set)
};

/// Welch-style comparison of two methods on one metric.
inline Comparison compare(const MetricStats& a, const MetricStats& b, double t_threshold = 0.0) {
  Comparison c;
  c.diff = a.mean - b.mean;
  c.pooled_std = std::sqrt((a.std * a.std + b.std * b.std) / 2.0);
  const double se = std::sqrt(a.std * a.std / std::max<std::size_t>(a.n, 1) + b.std * b.std / std::max<std::size_t>(b.n, 1));
  if (se > 0.0) c.welch_t = c.diff / se;
  else c.welch_t = c.diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), c.diff);
  c.significant = std::abs(c.diff) > c.pooled_std && std::abs(c.welch_t) >= t_threshold;
  return c;
}

}  // namespace tada::metrics

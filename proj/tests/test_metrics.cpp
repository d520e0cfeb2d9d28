#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "tada/metrics.hpp"

using namespace tada;
using namespace tada::metrics;

namespace {

std::vector<double> errs(std::initializer_list<double> v) { return v; }

MetricsReport agg(const std::vector<double>& v) { return aggregate(std::span<const double>(v)); }

Tensor<double> unit_field(int n, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor<double> t({n, 3, h, w});
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double v[3] = {g(rng), g(rng), std::abs(g(rng)) + 0.1};
        const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (int c = 0; c < 3; ++c) t(b, c, i, j) = v[c] / len;
      }
  return t;
}

}  // namespace

TEST(AngularError, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const auto a = unit_field(1, 4, 4, rng);
  const std::vector<std::uint8_t> mask(16, 1);
  for (double e : angular_error_map(a, a, mask)) EXPECT_NEAR(e, 0.0, 1e-5);
}

TEST(AngularError, OrthogonalIsNinety) {
  const std::vector<double> p{1, 0, 0}, g{0, 0, 1};
  const std::vector<std::uint8_t> m{1};
  EXPECT_DOUBLE_EQ(angular_error_map<double>(p, g, m)[0], 90.0);
}

TEST(AngularError, DotAboveOneIsClamped) {
  const double s = std::sqrt(1.0 + 1e-9);
  const std::vector<double> p{0, 0, s}, g{0, 0, s};
  const std::vector<std::uint8_t> m{1};
  const double e = angular_error_map<double>(p, g, m)[0];
  EXPECT_FALSE(std::isnan(e));
  EXPECT_EQ(e, 0.0);
}

TEST(AngularError, OnlyValidPixelsContribute) {
  const std::vector<double> p{1, 0, 0, 0, 0, 1}, g{0, 0, 1, 0, 0, 1};
  const std::vector<std::uint8_t> m{0, 1};
  const auto e = angular_error_map<double>(p, g, m);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e[0], 0.0);
}

TEST(AngularError, EmptyMaskThrows) {
  const std::vector<double> p{0, 0, 1};
  const std::vector<std::uint8_t> m{0};
  EXPECT_THROW(angular_error_map<double>(p, p, m), MetricsError);
}

TEST(Aggregate, TenAndForty) {
  const auto r = agg(errs({10.0, 40.0}));
  EXPECT_DOUBLE_EQ(r.pct_below_11_25, 0.5);
  EXPECT_DOUBLE_EQ(r.pct_below_30, 0.5);
  EXPECT_DOUBLE_EQ(r.mean_deg, 25.0);
  EXPECT_DOUBLE_EQ(r.median_deg, 10.0);
  EXPECT_NEAR(r.rmse_deg, std::sqrt(850.0), 1e-12);
  EXPECT_NEAR(r.rmse_deg, 29.155, 1e-3);
}

TEST(Aggregate, AllZero) {
  const auto r = agg(std::vector<double>(7, 0.0));
  EXPECT_EQ(r.rmse_deg, 0.0);
  EXPECT_EQ(r.mean_deg, 0.0);
  EXPECT_EQ(r.median_deg, 0.0);
  EXPECT_EQ(r.pct_below_11_25, 1.0);
  EXPECT_EQ(r.pct_below_30, 1.0);
}

TEST(Aggregate, StrictThresholds) {
  EXPECT_EQ(agg(errs({29.9})).pct_below_30, 1.0);
  EXPECT_EQ(agg(errs({30.0})).pct_below_30, 0.0);
  EXPECT_EQ(agg(errs({11.25})).pct_below_11_25, 0.0);
}

TEST(Aggregate, LowerMedianForEvenCounts) {
  EXPECT_EQ(agg(errs({4.0, 1.0, 3.0, 2.0})).median_deg, 2.0);
  EXPECT_EQ(agg(errs({5.0, 1.0, 3.0})).median_deg, 3.0);
}

TEST(Aggregate, PooledNotImageAveraged) {
  // 1 pixel at 0 deg in image A, 3 pixels at 40 deg in image B: pooled mean 30, image mean 20.
  const auto r = aggregate(std::vector<std::vector<double>>{{0.0}, {40.0, 40.0, 40.0}});
  EXPECT_DOUBLE_EQ(r.mean_deg, 30.0);
}

TEST(Aggregate, EmptyThrows) { EXPECT_THROW(agg({}), MetricsError); }

TEST(AggregateProperty, InvariantsAndPermutation) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 180.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> e(1 + trial * 3);
    for (auto& x : e) x = u(rng);
    const auto r = agg(e);
    EXPECT_GE(r.rmse_deg, r.mean_deg);
    EXPECT_LE(r.pct_below_11_25, r.pct_below_30);
    EXPECT_GE(r.pct_below_11_25, 0.0);
    EXPECT_LE(r.pct_below_30, 1.0);
    std::shuffle(e.begin(), e.end(), rng);
    const auto s = agg(e);
    EXPECT_NEAR(s.mean_deg, r.mean_deg, 1e-9);
    EXPECT_NEAR(s.rmse_deg, r.rmse_deg, 1e-9);
    EXPECT_EQ(s.median_deg, r.median_deg);
  }
}

TEST(AggregateProperty, ConstantErrorsKeepRmseAtLeastMean) {
  for (double v : {0.1, 1.0 / 3.0, 17.3, 89.999}) {
    const auto r = agg(std::vector<double>(1001, v));
    EXPECT_GE(r.rmse_deg, r.mean_deg);
  }
}

TEST(CompensatedSum, ReductionOrderStable) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 180.0);
  std::vector<double> v(100000);
  for (auto& x : v) x = u(rng);
  CompensatedSum a, b;
  for (double x : v) a.add(x);
  for (auto it = v.rbegin(); it != v.rend(); ++it) b.add(*it);
  EXPECT_NEAR(a.value(), b.value(), 1e-9);
}

TEST(AggregateRuns, TenTwelveFourteen) {
  std::vector<MetricsReport> reps(3);
  const double vals[3] = {10, 12, 14};
  for (int i = 0; i < 3; ++i) {
    reps[i].mean_deg = vals[i];
    reps[i].meta = {"baseline", "none", static_cast<std::uint64_t>(i + 1), "h", "c", "x"};
  }
  const auto s = aggregate_runs(reps);
  EXPECT_DOUBLE_EQ(s.stats.at("mean_deg").mean, 12.0);
  EXPECT_DOUBLE_EQ(s.stats.at("mean_deg").std, 2.0);
}

TEST(AggregateRuns, IdenticalReportsHaveZeroStd) {
  MetricsReport r;
  r.mean_deg = 5;
  r.rmse_deg = 6;
  const auto s = aggregate_runs({r, r, r});
  for (const auto& [name, st] : s.stats) EXPECT_EQ(st.std, 0.0) << name;
}

TEST(AggregateRuns, NeedsTwoRuns) { EXPECT_THROW(aggregate_runs({MetricsReport{}}), MetricsError); }

TEST(AggregateRuns, MismatchedMetadataThrows) {
  MetricsReport a, b;
  a.meta.regime = "baseline";
  b.meta.regime = "oracle";
  EXPECT_THROW(aggregate_runs({a, b}), MetricsError);
  b.meta.regime = "baseline";
  b.meta.spec_hash = "other";
  EXPECT_THROW(aggregate_runs({a, b}), MetricsError);
}

TEST(Compare, SeparatedRangesAreSignificant) {
  const std::vector<double> a{10.0, 10.5, 11.0}, b{20.0, 20.5, 21.0};
  const auto c = compare(stats_of(a), stats_of(b));
  EXPECT_TRUE(c.significant);
  EXPECT_LT(c.diff, 0.0);
  EXPECT_LT(c.welch_t, 0.0);
}

TEST(Compare, OverlappingNoiseIsNot) {
  const std::vector<double> a{10.0, 14.0, 12.0}, b{11.0, 13.0, 12.5};
  EXPECT_FALSE(compare(stats_of(a), stats_of(b)).significant);
}

TEST(Compare, TThresholdIsApplied) {
  const std::vector<double> a{10.0, 11.0, 12.0}, b{12.5, 13.5, 14.5};
  EXPECT_TRUE(compare(stats_of(a), stats_of(b)).significant);
  EXPECT_FALSE(compare(stats_of(a), stats_of(b), 100.0).significant);
}

TEST(MetricsReport, JsonRoundTrip) {
  MetricsReport r = agg(errs({1.0, 2.0, 50.0}));
  r.meta = {"headfreeze", "output", 3, "abc", "def", "matched"};
  const auto back = nlohmann::json(r).get<MetricsReport>();
  EXPECT_EQ(back.mean_deg, r.mean_deg);
  EXPECT_EQ(back.n_pixels, 3u);
  EXPECT_EQ(back.meta.regime, "headfreeze");
  EXPECT_EQ(back.meta.condition, "matched");
}

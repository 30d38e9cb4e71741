#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "moc/counting.hpp"
#include "moc/ops.hpp"
#include "moc/random.hpp"

using namespace moc;

namespace {

double channel_sum(const Tensor& d, int k) { return count_from_density(d)[static_cast<std::size_t>(k)]; }

}  // namespace

TEST(GaussianKernel, NormalizedAndSymmetric) {
  const auto w = gaussian_kernel({});
  ASSERT_EQ(w.size(), 225u);
  double total = 0;
  for (double v : w) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(w[0], w[224]);
  EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 112);
  EXPECT_NEAR(w[112] / w[113], std::exp(1.0 / 32.0), 1e-12);
  EXPECT_THROW(gaussian_kernel({14, 4.0}), ArgumentError);
  EXPECT_THROW(gaussian_kernel({15, 0.0}), ArgumentError);
}

TEST(GtDensity, SingleInteriorPoint) {
  std::vector<PointAnnotation> pts{{20.3, 17.6, 1}};
  auto d = gt_density(pts, 40, 40, 2);
  EXPECT_NEAR(channel_sum(d, 1), 1.0, 1e-6);
  EXPECT_EQ(channel_sum(d, 0), 0.0);
  // Centred on the rounded pixel (20, 18).
  float peak = 0;
  int py = -1, px = -1;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      if (d.at(y, x, 1) > peak) peak = d.at(y, x, 1), py = y, px = x;
  EXPECT_EQ(py, 18);
  EXPECT_EQ(px, 20);
}

TEST(GtDensity, ThreePointsSameCategory) {
  std::vector<PointAnnotation> pts{{10, 10, 0}, {20, 12, 0}, {15, 25, 0}};
  auto d = gt_density(pts, 40, 40, 3);
  EXPECT_NEAR(channel_sum(d, 0), 3.0, 1e-6);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      EXPECT_EQ(d.at(y, x, 1), 0.0f);
      EXPECT_EQ(d.at(y, x, 2), 0.0f);
    }
}

TEST(GtDensity, CornerPointRenormalized) {
  std::vector<PointAnnotation> pts{{0, 0, 0}};
  EXPECT_NEAR(channel_sum(gt_density(pts, 32, 32, 1), 0), 1.0, 1e-6);
  DensityKernel raw;
  raw.renormalize_border = false;
  // Only the quadrant dx, dy >= 0 survives.
  const auto w = gaussian_kernel(raw);
  double quadrant = 0;
  for (int dy = 0; dy <= 7; ++dy)
    for (int dx = 0; dx <= 7; ++dx) quadrant += w[(dy + 7) * 15 + dx + 7];
  EXPECT_NEAR(channel_sum(gt_density(pts, 32, 32, 1, raw), 0), quadrant, 1e-6);
}

TEST(GtDensity, OutOfBoundsNamesIndex) {
  std::vector<PointAnnotation> pts{{1, 1, 0}, {5, 32, 0}};
  try {
    gt_density(pts, 32, 32, 1);
    FAIL() << "expected ArgumentError";
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("point 1"), std::string::npos) << e.what();
  }
  std::vector<PointAnnotation> bad_cat{{1, 1, 2}};
  EXPECT_THROW(gt_density(bad_cat, 8, 8, 2), ArgumentError);
}

TEST(CountFromDensity, ZeroMapAndConservation) {
  for (double c : count_from_density(Tensor(Shape{4, 4, 3}))) EXPECT_EQ(c, 0.0);
  std::vector<PointAnnotation> pts;
  for (int i = 0; i < 5; ++i) pts.push_back({8.0 + 9 * i, 30.0, 2});
  auto d = gt_density(pts, 64, 64, 3);
  EXPECT_NEAR(count_from_density(d)[2], 5.0, 1e-3);
  auto pooled = sum_pool2d(d, 4);
  ASSERT_EQ(pooled.shape(), (Shape{16, 16, 3}));
  const auto a = count_from_density(d), b = count_from_density(pooled);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k], 1e-5);
}

TEST(CountPoints, PerCategory) {
  std::vector<PointAnnotation> pts{{0, 0, 1}, {1, 1, 1}, {2, 2, 0}};
  EXPECT_EQ(count_points(pts, 3), (std::vector<double>{1, 2, 0}));
}

TEST(MaeRmse, Examples) {
  auto same = mae_rmse({{1, 2}, {3, 4}}, {{1, 2}, {3, 4}});
  EXPECT_EQ(same.mae, (std::vector<double>{0, 0}));
  EXPECT_EQ(same.rmse, (std::vector<double>{0, 0}));
  auto plus_one = mae_rmse({{2, 3, 4}}, {{1, 2, 3}});
  EXPECT_EQ(plus_one.mae, (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(plus_one.rmse, (std::vector<double>{1, 1, 1}));
  auto r = mae_rmse({{3}, {-4}}, {{0}, {0}});
  EXPECT_DOUBLE_EQ(r.mae[0], 3.5);
  EXPECT_NEAR(r.rmse[0], 3.5355, 1e-4);
  EXPECT_DOUBLE_EQ(r.rmse[0], std::sqrt(12.5));
}

TEST(MaeRmse, Errors) {
  EXPECT_THROW(mae_rmse({}, {}), ArgumentError);
  EXPECT_THROW(mae_rmse({{1}}, {{1}, {2}}), ShapeError);
  EXPECT_THROW(mae_rmse({{1, 2}}, {{1}}), ShapeError);
}

TEST(MseBar, TableAnchor) {
  const std::vector<double> v{4.0277, 10.5133, 6.4310, 5.5722, 30.4554, 0.4768};
  EXPECT_NEAR(mse_bar(v), 9.5794, 5e-5);
}

TEST(MseBar, Trivial) {
  EXPECT_DOUBLE_EQ(mse_bar(std::vector<double>(4, 2.5)), 2.5);
  EXPECT_DOUBLE_EQ(mse_bar(std::vector<double>{7.0}), 7.0);
  EXPECT_THROW(mse_bar(std::vector<double>{}), ArgumentError);
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(1 + rng.below(8));
    for (auto& x : v) x = rng.uniform(0, 10);
    const double m = mse_bar(v);
    EXPECT_GE(m, *std::min_element(v.begin(), v.end()) - 1e-12);
    EXPECT_LE(m, *std::max_element(v.begin(), v.end()) + 1e-12);
  }
}

TEST(Wmse, Examples) {
  EXPECT_DOUBLE_EQ(wmse(std::vector<double>{2, 4}, std::vector<double>{0.5, 0.5}), 10.0);
  const std::vector<double> v{1.5, 2.0, 3.0};
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> w(3, 0.0);
    w[k] = 1.0;
    EXPECT_EQ(wmse(v, w), v[k] * v[k]);
  }
  EXPECT_NEAR(wmse(v, uniform_weights(3)), (1.5 * 1.5 + 4.0 + 9.0) / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(wmse(std::vector<double>{3.0}, uniform_weights(1)), 9.0);
  EXPECT_DOUBLE_EQ(wmse(std::vector<double>{2, 4}, std::vector<double>{0.5, 0.5}, WmseConvention::kWeightedValues), 3.0);
}

TEST(Wmse, Errors) {
  EXPECT_THROW(wmse(std::vector<double>{1, 2}, std::vector<double>{0.5, 0.6}), ArgumentError);
  EXPECT_THROW(wmse(std::vector<double>{1, 2}, std::vector<double>{1.5, -0.5}), ArgumentError);
  EXPECT_THROW(wmse(std::vector<double>{1, 2}, std::vector<double>{1.0}), ShapeError);
  EXPECT_THROW(wmse(std::vector<double>{}, std::vector<double>{}), ArgumentError);
  EXPECT_NO_THROW(wmse(std::vector<double>{1, 2}, std::vector<double>{0.5, 0.5 + 5e-7}));
  EXPECT_THROW(parse_wmse_convention("cubes"), ArgumentError);
}

TEST(EvaluateCounts, PermutationInvariant) {
  Rng rng(2);
  CountMatrix p(7, std::vector<double>(3)), g(7, std::vector<double>(3));
  for (int i = 0; i < 7; ++i)
    for (int k = 0; k < 3; ++k) p[i][k] = rng.uniform(0, 9), g[i][k] = rng.below(10);
  const auto a = evaluate_counts(p, g, uniform_weights(3));
  std::vector<int> order{6, 2, 0, 5, 1, 4, 3};
  CountMatrix pp, gg;
  for (int i : order) pp.push_back(p[i]), gg.push_back(g[i]);
  const auto b = evaluate_counts(pp, gg, uniform_weights(3));
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(a.mae[k], b.mae[k], 1e-12);
    EXPECT_NEAR(a.rmse[k], b.rmse[k], 1e-12);
  }
  EXPECT_NEAR(a.mse_bar, b.mse_bar, 1e-12);
  EXPECT_NEAR(a.wmse, b.wmse, 1e-12);
}

TEST(MetricReport, CsvLayout) {
  const auto r = evaluate_counts({{3, 1}, {-4, 1}}, {{0, 0}, {0, 0}}, {0.25, 0.75});
  EXPECT_EQ(r.to_csv(),
            "category,mae,rmse\n"
            "0,3.5,3.53553391\n"
            "1,1,1\n"
            "mse_bar,2.26776695\n"
            "wmse,3.875\n");
}

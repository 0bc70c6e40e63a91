#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "medvit/grad_check.hpp"
#include "medvit/kan.hpp"
#include "oracles.hpp"

using namespace medvit;
using testing_support::max_abs_diff;
using testing_support::projection_loss;
using testing_support::random_tensor;

TEST(BSpline, PartitionOfUnityOnTheInterior) {
  const auto grid = SplineGrid::uniform();
  EXPECT_EQ(grid.num_basis(), 8u);
  Rng rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const auto b = bspline_basis(u(rng), grid);
    ASSERT_TRUE(b.in_support);
    EXPECT_NEAR(std::accumulate(b.values.begin(), b.values.end(), 0.0), 1.0, 1e-12);
    for (double v : b.values) EXPECT_GE(v, 0.0);
  }
}

TEST(BSpline, MatchesHighPrecisionRecursion) {
  const auto grid = SplineGrid::uniform(4, -2.0, 2.0);
  for (double x : {-1.5, -0.5, 0.5, 1.5, 0.123, -1.987}) {
    const auto got = bspline_basis(x, grid).values;
    const auto expect = oracle::bspline(x, 4, -2.0L, 2.0L, 3);
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], static_cast<double>(expect[i]), 1e-12);
  }
}

TEST(BSpline, ContinuousAcrossKnots) {
  const auto grid = SplineGrid::uniform();
  for (double knot : {-0.6, -0.2, 0.2, 0.6}) {
    const auto at = bspline_basis(knot, grid).values;
    const auto left = bspline_basis(std::nextafter(knot, -10.0), grid).values;
    for (std::size_t i = 0; i < at.size(); ++i) EXPECT_NEAR(at[i], left[i], 1e-12);
  }
}

TEST(BSpline, OutsideSupportIsFlaggedZero) {
  const auto b = bspline_basis(5.0, SplineGrid::uniform());
  EXPECT_FALSE(b.in_support);
  for (double v : b.values) EXPECT_EQ(v, 0.0);
}

TEST(BSpline, DerivativeMatchesDifferenceQuotient) {
  const auto grid = SplineGrid::uniform();
  const double x = 0.37, h = 1e-6;
  const auto d = bspline_basis_derivative(x, grid);
  const auto hi = bspline_basis(x + h, grid).values, lo = bspline_basis(x - h, grid).values;
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(d[i], (hi[i] - lo[i]) / (2 * h), 1e-7);
}

TEST(Rswaf, ScalarValues) {
  EXPECT_EQ(rswaf_eval(0.0, 1.0), 1.0);
  EXPECT_NEAR(rswaf_eval(1.0, 1.0), static_cast<double>(oracle::rswaf(1.0L, 1.0L)), 1e-15);
  EXPECT_NEAR(rswaf_eval(0.7, 0.7), 0.419974, 1e-6);
  Rng rng(2);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (int i = 0; i < 100; ++i) {
    const double r = u(rng);
    EXPECT_EQ(rswaf_eval(r, 1.3), rswaf_eval(-r, 1.3));
    EXPECT_GT(rswaf_eval(r, 1.3), 0.0);
    EXPECT_LE(rswaf_eval(r, 1.3), 1.0);
    EXPECT_GE(rswaf_eval(std::abs(r) * 0.9, 1.3), rswaf_eval(r, 1.3));
  }
  EXPECT_THROW(rswaf_eval(1.0, 0.0), std::domain_error);
  EXPECT_THROW(rswaf_eval(1.0, -1.0), std::domain_error);
}

TEST(SplineKan, ZeroCoefficientsGiveSiluNetwork) {
  Rng rng(3);
  SplineKanLayer layer(4, 3, rng);
  std::fill(layer.w_base.values().begin(), layer.w_base.values().end(), 1.0);
  Tensor x = random_tensor({5, 4}, rng);
  const Tensor y = layer.forward(x);
  for (std::size_t b = 0; b < 5; ++b) {
    double s = 0.0;
    for (std::size_t q = 0; q < 4; ++q) s += x.at({b, q}) / (1.0 + std::exp(-x.at({b, q})));
    for (std::size_t p = 0; p < 3; ++p) EXPECT_NEAR(y.at({b, p}), s, 1e-15);
  }
}

TEST(SplineKan, SingleCoefficientSelectsOneBasis) {
  Rng rng(4);
  SplineKanLayer layer(1, 1, rng);
  nn::fill_zero(layer.w_base);
  layer.coef.at({0, 0, 3}) = 1.7;
  for (double x : {-0.9, -0.3, 0.1, 0.8}) {
    const double expect = 1.7 * bspline_basis(x, layer.grid).values[3];
    EXPECT_NEAR(layer.forward(Tensor({1, 1}, x)).item(), expect, 1e-14);
  }
}

TEST(RswafKan, WorkedExampleWithTwoCenters) {
  Rng rng(5);
  RswafKanLayer layer(1, 1, rng, RswafOptions{2, -1.0, 1.0, 1.0, true});
  std::fill(layer.weight.values().begin(), layer.weight.values().end(), 1.0);
  // a single feature normalises to 0 whatever its value
  const double y = layer.forward(Tensor({1, 1}, 3.7)).item();
  EXPECT_NEAR(y, 2.0 * static_cast<double>(oracle::rswaf(1.0L, 1.0L)), 1e-14);
  EXPECT_NEAR(y, 0.839948, 1e-6);
}

TEST(RswafKan, CenterAtInputContributesItsWeight) {
  Rng rng(6);
  RswafKanLayer layer(1, 1, rng, RswafOptions{1, 0.4, 0.4, 1.0, false});
  nn::fill_zero(layer.w_base);
  layer.weight.values()[0] = -2.5;
  EXPECT_NEAR(layer.forward(Tensor({1, 1}, 0.4)).item(), -2.5, 1e-15);
}

TEST(RswafKan, ZeroWeightsGiveZeroOutput) {
  Rng rng(7);
  RswafKanLayer layer(5, 3, rng);
  layer.zero_output();
  const Tensor y = layer.forward(random_tensor({4, 5}, rng, -3, 3));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(RswafKan, MatchesEdgewiseScalarFormula) {
  Rng rng(8);
  RswafKanLayer layer(3, 2, rng, RswafOptions{4, -2.0, 2.0, 0.8, false});
  for (auto& c : layer.centers.values()) c += 0.1;
  Tensor x = random_tensor({2, 3}, rng, -2, 2);
  const Tensor y = layer.forward(x);
  const std::size_t N = 4;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t p = 0; p < 2; ++p) {
      long double s = 0.0L;
      for (std::size_t q = 0; q < 3; ++q) {
        const long double xv = x.at({b, q});
        long double spline = 0.0L;
        for (std::size_t i = 0; i < N; ++i) {
          spline += layer.weight.at({p, q, i}) *
                    oracle::rswaf(std::abs(xv - layer.centers.values()[i]), layer.width.values()[0]);
        }
        s += layer.w_base.at({p, q}) * xv / (1.0L + std::exp(-xv)) + layer.w_scale.at({p, q}) * spline;
      }
      EXPECT_NEAR(y.at({b, p}), static_cast<double>(s), 1e-12);
    }
  }
}

TEST(RswafKan, ParameterCountClosedForm) {
  Rng rng(9);
  const std::size_t in = 6, out = 5, N = 8;
  RswafKanLayer layer(in, out, rng);
  EXPECT_EQ(layer.num_parameters(), in * out * (N + 2) + N + 1 + 2 * in);
  KanFeedForward ff(16, 2, rng);
  EXPECT_EQ(ff.num_parameters(), 16 * 32 * (N + 2) + N + 1 + 32 + 32 * 16 * (N + 2) + N + 1 + 64);
  KanFeedForward lin(16, 2, rng, {}, KanProjection::Linear);
  EXPECT_EQ(lin.num_parameters(), 16 * 32 * (N + 2) + N + 1 + 32 + 32 * 16 + 16);
}

TEST(KanStack, CompositionIsNestedApplication) {
  Rng rng(10);
  std::vector<std::unique_ptr<KanLayer>> layers;
  layers.push_back(std::make_unique<RswafKanLayer>(4, 6, rng));
  layers.push_back(std::make_unique<SplineKanLayer>(6, 2, rng));
  KanStack stack(std::move(layers));
  Tensor x = random_tensor({3, 4}, rng);
  const Tensor nested = stack.layer(1).forward(stack.layer(0).forward(x));
  EXPECT_EQ(max_abs_diff(stack.forward(x).values(), nested.values()), 0.0);

  std::vector<std::unique_ptr<KanLayer>> single;
  single.push_back(std::make_unique<RswafKanLayer>(4, 2, rng));
  KanStack one(std::move(single));
  EXPECT_EQ(max_abs_diff(one.forward(x).values(), one.layer(0).forward(x).values()), 0.0);

  std::vector<std::unique_ptr<KanLayer>> bad;
  bad.push_back(std::make_unique<RswafKanLayer>(4, 6, rng));
  bad.push_back(std::make_unique<RswafKanLayer>(5, 2, rng));
  EXPECT_THROW(KanStack(std::move(bad)), ShapeError);
}

TEST(KanFeedForward, ShapePreservingAndZeroable) {
  Rng rng(11);
  for (std::size_t c : {4u, 8u}) {
    KanFeedForward ff(c, 2, rng);
    Tensor x = random_tensor({2, c, 3, 5}, rng);
    EXPECT_EQ(ff.forward(x).shape(), x.shape());
    ff.zero_output();
    const Tensor y = ff.forward(x);
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
  }
  KanFeedForward ff(4, 2, rng);
  EXPECT_THROW(ff.forward(Tensor({1, 5, 2, 2}, 0.0)), ShapeError);
}

TEST(KanGradients, AllKanOpsPassFiniteDifferences) {
  Rng rng(12);
  GradCheckOptions opts;
  opts.tolerance = 1e-4;

  SplineKanLayer spline(2, 3, rng);
  for (auto& c : spline.coef.values()) c = std::normal_distribution<double>(0.0, 0.5)(rng);
  Tensor xs = random_tensor({4, 2}, rng, -0.95, 0.95);
  auto l1 = projection_loss({4, 3}, 13);
  auto p1 = spline.parameters();
  p1.push_back({"x", xs});
  auto r1 = grad_check([&] { return l1(spline.forward(xs)); }, p1, opts);
  EXPECT_TRUE(r1.passed()) << r1.summary();

  RswafKanLayer rs(3, 4, rng);
  Tensor xr = random_tensor({5, 3}, rng, -2, 2);
  auto l2 = projection_loss({5, 4}, 14);
  auto p2 = rs.parameters();
  p2.push_back({"x", xr});
  auto r2 = grad_check([&] { return l2(rs.forward(xr)); }, p2, opts);
  EXPECT_TRUE(r2.passed()) << r2.summary();

  std::vector<std::unique_ptr<KanLayer>> layers;
  layers.push_back(std::make_unique<RswafKanLayer>(3, 5, rng));
  layers.push_back(std::make_unique<RswafKanLayer>(5, 2, rng));
  KanStack stack(std::move(layers));
  auto l3 = projection_loss({5, 2}, 15);
  auto p3 = stack.parameters();
  p3.push_back({"x", xr});
  auto r3 = grad_check([&] { return l3(stack.forward(xr)); }, p3, opts);
  EXPECT_TRUE(r3.passed()) << r3.summary();

  for (auto proj : {KanProjection::Rswaf, KanProjection::Linear}) {
    KanFeedForward ff(4, 2, rng, {}, proj);
    Tensor x = random_tensor({2, 4, 2, 3}, rng);
    auto l4 = projection_loss({2, 4, 2, 3}, 16);
    auto p4 = ff.parameters();
    p4.push_back({"x", x});
    auto r4 = grad_check([&] { return l4(ff.forward(x)); }, p4, opts);
    EXPECT_TRUE(r4.passed()) << r4.summary();
  }
}

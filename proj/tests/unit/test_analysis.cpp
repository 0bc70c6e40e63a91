#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "medvit/analysis.hpp"
#include "medvit/model.hpp"
#include "oracles.hpp"

using namespace medvit;
using namespace medvit::analysis;
using testing_support::random_tensor;
using testing_support::to_vector;

namespace {

std::size_t extent_of(const std::vector<std::size_t>& set) { return set.empty() ? 0 : set.back() - set.front() + 1; }

Tensor channels_from(const std::vector<std::vector<double>>& rows, std::size_t h, std::size_t w) {
  std::vector<double> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return Tensor({rows.size(), h, w}, std::move(data));
}

}  // namespace

TEST(AnalyticRf, TableValues) {
  EXPECT_EQ(analytic_rf(RfPattern::Neighborhood, 3, {1, 1, 1, 1}, 200), 9u);
  EXPECT_EQ(analytic_rf(RfPattern::Dilated, 3, {1, 2, 4, 8}, 200), 31u);
  EXPECT_EQ(analytic_rf(RfPattern::Dilated, 3, {8, 4, 2, 1}, 200), 31u);
  EXPECT_EQ(analytic_rf(RfPattern::Dilated, 3, {1, 1, 1, 1}, 200), 9u);
  EXPECT_EQ(analytic_rf(RfPattern::Neighborhood, 3, {8, 4, 2, 1}, 200), 9u);
  EXPECT_EQ(analytic_rf(RfPattern::Full, 3, {1, 1}, 50), 50u);
  EXPECT_EQ(analytic_rf(RfPattern::Dilated, 3, {1, 2, 4, 8}, 20), 20u);
  EXPECT_EQ(rf_upper_bound(3, 4), 81u);
  for (std::size_t k : {3u, 5u, 7u}) {
    EXPECT_EQ(analytic_rf(RfPattern::Neighborhood, k, {1}, 100), k);
    EXPECT_EQ(analytic_rf(RfPattern::Dilated, k, {1}, 100), k);
    EXPECT_EQ(analytic_rf(RfPattern::Dilated, k, {4}, 100), 1 + 4 * (k - 1));
  }
}

TEST(AnalyticRf, Profile) {
  const auto p = analytic_rf_profile(RfPattern::Dilated, 3, {8, 4, 2, 1}, 200);
  EXPECT_EQ(p, (std::vector<std::size_t>{17, 25, 29, 31}));
  const auto n = analytic_rf_profile(RfPattern::Neighborhood, 5, {1, 1, 1}, 200);
  EXPECT_EQ(n, (std::vector<std::size_t>{5, 9, 13}));
}

TEST(AnalyticRf, MonotoneInDilationAndDepth) {
  std::vector<std::size_t> sched{1, 1, 1};
  std::size_t prev = analytic_rf(RfPattern::Dilated, 3, sched, 1000);
  for (std::size_t l = 0; l < 3; ++l) {
    for (int step = 0; step < 3; ++step) {
      ++sched[l];
      const std::size_t cur = analytic_rf(RfPattern::Dilated, 3, sched, 1000);
      EXPECT_GE(cur, prev);
      prev = cur;
    }
  }
  sched.push_back(1);
  EXPECT_GE(analytic_rf(RfPattern::Dilated, 3, sched, 1000), prev);
}

TEST(AnalyticRf, RejectsBadArguments) {
  EXPECT_THROW(analytic_rf(RfPattern::Dilated, 4, {1}, 10), std::invalid_argument);
  EXPECT_THROW(analytic_rf(RfPattern::Dilated, 3, {}, 10), std::invalid_argument);
  EXPECT_THROW(analytic_rf(RfPattern::Dilated, 3, {0}, 10), std::invalid_argument);
}

TEST(EmpiricalRf, SmallStacks) {
  EXPECT_EQ(empirical_rf(RfPattern::Dilated, 3, {1}, 40, 20), 3u);
  EXPECT_EQ(empirical_rf(RfPattern::Dilated, 3, {1, 2}, 40, 20), 7u);
  EXPECT_EQ(empirical_rf(RfPattern::Full, 3, {1, 1}, 24, 3), 24u);
  EXPECT_EQ(empirical_rf(RfPattern::Neighborhood, 5, {3, 3}, 40, 20), 9u);
}

TEST(EmpiricalRf, MatchesDependencyPropagation) {
  const std::vector<std::vector<std::size_t>> schedules{{1, 1, 1, 1}, {2, 2, 2, 1}, {4, 4, 2, 1}, {8, 4, 2, 1},
                                                        {1, 2, 4, 8}, {3, 1}};
  for (const auto& s : schedules) {
    const auto deps = oracle::dependency_set(100, 200, 3, s);
    const std::size_t expect = extent_of(deps);
    EXPECT_EQ(analytic_rf(RfPattern::Dilated, 3, s, 200), expect);
    EXPECT_EQ(empirical_rf(RfPattern::Dilated, 3, s, 200, 100, 7), expect);
  }
}

TEST(EmpiricalRf, ReportCoversEveryLayer) {
  const auto r = receptive_field_report(RfPattern::Dilated, 3, {8, 4, 2, 1}, 200);
  EXPECT_EQ(r.analytic, r.empirical);
  EXPECT_EQ(r.analytic.back(), 31u);
  EXPECT_EQ(r.upper_bound, 81u);
  for (auto e : r.empirical) EXPECT_LE(e, r.upper_bound);
}

TEST(EmpiricalRf, ProbeNearBoundaryThrows) {
  EXPECT_THROW(empirical_rf(RfPattern::Dilated, 3, {8, 4, 2, 1}, 200, 10), std::invalid_argument);
  EXPECT_THROW(empirical_rf(RfPattern::Dilated, 3, {1}, 20, 20), std::invalid_argument);
  EXPECT_THROW(receptive_field_report(RfPattern::Dilated, 3, {8, 4, 2, 1}, 30), std::invalid_argument);
}

TEST(CosineDistance, WorkedValues) {
  EXPECT_EQ(feature_cosine_distance(channels_from({{1, 2, 3, 4}, {1, 2, 3, 4}, {1, 2, 3, 4}}, 2, 2)), 0.0);
  EXPECT_NEAR(feature_cosine_distance(channels_from({{1, 0, 0, 0}, {0, 1, 0, 0}}, 2, 2)), 0.25, 1e-15);
  EXPECT_NEAR(feature_cosine_distance(channels_from({{1, -2, 3, 0}, {-1, 2, -3, 0}}, 2, 2)), 0.5, 1e-15);
  EXPECT_NEAR(feature_cosine_distance(channels_from({{1, 2}}, 1, 2)), 0.0, 1e-15);
}

TEST(CosineDistance, DegenerateChannels) {
  std::size_t degenerate = 0;
  // pairs touching the zero channel: (0,1), (1,0), (1,1)
  const double d = feature_cosine_distance(channels_from({{1, 2, 3, 4}, {0, 0, 0, 0}}, 2, 2), &degenerate);
  EXPECT_EQ(degenerate, 3u);
  EXPECT_NEAR(d, 1.5 / 4.0, 1e-15);
}

TEST(CosineDistance, Invariances) {
  Rng rng(3);
  Tensor x = random_tensor({5, 3, 4}, rng);
  const double base = feature_cosine_distance(x);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);

  Tensor scaled = x.detach();
  for (std::size_t c = 0; c < 5; ++c) {
    for (std::size_t t = 0; t < 12; ++t) scaled.data()[c * 12 + t] *= 0.5 + static_cast<double>(c);
  }
  EXPECT_NEAR(feature_cosine_distance(scaled), base, 1e-14);

  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor permuted({5, 3, 4}, 0.0);
  for (std::size_t c = 0; c < 5; ++c) {
    for (std::size_t t = 0; t < 12; ++t) permuted.data()[c * 12 + t] = x.data()[c * 12 + perm[t]];
  }
  EXPECT_NEAR(feature_cosine_distance(permuted), base, 1e-14);

  Tensor batched({1, 5, 3, 4}, to_vector(x));
  EXPECT_EQ(feature_cosine_distance(batched), base);
  EXPECT_THROW(feature_cosine_distance(Tensor({2, 5, 3, 4}, 0.0)), ShapeError);
}

TEST(CosineDistance, ModelProfile) {
  auto model = build_model(ModelConfig::variant("micro"), 2);
  model->set_training(false);
  Rng rng(4);
  const auto profile = cosine_profile(*model, random_tensor({3, 3, 32, 32}, rng, 0, 1));
  ASSERT_GE(profile.size(), 2u);
  EXPECT_EQ(profile.front().position, 0.0);
  EXPECT_EQ(profile.back().position, 1.0);
  for (std::size_t i = 0; i < profile.size(); ++i) {
    EXPECT_GE(profile[i].distance, 0.0);
    EXPECT_LE(profile[i].distance, 1.0);
    if (i > 0) {
      EXPECT_GT(profile[i].position, profile[i - 1].position);
    }
  }
  std::ostringstream os;
  write_cosine_csv(os, profile);
  EXPECT_EQ(os.str().rfind("layer_index_normalized,distance", 0), 0u);
}

TEST(GradCam, UniformInputsGiveUniformMap) {
  Tensor act({2, 3, 3}, 0.7), grad({2, 3, 3}, 0.2);
  const auto map = grad_cam_from(act, grad);
  for (double v : map.values) EXPECT_EQ(v, 1.0);
}

TEST(GradCam, NonnegativeAndMaxNormalised) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto map = grad_cam_from(random_tensor({4, 5, 6}, rng), random_tensor({4, 5, 6}, rng));
    double mx = 0.0;
    for (double v : map.values) {
      EXPECT_GE(v, 0.0);
      mx = std::max(mx, v);
    }
    EXPECT_TRUE(mx == 0.0 || mx == 1.0);
  }
}

TEST(GradCam, SinglePixelScoreGivesOneHot) {
  // score = A[1,2] of a single-channel map that is nonpositive elsewhere
  Tensor act({1, 3, 4}, -0.5);
  act.data()[1 * 4 + 2] = 2.0;
  Tensor grad({1, 3, 4}, 0.0);
  grad.data()[1 * 4 + 2] = 1.0;
  const auto map = grad_cam_from(act, grad);
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(map.at(y, x), (y == 1 && x == 2) ? 1.0 : 0.0);
  }
}

TEST(GradCam, UpsampleNearest) {
  Heatmap m;
  m.height = 2;
  m.width = 2;
  m.values = {0.0, 0.25, 0.5, 1.0};
  const auto up = upsample_nearest(m, 4, 6);
  EXPECT_EQ(up.at(0, 0), 0.0);
  EXPECT_EQ(up.at(1, 2), 0.0);
  EXPECT_EQ(up.at(1, 3), 0.25);
  EXPECT_EQ(up.at(3, 0), 0.5);
  EXPECT_EQ(up.at(3, 5), 1.0);
}

TEST(GradCam, ModelHeatmap) {
  auto model = build_model(ModelConfig::variant("micro"), 3);
  Rng rng(6);
  Tensor x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  const auto map = grad_cam(*model, x, 1, "norm");
  EXPECT_EQ(map.height, 32u);
  EXPECT_EQ(map.width, 32u);
  EXPECT_EQ(map.target, 1u);
  EXPECT_TRUE(model->training());
  for (double v : map.values) EXPECT_GE(v, 0.0);

  // shifting every logit by the same constant leaves the target gradient alone
  for (auto& b : model->head->bias.values()) b += 5.0;
  const auto shifted = grad_cam(*model, x, 1, "norm");
  EXPECT_EQ(testing_support::max_abs_diff(map.values, shifted.values), 0.0);

  EXPECT_NO_THROW(grad_cam(*model, x, 0, "stage2"));
  EXPECT_THROW(grad_cam(*model, x, 0, "nope"), std::invalid_argument);
  EXPECT_THROW(grad_cam(*model, x, 2, "norm"), std::invalid_argument);
  EXPECT_THROW(grad_cam(*model, random_tensor({2, 3, 32, 32}, rng), 0, "norm"), ShapeError);
}

TEST(GradCam, WritesGraymap) {
  Heatmap m;
  m.height = 2;
  m.width = 3;
  m.values = {0.0, 0.5, 1.0, 1.0, 0.5, 0.0};
  const auto path = std::filesystem::temp_directory_path() / "medvit_cam_test.pgm";
  write_pgm(path.string(), m);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  std::vector<unsigned char> px(6);
  in.read(reinterpret_cast<char*>(px.data()), 6);
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3u);
  EXPECT_EQ(h, 2u);
  EXPECT_EQ(maxval, 255u);
  EXPECT_EQ(px, (std::vector<unsigned char>{0, 128, 255, 255, 128, 0}));
  std::filesystem::remove(path);
}

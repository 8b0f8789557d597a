#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"
#include "placerec/grm.hpp"

using namespace placerec;
using namespace placerec::grm;

namespace {

Trajectory line(double length, double spacing = 1.0) {
  Trajectory t;
  const int n = static_cast<int>(std::lround(length / spacing));
  for (int i = 0; i <= n; ++i) t.poses.push_back({double(i), {i * spacing, 0.0, 0.0}, {}});
  return t;
}

PointCloud cluster_with_far_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 0.1);
  PointCloud c;
  for (int i = 0; i < 50; ++i) c.points.push_back({u(rng), u(rng), u(rng)});
  c.points.push_back({100.0, 0.0, 0.0});
  return c;
}

std::vector<std::size_t> survivors(const PointCloud& in, const PointCloud& out) {
  // Outputs preserve order, so walk both lists.
  std::vector<std::size_t> idx;
  std::size_t j = 0;
  for (std::size_t i = 0; i < in.size() && j < out.size(); ++i)
    if (in.points[i] == out.points[j]) {
      idx.push_back(i);
      ++j;
    }
  return idx;
}

}  // namespace

TEST(Trajectory, ParseAndValidate) {
  const auto t = parse_trajectory("# header\n0 0 0 0 0 0 0 1\n\n1 3 4 0 0 0 0 1\n");
  ASSERT_EQ(t.poses.size(), 2u);
  EXPECT_DOUBLE_EQ(t.length(), 5.0);
  EXPECT_EQ(t.position_at(2.5), (Point3{1.5, 2.0, 0.0}));
  EXPECT_THROW(parse_trajectory("0 0 0 0 0 0 0 1\n0 1 0 0 0 0 0 1\n").validate(), Error);
  EXPECT_THROW(parse_trajectory("0 0 0 0 0 0 0 2\n").validate(), Error);
  try {
    parse_trajectory("0 0 0\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
}

TEST(Segment, AnchorsEveryStride) {
  const auto anchors = anchor_positions(line(60), 20);
  ASSERT_EQ(anchors.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(anchors[i].x, 20.0 * static_cast<double>(i), 1e-12);
  PointCloud c;
  for (int x = -20; x <= 80; ++x) c.points.push_back({double(x), 0.0, 0.0});
  EXPECT_EQ(segment_submaps(line(60), c, {}).size(), 4u);
}

TEST(Segment, ShortTrajectoryGivesOneAnchor) {
  const auto anchors = anchor_positions(line(5), 20);
  ASSERT_EQ(anchors.size(), 1u);
  EXPECT_EQ(anchors[0], (Point3{0, 0, 0}));
}

TEST(Segment, EveryPointInsideItsBox) {
  std::mt19937_64 rng(1);
  Trajectory t;
  for (int i = 0; i <= 200; ++i) {
    const double a = i * 0.01;
    t.poses.push_back({double(i), {60 * std::cos(a), 60 * std::sin(a), 1.5}, {}});
  }
  auto c = oracle::random_cloud(20000, rng, 80.0);
  const SubmapSpec spec;
  const auto segments = segment_submaps(t, c, spec);
  EXPECT_FALSE(segments.empty());
  for (const auto& s : segments) {
    const auto box = Aabb::centered(s.anchor_world, spec.extent);
    EXPECT_EQ(s.cloud.size(), oracle::crop(c.points, box).size());
    for (const auto& p : s.cloud.points) EXPECT_TRUE(box.contains(p));
  }
}

TEST(RemoveOutliers, UniformGridKeepsEverything) {
  PointCloud c;
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 10; ++y) c.points.push_back({double(x), double(y), 0.0});
  // Edge and interior points have different neighbourhoods, so use K = 1:
  // every t_i equals the grid spacing.
  EXPECT_EQ(remove_outliers(c, {1, 2.0}).size(), 100u);
}

TEST(RemoveOutliers, RemovesOnlyTheFarPoint) {
  std::mt19937_64 rng(2);
  const auto c = cluster_with_far_point(rng);
  const auto out = remove_outliers(c, {5, 2.0});
  ASSERT_EQ(out.size(), 50u);
  for (const auto& p : out.points) EXPECT_LT(p.x, 1.0);
}

TEST(RemoveOutliers, MatchesOracleOnRandomClouds) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    auto c = oracle::random_cloud(300, rng, 10.0);
    std::uniform_real_distribution<double> far(30, 60);
    for (int i = 0; i < 5; ++i) c.points.push_back({far(rng), far(rng), far(rng)});
    const std::size_t k = 3 + static_cast<std::size_t>(trial % 10);
    const double mu = 1.0 + 0.1 * trial;
    const auto out = remove_outliers(c, {k, mu});
    EXPECT_EQ(survivors(c, out), oracle::outlier_survivors(c.points, k, mu));
  }
}

TEST(RemoveOutliers, TooFewPoints) {
  PointCloud c;
  c.points.resize(5);
  try {
    remove_outliers(c, {5, 2.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientPoints);
  }
}

TEST(RemoveOutliers, PermutationInvariantAsSet) {
  std::mt19937_64 rng(4);
  auto c = oracle::random_cloud(400, rng, 5.0);
  c.points.push_back({40, 40, 40});
  const auto a = remove_outliers(c, {8, 2.0});
  std::shuffle(c.points.begin(), c.points.end(), rng);
  EXPECT_EQ(oracle::set_distance(a.points, remove_outliers(c, {8, 2.0}).points), 0.0);
  EXPECT_LE(c.size() - a.size(), c.size() / 2);
}

TEST(Densify, PairAddsOneMidpoint) {
  PointCloud c;
  c.points = {{0, 0, 0}, {2, 4, 6}};
  const auto out = densify(c, {1});
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out.points[2], (Point3{1, 2, 3}));
  EXPECT_THROW(densify(c, {2}), Error);
}

TEST(Densify, CollinearTriple) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  const auto out = densify(c, {1});
  ASSERT_EQ(out.size(), 5u);
  EXPECT_LT(oracle::set_distance(out.points, {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {0.5, 0, 0}, {1.5, 0, 0}}), 1e-15);
}

TEST(Densify, MatchesMidpointOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = oracle::random_cloud(200, rng, 3.0);
    const auto out = densify(c, {10});
    EXPECT_EQ(oracle::set_distance(out.points, oracle::densified(c.points, 10)), 0.0);
    // Superset: inputs come first, unchanged.
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(out.points[i], c.points[i]);
  }
}

TEST(NormalizeScale, Examples) {
  PointCloud c;
  c.points = {{0, 0, 0}, {2, 0, 0}, {2, 1, 0}};
  const auto out = normalize_scale(c);
  EXPECT_EQ(out.points, (std::vector<Point3>{{0, 0, 0}, {1, 0, 0}, {1, 0.5, 0}}));
  PointCloud one;
  one.points = {{7, 8, 9}};
  EXPECT_EQ(normalize_scale(one).points[0], (Point3{0, 0, 0}));
}

TEST(NormalizeScale, PreservesDistanceRatiosAndIsIdempotent) {
  std::mt19937_64 rng(6);
  auto c = oracle::random_cloud(60, rng, 37.0);
  for (auto& p : c.points) p = p + Point3{-100, 250, 3};
  const auto once = normalize_scale(c);
  const auto twice = normalize_scale(once);
  const double scale = distance(once.points[0], once.points[1]) / distance(c.points[0], c.points[1]);
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(once.points[i][k], 0.0);
      EXPECT_LE(once.points[i][k], 1.0);
      EXPECT_NEAR(twice.points[i][k], once.points[i][k], 1e-12);
    }
    for (std::size_t j = i + 1; j < c.size(); j += 7)
      EXPECT_NEAR(distance(once.points[i], once.points[j]), scale * distance(c.points[i], c.points[j]), 1e-9);
  }
}

TEST(BuildQpc, OneQueryPerSegmentInUnitCube) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  PointCloud c;
  for (int i = 0; i < 6000; ++i) c.points.push_back({u(rng) * 100 - 10, u(rng) * 40 - 20, u(rng) * 10});
  const auto t = line(60);
  const auto r = build_qpc(t, c, {}, {20, 2.0}, {10});
  EXPECT_EQ(r.queries.size(), 4u);
  EXPECT_TRUE(r.warnings.empty());
  for (const auto& q : r.queries)
    for (const auto& p : q.cloud.points)
      for (int k = 0; k < 3; ++k) {
        EXPECT_GE(p[k], 0.0);
        EXPECT_LE(p[k], 1.0);
      }
  const auto again = build_qpc(t, c, {}, {20, 2.0}, {10});
  for (std::size_t i = 0; i < r.queries.size(); ++i) EXPECT_EQ(again.queries[i].cloud.points, r.queries[i].cloud.points);
}

TEST(BuildQpc, InjectedOutliersAreFilteredPerSegment) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  PointCloud c;
  for (int i = 0; i < 4000; ++i) c.points.push_back({u(rng) * 60, u(rng) * 10 - 5, u(rng) * 5});
  for (int i = 0; i < 200; ++i) c.points.push_back({u(rng) * 60, u(rng) * 40 - 20, u(rng) * 15 - 7.5});
  const SubmapSpec spec;
  const auto r = build_qpc(line(60), c, spec, {20, 2.0}, {1});
  const auto segments = segment_submaps(line(60), c, spec);
  ASSERT_EQ(r.queries.size(), segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    // Rebuild the stage oracle and compare against the normalised output.
    const auto keep = oracle::outlier_survivors(segments[s].cloud.points, 20, 2.0);
    std::vector<Point3> kept;
    for (auto i : keep) kept.push_back(segments[s].cloud.points[i]);
    PointCloud expected;
    expected.points = oracle::densified(kept, 1);
    EXPECT_LT(oracle::set_distance(r.queries[s].cloud.points, normalize_scale(expected).points), 1e-12);
  }
}

TEST(BuildQpc, AllSegmentsTooSmall) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}};
  try {
    build_qpc(line(60), c, {}, {20, 2.0}, {10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoValidSegments);
  }
}

TEST(VoSource, DensifyDefaults) {
  for (auto s : {VoSource::Dso, VoSource::OrbSlam3, VoSource::VinsMono, VoSource::Synthetic})
    EXPECT_GE(densify_params_for(s).k_neighbors, 1u);
}

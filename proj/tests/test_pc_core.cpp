#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "placerec/pc_core.hpp"

using namespace placerec;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("placerec_test_" + name);
}

}  // namespace

TEST(VoxelDownsample, SinglePointIsKept) {
  PointCloud c;
  c.points = {{1.23, 4.56, 7.89}};
  const auto out = voxel_downsample(c, {0.1});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.points[0], (Point3{1.23, 4.56, 7.89}));
}

TEST(VoxelDownsample, SameCellAverages) {
  PointCloud c;
  c.points = {{0.01, 0, 0}, {0.09, 0, 0}};
  const auto out = voxel_downsample(c, {0.1});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out.points[0].x, 0.05, 1e-12);
}

TEST(VoxelDownsample, EmptyInputThrows) {
  try {
    voxel_downsample(PointCloud{}, {0.1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
  }
}

TEST(VoxelDownsample, MatchesBucketOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = oracle::random_cloud(1000, rng);
    const auto out = voxel_downsample(c, {0.5});
    EXPECT_LT(oracle::set_distance(out.points, oracle::voxel_centroids(c.points, 0.5)), 1e-9);
  }
}

TEST(VoxelDownsample, ExplicitOriginMatchesOracle) {
  std::mt19937_64 rng(2);
  const auto c = oracle::random_cloud(800, rng, 3.0);
  const Point3 origin{-0.37, 0.11, 0.05};
  const auto out = voxel_downsample(c, {0.4, origin});
  EXPECT_LT(oracle::set_distance(out.points, oracle::voxel_centroids(c.points, 0.4, &origin)), 1e-9);
}

TEST(VoxelDownsample, FeaturesAreAveraged) {
  PointCloud c;
  c.feature_dim = 2;
  c.points = {{0.0, 0, 0}, {0.05, 0, 0}, {5, 5, 5}};
  c.features = {1, 2, 3, 4, 9, 9};
  const auto out = voxel_downsample(c, {0.1});
  ASSERT_EQ(out.size(), 2u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out.points[i].x < 1) {
      EXPECT_DOUBLE_EQ(out.feature(i)[0], 2.0);
      EXPECT_DOUBLE_EQ(out.feature(i)[1], 3.0);
    } else {
      EXPECT_DOUBLE_EQ(out.feature(i)[0], 9.0);
    }
  }
}

TEST(VoxelDownsample, CardinalityNeverGrowsOnRepeat) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = oracle::random_cloud(500, rng, 2.0);
    const auto once = voxel_downsample(c, {0.3});
    const auto twice = voxel_downsample(once, {0.3});
    EXPECT_LE(twice.size(), once.size());
    EXPECT_LE(once.size(), c.size());
  }
}

TEST(VoxelDownsample, TranslationByWholeCells) {
  std::mt19937_64 rng(4);
  const double cell = 0.25;
  const auto c = oracle::random_cloud(600, rng, 2.0);
  auto shifted = c;
  for (auto& p : shifted.points) p.x += cell;
  auto expected = voxel_downsample(c, {cell}).points;
  for (auto& p : expected) p.x += cell;
  EXPECT_LT(oracle::set_distance(voxel_downsample(shifted, {cell}).points, expected), 1e-9);
}

TEST(Knn, MemberQueryExcludesSelf) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  const auto nb = knn(c, {0, 0, 0}, 1);
  ASSERT_EQ(nb.size(), 1u);
  EXPECT_EQ(nb[0].index, 1u);
  EXPECT_DOUBLE_EQ(nb[0].distance, 1.0);
}

TEST(Knn, TooLargeKThrows) {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  try {
    knn(c, {0, 0, 0}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientPoints);
  }
  EXPECT_EQ(knn(c, {0.5, 0, 0}, 3).size(), 3u);
}

TEST(Knn, MatchesExhaustiveScan) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.2, 1.2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = oracle::random_cloud(500, rng);
    const KdTree tree(c.points);
    for (int q = 0; q < 10; ++q) {
      const Point3 p{u(rng), u(rng), u(rng)};
      const auto got = tree.knn(p, 20);
      const auto want = oracle::knn(c.points, p, 20);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].index, want[i].index);
        EXPECT_NEAR(got[i].distance, want[i].distance, 1e-9);
      }
    }
  }
}

TEST(Knn, TiesGoToLowerIndexAndDistancesAscend) {
  // Integer lattice: many exactly equal distances.
  PointCloud c;
  for (int x = 0; x < 6; ++x)
    for (int y = 0; y < 6; ++y)
      for (int z = 0; z < 3; ++z) c.points.push_back({double(x), double(y), double(z)});
  const KdTree tree(c.points, 4);
  for (std::size_t i = 0; i < c.size(); i += 7) {
    const auto got = tree.knn(c.points[i], 12, i);
    const auto want = oracle::knn(c.points, c.points[i], 12, static_cast<long>(i));
    for (std::size_t j = 0; j < got.size(); ++j) {
      EXPECT_EQ(got[j].index, want[j].index);
      if (j) {
        EXPECT_LE(got[j - 1].distance, got[j].distance);
      }
    }
  }
}

TEST(RadiusSearch, MatchesScan) {
  std::mt19937_64 rng(6);
  const auto c = oracle::random_cloud(700, rng);
  const KdTree tree(c.points);
  for (int q = 0; q < 20; ++q) {
    const Point3 p = c.points[static_cast<std::size_t>(q) * 13];
    std::vector<std::size_t> want;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (distance(c.points[i], p) <= 0.15) want.push_back(i);
    EXPECT_EQ(tree.radius_search(p, 0.15), want);
  }
}

TEST(CropAabb, ClosedBox) {
  PointCloud c;
  c.points = {{0.5, 0.5, 0.5}, {1.5, 0, 0}, {1, 1, 1}};
  const auto out = crop_aabb(c, {{0, 0, 0}, {1, 1, 1}});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out.points[0], (Point3{0.5, 0.5, 0.5}));
  EXPECT_EQ(out.points[1], (Point3{1, 1, 1}));
}

TEST(CropAabb, MatchesPredicateScanAndIgnoresOrder) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = oracle::random_cloud(400, rng);
    const Aabb box{{0.2, 0.1, 0.3}, {0.7, 0.9, 0.8}};
    const auto out = crop_aabb(c, box);
    std::vector<Point3> want;
    for (auto i : oracle::crop(c.points, box)) want.push_back(c.points[i]);
    EXPECT_EQ(out.points, want);
    std::shuffle(c.points.begin(), c.points.end(), rng);
    EXPECT_EQ(oracle::set_distance(crop_aabb(c, box).points, want), 0.0);
  }
}

TEST(CloudIo, EmptyCloudRoundTrip) {
  const auto path = temp_path("empty.gpc1");
  save_cloud(PointCloud{}, path);
  EXPECT_TRUE(load_cloud(path).empty());
}

TEST(CloudIo, NativeRoundTripIsBitExact) {
  PointCloud c;
  // f32-representable values survive the f32 file format exactly.
  c.points = {{1.5, -2.25, 3.0}, {0.125, 8.0, -0.5}, {1024.0, 0.0, 7.75}};
  c.feature_dim = 1;
  c.features = {0.5, 1.5, -3.0};
  const auto path = temp_path("three.gpc1");
  save_cloud(c, path);
  const auto back = load_cloud(path);
  EXPECT_EQ(back.points, c.points);
  EXPECT_EQ(back.features, c.features);
}

TEST(CloudIo, PlyRoundTrip) {
  std::mt19937_64 rng(8);
  const auto c = oracle::random_cloud(10000, rng, 50.0);
  for (auto fmt : {CloudFormat::PlyBinary, CloudFormat::PlyAscii}) {
    const auto path = temp_path(fmt == CloudFormat::PlyBinary ? "b.ply" : "a.ply");
    save_cloud(c, path, fmt);
    const auto back = load_cloud(path);
    ASSERT_EQ(back.size(), c.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(back.points[i][k] - static_cast<float>(c.points[i][k])));
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(CloudIo, MalformedFileReportsOffset) {
  const auto path = temp_path("bad.gpc1");
  {
    std::ofstream out(path, std::ios::binary);
    out << "GPC1" << std::string("\x05\0\0\0\0\0\0\0", 8) << "abc";
  }
  try {
    load_cloud(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
}

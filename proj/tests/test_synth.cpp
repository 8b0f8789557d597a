#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "placerec/synth.hpp"

using namespace placerec;
using namespace placerec::synth;

namespace {

WorldParams small_world(std::uint64_t seed) {
  WorldParams p;
  p.seed = seed;
  p.extent = 200.0;
  p.surface_density = 2.0;
  return p;
}

// Distance from p to the nearest primitive surface (ground, box faces, cylinder side or cap).
double surface_distance(const World& w, const Point3& p) {
  double best = std::abs(p.z);
  for (const auto& b : w.boxes) {
    const double cx = std::clamp(p.x, b.min_corner.x, b.max_corner.x);
    const double cy = std::clamp(p.y, b.min_corner.y, b.max_corner.y);
    const double cz = std::clamp(p.z, b.min_corner.z, b.max_corner.z);
    const Point3 c{cx, cy, cz};
    double d = distance(c, p);
    if (d == 0.0) {
      // Inside: distance to the closest face.
      d = std::min({p.x - b.min_corner.x, b.max_corner.x - p.x, p.y - b.min_corner.y, b.max_corner.y - p.y,
                    b.max_corner.z - p.z});
    }
    best = std::min(best, d);
  }
  for (const auto& c : w.cylinders) {
    const double r = std::hypot(p.x - c.x, p.y - c.y);
    const double dz = std::max({0.0, -p.z, p.z - c.height});
    const double side = std::hypot(std::abs(r - c.radius), dz);
    const double cap = std::hypot(std::max(0.0, r - c.radius), std::abs(p.z - c.height));
    best = std::min({best, side, cap});
  }
  return best;
}

BenchmarkParams tiny_benchmark(std::uint64_t seed) {
  BenchmarkParams p;
  p.world = small_world(seed);
  p.world.extent = 300.0;
  p.route_count = 1;
  p.route_length = 100.0;
  p.traversals = 2;
  return p;
}

}  // namespace

TEST(CounterRng, StreamsAreIndependentAndRepeatable) {
  CounterRng a(5, stream_id("x", 1)), b(5, stream_id("x", 1)), c(5, stream_id("x", 2)), d(6, stream_id("x", 1));
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto va = a();
    EXPECT_EQ(va, b());
    seen.insert(va);
    seen.insert(c());
    seen.insert(d());
  }
  EXPECT_EQ(seen.size(), 3000u);
  EXPECT_NE(stream_id("a"), stream_id("b"));
  EXPECT_NE(stream_id("a", 1, 2), stream_id("a", 2, 1));
}

TEST(World, ZeroDensityIsGroundOnly) {
  auto p = small_world(3);
  p.building_density = p.pole_density = p.tree_density = 0.0;
  const auto w = generate_world(p);
  EXPECT_EQ(w.primitive_count(), 0u);
  const auto c = sample_region(w, {{10, 10, -5}, {60, 60, 30}}, 1);
  EXPECT_FALSE(c.empty());
  for (const auto& q : c.points) EXPECT_EQ(q.z, 0.0);
}

TEST(World, SameSeedSameWorld) {
  const auto a = generate_world(small_world(11));
  const auto b = generate_world(small_world(11));
  const auto c = generate_world(small_world(12));
  ASSERT_EQ(a.boxes.size(), b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    EXPECT_EQ(a.boxes[i].min_corner, b.boxes[i].min_corner);
    EXPECT_EQ(a.boxes[i].max_corner, b.boxes[i].max_corner);
  }
  EXPECT_TRUE(a.boxes.size() != c.boxes.size() || a.boxes[0].min_corner != c.boxes[0].min_corner);
}

TEST(World, PrimitiveCountsFollowDensity) {
  WorldParams p;
  p.surface_density = 1.0;
  double buildings = 0, cylinders = 0;
  const int trials = 50;
  for (int s = 0; s < trials; ++s) {
    p.seed = static_cast<std::uint64_t>(s) + 100;
    const auto w = generate_world(p);
    buildings += static_cast<double>(w.boxes.size());
    cylinders += static_cast<double>(w.cylinders.size());
  }
  const double area = p.extent * p.extent * 1e-6;
  EXPECT_NEAR(buildings / trials, p.building_density * area, 0.1 * p.building_density * area);
  const double want = (p.pole_density + p.tree_density) * area;
  EXPECT_NEAR(cylinders / trials, want, 0.1 * want);
}

TEST(World, SamplesLieOnPrimitives) {
  const auto w = generate_world(small_world(4));
  const auto c = sample_region(w, {{40, 40, -1}, {120, 120, 30}}, 2);
  ASSERT_GT(c.size(), 1000u);
  for (std::size_t i = 0; i < c.size(); i += 3) EXPECT_LT(surface_distance(w, c.points[i]), 1e-9) << i;
  for (std::size_t i = 0; i < c.size(); i += 3) EXPECT_FALSE(w.inside_box(c.points[i]));
}

TEST(World, OverlappingRegionsAgree) {
  const auto w = generate_world(small_world(5));
  const Aabb small{{50, 50, -1}, {70, 70, 30}};
  const auto a = sample_region(w, small, 9);
  const auto big = sample_region(w, {{30, 30, -1}, {100, 90, 30}}, 9);
  EXPECT_EQ(oracle::set_distance(a.points, crop_aabb(big, small).points), 0.0);
}

TEST(LidarSubmap, EmptyAndGroundOnly) {
  auto p = small_world(6);
  const auto w = generate_world(p);
  grm::SubmapSpec spec;
  try {
    sample_lidar_submap(w, {-500, -500, 0}, spec, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ContractViolation);
  }
  auto bare = p;
  bare.surface_density = 0.0;
  try {
    sample_lidar_submap(generate_world(bare), {100, 100, 0}, spec, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptySubmap);
  }
  p.building_density = p.pole_density = p.tree_density = 0.0;
  const auto flat = generate_world(p);
  const auto s = sample_lidar_submap(flat, {100, 100, 0}, spec, 1, 0.5);
  ASSERT_FALSE(s.empty());
  for (const auto& q : s.points) EXPECT_EQ(q.z, 0.0);
  EXPECT_LE(s.size(), static_cast<std::size_t>(40 / 0.5 + 1) * static_cast<std::size_t>(40 / 0.5 + 1));
}

TEST(Degrade, IdentitySettingsKeepTheCloud) {
  std::mt19937_64 g(1);
  const auto c = oracle::random_cloud(500, g, 10.0);
  DegradeParams p;
  p.keep_fraction = 1.0;
  p.noise_sigma = 0.0;
  p.outlier_fraction = 0.0;
  CounterRng rng(1, 1);
  const std::vector<Point3> traj{{0, 0, 0}};
  const auto out = degrade_to_visual(c, traj, p, rng);
  EXPECT_EQ(oracle::set_distance(out.cloud.points, c.points), 0.0);
  for (bool b : out.injected) EXPECT_FALSE(b);
}

TEST(Degrade, InjectsExactOutlierCountNearTrajectory) {
  std::mt19937_64 g(2);
  const auto c = oracle::random_cloud(1000, g, 10.0);
  DegradeParams p;
  p.keep_fraction = 1.0;
  p.noise_sigma = 0.0;
  p.outlier_fraction = 0.05;
  p.outlier_radius = 30.0;
  CounterRng rng(2, 1);
  const std::vector<Point3> traj{{0, 0, 0}, {50, 0, 0}};
  const auto out = degrade_to_visual(c, traj, p, rng);
  ASSERT_EQ(out.cloud.size(), 1050u);
  ASSERT_EQ(out.injected.size(), 1050u);
  std::size_t injected = 0;
  for (std::size_t i = 0; i < out.cloud.size(); ++i) {
    if (!out.injected[i]) continue;
    ++injected;
    const double d = std::min(distance(out.cloud.points[i], traj[0]), distance(out.cloud.points[i], traj[1]));
    EXPECT_LE(d, 30.0 + 1e-9);
  }
  EXPECT_EQ(injected, 50u);
}

TEST(Degrade, KeepCountAndEdgeBias) {
  const auto w = generate_world(small_world(7));
  const auto c = sample_lidar_submap(w, {100, 100, 0}, {}, 3, 0.3);
  const auto scores = edge_scores(c, 10);
  for (double s : scores) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
  DegradeParams p;
  p.noise_sigma = 0.0;
  p.outlier_fraction = 0.0;
  p.density_bias = 2.0;
  CounterRng rng(3, 1);
  const std::vector<Point3> traj{{100, 100, 0}};
  const auto out = degrade_to_visual(c, traj, p, rng);
  EXPECT_EQ(out.cloud.size(), static_cast<std::size_t>(std::llround(p.keep_fraction * static_cast<double>(c.size()))));
  // Kept points are drawn from the input, so map them back to their scores.
  const KdTree tree(c.points);
  double kept = 0.0;
  for (const auto& q : out.cloud.points) kept += scores[tree.knn(q, 1)[0].index];
  const double all = std::accumulate(scores.begin(), scores.end(), 0.0);
  EXPECT_GT(kept / static_cast<double>(out.cloud.size()), 1.2 * all / static_cast<double>(c.size()));
}

TEST(Degrade, OutlierFilterRemovesMostInjectedPoints) {
  const auto w = generate_world(small_world(8));
  const auto c = sample_lidar_submap(w, {100, 100, 0}, {}, 4, 0.2);
  DegradeParams p;
  p.outlier_fraction = 0.05;
  CounterRng rng(4, 1);
  const std::vector<Point3> traj{{90, 100, 1.5}, {110, 100, 1.5}};
  const auto out = degrade_to_visual(c, traj, p, rng);
  const auto keep = oracle::outlier_survivors(out.cloud.points, 20, 2.0);
  std::size_t injected = 0, injected_kept = 0, genuine = 0, genuine_kept = 0;
  std::vector<bool> kept(out.cloud.size(), false);
  for (auto i : keep) kept[i] = true;
  for (std::size_t i = 0; i < out.cloud.size(); ++i) {
    (out.injected[i] ? injected : genuine) += 1;
    if (kept[i]) (out.injected[i] ? injected_kept : genuine_kept) += 1;
  }
  ASSERT_GT(injected, 0u);
  // Outliers that land on or next to a surface are indistinguishable from it.
  EXPECT_LE(static_cast<double>(injected_kept), 0.3 * static_cast<double>(injected));
  EXPECT_GE(static_cast<double>(genuine_kept), 0.9 * static_cast<double>(genuine));
}

TEST(Benchmark, ShortRouteAnchorsAndDeterminism) {
  const auto p = tiny_benchmark(9);
  const auto a = make_benchmark(p);
  ASSERT_EQ(a.routes.size(), 1u);
  EXPECT_NEAR(a.routes[0].length(), 100.0, 1e-6);
  EXPECT_EQ(a.database.size(), 6u);
  ASSERT_EQ(a.queries.size(), 2u);
  for (const auto& q : a.queries)
    for (const auto& anchor : q.anchors) {
      double best = 1e300;
      for (const auto& d : a.database) best = std::min(best, distance(d.anchor, anchor));
      EXPECT_LE(best, 20.0);
    }

  const auto dir_a = std::filesystem::temp_directory_path() / "placerec_bench_a";
  const auto dir_b = std::filesystem::temp_directory_path() / "placerec_bench_b";
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
  const auto ra = write_benchmark(a, dir_a);
  const auto rb = write_benchmark(make_benchmark(p), dir_b);
  EXPECT_EQ(manifest_text(ra), manifest_text(rb));
  EXPECT_EQ(manifest_text(load_manifest(dir_a / "manifest.tsv")), manifest_text(ra));
  for (const auto& r : ra)
    if (r.kind == "db_submap") EXPECT_EQ(load_cloud(dir_a / r.path).points, load_cloud(dir_b / r.path).points);
}

TEST(Manifest, MalformedLineIsParseError) {
  try {
    parse_manifest("kind\tpath\nnonsense\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
}

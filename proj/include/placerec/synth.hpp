#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "placerec/grm.hpp"
#include "placerec/pc_core.hpp"

namespace placerec::synth {

/// Counter-based generator: output n is a SplitMix64 hash of (key, n), where
/// the key mixes a seed and a stream id. Independent streams can be created
/// in any order without affecting each other.
class CounterRng {
 public:
  using result_type = std::uint64_t;
  CounterRng(std::uint64_t seed, std::uint64_t stream);

  result_type operator()();
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Stable stream id from a name and up to three indices.
std::uint64_t stream_id(std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0);

struct WorldParams {
  std::uint64_t seed = 1;
  double extent = 600.0;              // square world [0, extent]^2, metres
  double block_size = 50.0;           // city block edge between roads
  double road_width = 10.0;
  double building_density = 600.0;    // expected buildings per km^2
  double building_min_size = 6.0;
  double building_max_size = 24.0;
  double building_min_height = 4.0;
  double building_max_height = 20.0;
  double pole_density = 300.0;        // expected poles per km^2 (along road edges)
  double tree_density = 200.0;        // expected trees per km^2 (inside blocks)
  double surface_density = 10.0;      // sampled points per m^2

  void validate() const;
  double road_pitch() const { return block_size + road_width; }
  std::size_t road_count() const;     // roads per axis
  double road_center(std::size_t k) const { return static_cast<double>(k) * road_pitch() + 0.5 * road_width; }
};

struct Box {
  Point3 min_corner, max_corner;  // min_corner.z == 0
};

struct Cylinder {
  double x = 0.0, y = 0.0, radius = 0.0, height = 0.0;  // stands on z = 0
};

struct World {
  WorldParams params;
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;

  std::size_t primitive_count() const { return boxes.size() + cylinders.size(); }
  /// Strictly inside some box.
  bool inside_box(const Point3& p) const;
  /// Boxes whose footprint may cover (x, y).
  std::vector<std::size_t> boxes_near(double x, double y) const;

 private:
  friend World generate_world(const WorldParams& params);
  void build_index();
  double cell_ = 25.0;
  std::size_t cells_ = 0;
  std::vector<std::vector<std::size_t>> box_cells_;
};

/// Ground plane, boxes (buildings inside blocks) and vertical cylinders
/// (poles along roads, trees inside blocks). Counts are Poisson in the
/// densities, so density 0 gives the ground plane only.
World generate_world(const WorldParams& params);

/// Surface samples of every primitive over the tiles overlapping `region`,
/// cropped to it. Each 20 m tile is sampled from its own stream, so
/// overlapping regions with the same `stream` see identical points.
PointCloud sample_region(const World& world, const Aabb& region, std::uint64_t stream);

/// Lidar-like submap: sample_region over the box centred on `anchor`, then a
/// voxel downsample on a world-aligned grid. EmptySubmap if nothing falls
/// inside.
PointCloud sample_lidar_submap(const World& world, const Point3& anchor, const grm::SubmapSpec& spec,
                               std::uint64_t stream, double voxel = 0.1);

struct DegradeParams {
  double keep_fraction = 0.35;
  double noise_sigma = 0.05;
  double outlier_fraction = 0.02;
  double outlier_radius = 30.0;
  double density_bias = 1.0;  // 0: uniform keep; larger favours edges and corners
  std::size_t edge_neighbors = 10;

  void validate() const;
};

struct DegradedCloud {
  PointCloud cloud;
  std::vector<bool> injected;  // true for injected outliers
};

/// Edge score in [0, 1] per point: local surface variation from a PCA of the
/// k nearest neighbours, scaled by its maximum over the cloud.
std::vector<double> edge_scores(const PointCloud& cloud, std::size_t k);

/// Weighted subsample (keep round(keep_fraction * N) points, weights
/// (0.05 + edge score)^density_bias), Gaussian noise, then
/// round(outlier_fraction * kept) uniform outliers in balls of
/// outlier_radius around random trajectory positions.
DegradedCloud degrade_to_visual(const PointCloud& cloud, std::span<const Point3> trajectory,
                                const DegradeParams& params, CounterRng& rng);

/// Route along street centrelines with random turns at intersections.
grm::Trajectory make_route(const World& world, double length, double pose_spacing, CounterRng& rng);

struct BenchmarkParams {
  WorldParams world;
  std::size_t route_count = 4;
  double route_length = 1000.0;
  std::size_t traversals = 5;          // query traversals per route
  double lateral_offset_max = 3.0;
  double heading_jitter_deg = 5.0;
  double start_shift_max = 10.0;       // queries start up to this far along the route
  double pose_spacing = 1.0;
  DegradeParams degrade;
  grm::SubmapSpec spec;
  double lidar_voxel = 0.1;
};

struct DbSubmap {
  std::string id;
  std::size_t route = 0;
  std::size_t index = 0;
  Point3 anchor;
  PointCloud cloud;  // world frame
};

struct QueryTraversal {
  std::string id;
  std::size_t route = 0;
  std::size_t traversal = 0;
  grm::Trajectory trajectory;
  DegradedCloud cloud;  // world frame
  std::vector<Point3> anchors;  // ground-truth segment anchors
};

struct Benchmark {
  World world;
  std::vector<grm::Trajectory> routes;
  std::vector<DbSubmap> database;
  std::vector<QueryTraversal> queries;
};

/// Routes, database submaps every spec.stride metres and degraded query
/// traversals retracing each route with a lateral offset.
Benchmark make_benchmark(const BenchmarkParams& params);

struct ManifestRecord {
  std::string kind;  // route | db_submap | query_cloud | query_trajectory | query_anchor
  std::string path;  // relative to the manifest directory; query_anchor: "<traversal>#<segment>"
  Point3 anchor;
  std::size_t route = 0;
  std::uint64_t seed = 0;
};

/// Writes clouds (GPC1) and trajectories under `dir` and returns the
/// manifest records, also written to dir/manifest.tsv.
std::vector<ManifestRecord> write_benchmark(const Benchmark& bench, const std::filesystem::path& dir);
std::string manifest_text(const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> parse_manifest(const std::string& text, const std::string& origin = "<memory>");
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);

}  // namespace placerec::synth

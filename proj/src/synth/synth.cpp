#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "placerec/synth.hpp"

namespace placerec::synth {

namespace {

std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr double kTile = 20.0;

double uniform(CounterRng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t poisson(CounterRng& rng, double mean) {
  if (mean <= 0.0) return 0;
  return static_cast<std::size_t>(std::poisson_distribution<long long>(mean)(rng));
}

std::size_t count_for(double area, double density) {
  return static_cast<std::size_t>(std::llround(std::max(0.0, area) * density));
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(splitmix(seed ^ splitmix(stream))) {}

CounterRng::result_type CounterRng::operator()() { return splitmix(key_ + 0xD1B54A32D192ED03ULL * ++counter_); }

std::uint64_t stream_id(std::string_view name, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char ch : name) h = (h ^ ch) * 0x100000001B3ULL;
  return splitmix(splitmix(splitmix(h ^ a) ^ b) ^ c);
}

// ---------------------------------------------------------------------------
// World

void WorldParams::validate() const {
  if (!(extent > 0.0) || !(block_size > 0.0) || !(road_width > 0.0))
    fail(ErrorKind::ConfigError, "world extent, block size and road width must be positive");
  if (building_density < 0.0 || pole_density < 0.0 || tree_density < 0.0 || surface_density < 0.0)
    fail(ErrorKind::ConfigError, "densities must be non-negative");
  if (!(building_min_size > 0.0) || building_max_size < building_min_size || !(building_min_height > 0.0) ||
      building_max_height < building_min_height)
    fail(ErrorKind::ConfigError, "building size ranges must be positive and ordered");
  if (block_size <= 2.0) fail(ErrorKind::ConfigError, "block size must exceed the 1 m setback on each side");
}

std::size_t WorldParams::road_count() const {
  if (extent < road_width) return 0;
  return static_cast<std::size_t>(std::floor((extent - road_width) / road_pitch())) + 1;
}

std::vector<std::size_t> World::boxes_near(double x, double y) const {
  if (cells_ == 0 || x < 0.0 || y < 0.0) return {};
  const auto cx = static_cast<std::size_t>(x / cell_);
  const auto cy = static_cast<std::size_t>(y / cell_);
  if (cx >= cells_ || cy >= cells_) return {};
  return box_cells_[cy * cells_ + cx];
}

bool World::inside_box(const Point3& p) const {
  for (auto i : boxes_near(p.x, p.y)) {
    const Box& b = boxes[i];
    if (p.x > b.min_corner.x && p.x < b.max_corner.x && p.y > b.min_corner.y && p.y < b.max_corner.y &&
        p.z > b.min_corner.z && p.z < b.max_corner.z)
      return true;
  }
  return false;
}

void World::build_index() {
  cells_ = static_cast<std::size_t>(std::ceil(params.extent / cell_)) + 1;
  box_cells_.assign(cells_ * cells_, {});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    const auto x0 = static_cast<std::size_t>(std::max(0.0, b.min_corner.x) / cell_);
    const auto x1 = std::min(cells_ - 1, static_cast<std::size_t>(std::max(0.0, b.max_corner.x) / cell_));
    const auto y0 = static_cast<std::size_t>(std::max(0.0, b.min_corner.y) / cell_);
    const auto y1 = std::min(cells_ - 1, static_cast<std::size_t>(std::max(0.0, b.max_corner.y) / cell_));
    for (auto cy = y0; cy <= y1; ++cy)
      for (auto cx = x0; cx <= x1; ++cx) box_cells_[cy * cells_ + cx].push_back(i);
  }
}

World generate_world(const WorldParams& p) {
  p.validate();
  World w;
  w.params = p;
  CounterRng rng(p.seed, stream_id("world"));
  const double area_km2 = p.extent * p.extent * 1e-6;
  const std::size_t roads = p.road_count();
  const std::size_t blocks = roads >= 2 ? roads - 1 : 0;
  auto block_origin = [&](std::size_t k) { return static_cast<double>(k) * p.road_pitch() + p.road_width; };

  const std::size_t n_buildings = poisson(rng, p.building_density * area_km2);
  const std::size_t n_poles = poisson(rng, p.pole_density * area_km2);
  const std::size_t n_trees = poisson(rng, p.tree_density * area_km2);

  const double usable = p.block_size - 2.0;
  for (std::size_t i = 0; blocks > 0 && i < n_buildings; ++i) {
    const auto bx = std::uniform_int_distribution<std::size_t>(0, blocks - 1)(rng);
    const auto by = std::uniform_int_distribution<std::size_t>(0, blocks - 1)(rng);
    const double sx = std::min(uniform(rng, p.building_min_size, p.building_max_size), usable);
    const double sy = std::min(uniform(rng, p.building_min_size, p.building_max_size), usable);
    const double h = uniform(rng, p.building_min_height, p.building_max_height);
    const double x0 = block_origin(bx) + 1.0 + uniform(rng, 0.0, usable - sx);
    const double y0 = block_origin(by) + 1.0 + uniform(rng, 0.0, usable - sy);
    w.boxes.push_back({{x0, y0, 0.0}, {x0 + sx, y0 + sy, h}});
  }
  for (std::size_t i = 0; roads > 0 && i < n_poles; ++i) {
    const bool along_y = rng() & 1;
    const auto k = std::uniform_int_distribution<std::size_t>(0, roads - 1)(rng);
    const double t = uniform(rng, 0.0, p.extent);
    const double side = (rng() & 1) ? 1.0 : -1.0;
    const double across = p.road_center(k) + side * (0.5 * p.road_width - 0.5);
    Cylinder c;
    c.x = along_y ? across : t;
    c.y = along_y ? t : across;
    c.radius = uniform(rng, 0.1, 0.25);
    c.height = uniform(rng, 3.0, 8.0);
    w.cylinders.push_back(c);
  }
  for (std::size_t i = 0; blocks > 0 && i < n_trees; ++i) {
    const auto bx = std::uniform_int_distribution<std::size_t>(0, blocks - 1)(rng);
    const auto by = std::uniform_int_distribution<std::size_t>(0, blocks - 1)(rng);
    Cylinder c;
    c.radius = uniform(rng, 0.4, 1.0);
    c.height = uniform(rng, 3.0, 7.0);
    c.x = block_origin(bx) + uniform(rng, 1.0 + c.radius, p.block_size - 1.0 - c.radius);
    c.y = block_origin(by) + uniform(rng, 1.0 + c.radius, p.block_size - 1.0 - c.radius);
    w.cylinders.push_back(c);
  }
  w.build_index();
  return w;
}

// ---------------------------------------------------------------------------
// Surface sampling

namespace {

bool in_footprint(const World& w, const std::vector<std::size_t>& near, double x, double y) {
  for (auto i : near) {
    const Box& b = w.boxes[i];
    if (x > b.min_corner.x && x < b.max_corner.x && y > b.min_corner.y && y < b.max_corner.y) return true;
  }
  return false;
}

void sample_tile(const World& w, std::int64_t tx, std::int64_t ty, std::uint64_t stream, std::vector<Point3>& out) {
  const double density = w.params.surface_density;
  const double x0 = std::max(0.0, static_cast<double>(tx) * kTile);
  const double x1 = std::min(w.params.extent, static_cast<double>(tx + 1) * kTile);
  const double y0 = std::max(0.0, static_cast<double>(ty) * kTile);
  const double y1 = std::min(w.params.extent, static_cast<double>(ty + 1) * kTile);
  if (!(x1 > x0) || !(y1 > y0) || density <= 0.0) return;
  CounterRng rng(w.params.seed, stream_id("tile", stream, static_cast<std::uint64_t>(tx), static_cast<std::uint64_t>(ty)));

  // Boxes touching the tile (deduplicated across index cells).
  std::set<std::size_t> near_set;
  for (double y = y0; y < y1 + 25.0; y += 25.0)
    for (double x = x0; x < x1 + 25.0; x += 25.0)
      for (auto i : w.boxes_near(std::min(x, x1), std::min(y, y1))) near_set.insert(i);
  const std::vector<std::size_t> near(near_set.begin(), near_set.end());

  const std::size_t n_ground = count_for((x1 - x0) * (y1 - y0), density);
  for (std::size_t i = 0; i < n_ground; ++i) {
    const double x = uniform(rng, x0, x1);
    const double y = uniform(rng, y0, y1);
    if (!in_footprint(w, near, x, y)) out.push_back({x, y, 0.0});
  }

  auto keep = [&](const Point3& p) {
    if (!w.inside_box(p)) out.push_back(p);
  };
  for (auto i : near) {
    const Box& b = w.boxes[i];
    const double h = b.max_corner.z;
    // Walls of constant x, then of constant y; each owned by the tile containing it.
    for (double fx : {b.min_corner.x, b.max_corner.x}) {
      if (fx < x0 || fx >= x1) continue;
      const double lo = std::max(b.min_corner.y, y0), hi = std::min(b.max_corner.y, y1);
      if (!(hi > lo)) continue;
      const std::size_t n = count_for((hi - lo) * h, density);
      for (std::size_t k = 0; k < n; ++k) keep({fx, uniform(rng, lo, hi), uniform(rng, 0.0, h)});
    }
    for (double fy : {b.min_corner.y, b.max_corner.y}) {
      if (fy < y0 || fy >= y1) continue;
      const double lo = std::max(b.min_corner.x, x0), hi = std::min(b.max_corner.x, x1);
      if (!(hi > lo)) continue;
      const std::size_t n = count_for((hi - lo) * h, density);
      for (std::size_t k = 0; k < n; ++k) keep({uniform(rng, lo, hi), fy, uniform(rng, 0.0, h)});
    }
    const double lx = std::max(b.min_corner.x, x0), hx = std::min(b.max_corner.x, x1);
    const double ly = std::max(b.min_corner.y, y0), hy = std::min(b.max_corner.y, y1);
    if (hx > lx && hy > ly) {
      const std::size_t n = count_for((hx - lx) * (hy - ly), density);
      for (std::size_t k = 0; k < n; ++k) keep({uniform(rng, lx, hx), uniform(rng, ly, hy), h});
    }
  }
  for (const auto& c : w.cylinders) {
    if (c.x < x0 || c.x >= x1 || c.y < y0 || c.y >= y1) continue;
    const std::size_t n = count_for(2.0 * std::numbers::pi * c.radius * c.height, density);
    for (std::size_t k = 0; k < n; ++k) {
      const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      keep({c.x + c.radius * std::cos(theta), c.y + c.radius * std::sin(theta), uniform(rng, 0.0, c.height)});
    }
  }
}

std::int64_t tile_of(double v) { return static_cast<std::int64_t>(std::floor(v / kTile)); }

}  // namespace

PointCloud sample_region(const World& world, const Aabb& region, std::uint64_t stream) {
  std::vector<Point3> raw;
  for (auto ty = tile_of(region.min_corner.y); ty <= tile_of(region.max_corner.y); ++ty)
    for (auto tx = tile_of(region.min_corner.x); tx <= tile_of(region.max_corner.x); ++tx)
      sample_tile(world, tx, ty, stream, raw);
  PointCloud cloud;
  cloud.frame = FrameTag::World;
  for (const auto& p : raw)
    if (region.contains(p)) cloud.points.push_back(p);
  return cloud;
}

PointCloud sample_lidar_submap(const World& world, const Point3& anchor, const grm::SubmapSpec& spec,
                               std::uint64_t stream, double voxel) {
  if (anchor.x < 0.0 || anchor.y < 0.0 || anchor.x > world.params.extent || anchor.y > world.params.extent)
    fail(ErrorKind::ContractViolation, "submap anchor lies outside the world");
  const PointCloud raw = sample_region(world, Aabb::centered(anchor, spec.extent), stream);
  if (raw.empty()) fail(ErrorKind::EmptySubmap, "no surface inside the submap box");
  PointCloud out = voxel_downsample(raw, VoxelGridParams{voxel, Point3{}});
  out.frame = FrameTag::World;
  return out;
}

// ---------------------------------------------------------------------------
// Degradation

void DegradeParams::validate() const {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) fail(ErrorKind::ConfigError, "keep_fraction must be in (0, 1]");
  if (noise_sigma < 0.0) fail(ErrorKind::ConfigError, "noise sigma must be non-negative");
  if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0))
    fail(ErrorKind::ConfigError, "outlier_fraction must be in [0, 1)");
  if (outlier_radius < 0.0 || density_bias < 0.0) fail(ErrorKind::ConfigError, "radius and bias must be >= 0");
}

std::vector<double> edge_scores(const PointCloud& cloud, std::size_t k) {
  std::vector<double> score(cloud.size(), 0.0);
  if (cloud.size() < 3) return score;
  k = std::min(k, cloud.size() - 1);
  const KdTree tree(cloud.points);
  double best = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    auto nbs = tree.knn(cloud.points[i], k, i);
    nbs.push_back({i, 0.0});
    for (const auto& nb : nbs) {
      const auto& p = cloud.points[nb.index];
      mean += Eigen::Vector3d(p.x, p.y, p.z);
    }
    mean /= static_cast<double>(nbs.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& nb : nbs) {
      const auto& p = cloud.points[nb.index];
      const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - mean;
      cov += d * d.transpose();
    }
    const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(cov, Eigen::EigenvaluesOnly).eigenvalues();
    const double total = ev.sum();
    score[i] = total > 0.0 ? std::max(0.0, ev[0]) / total : 0.0;
    best = std::max(best, score[i]);
  }
  if (best > 0.0)
    for (auto& s : score) s /= best;
  return score;
}

DegradedCloud degrade_to_visual(const PointCloud& cloud, std::span<const Point3> trajectory,
                                const DegradeParams& params, CounterRng& rng) {
  params.validate();
  if (cloud.empty()) fail(ErrorKind::EmptyInput, "degrade of an empty cloud");
  const std::size_t n = cloud.size();
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(params.keep_fraction * n)));
  std::vector<std::size_t> kept(n);
  for (std::size_t i = 0; i < n; ++i) kept[i] = i;
  if (keep < n) {
    const auto score = params.density_bias > 0.0 ? edge_scores(cloud, params.edge_neighbors) : std::vector<double>(n, 0.0);
    // Weighted sampling without replacement: keep the largest log(u) / w.
    std::vector<std::pair<double, std::size_t>> keys(n);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::pow(0.05 + score[i], params.density_bias);
      const double u = std::max(unit(rng), 1e-300);
      keys[i] = {std::log(u) / w, i};
    }
    std::nth_element(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(keep), keys.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    kept.clear();
    for (std::size_t i = 0; i < keep; ++i) kept.push_back(keys[i].second);
    std::sort(kept.begin(), kept.end());
  }
  DegradedCloud out;
  out.cloud.frame = cloud.frame;
  std::normal_distribution<double> noise(0.0, params.noise_sigma > 0.0 ? params.noise_sigma : 1.0);
  for (auto i : kept) {
    Point3 p = cloud.points[i];
    if (params.noise_sigma > 0.0)
      for (int a = 0; a < 3; ++a) p[a] += noise(rng);
    out.cloud.points.push_back(p);
  }
  out.injected.assign(out.cloud.size(), false);

  const auto outliers = static_cast<std::size_t>(std::llround(params.outlier_fraction * static_cast<double>(keep)));
  const Point3 fallback = centroid(cloud.points);
  for (std::size_t k = 0; k < outliers; ++k) {
    Point3 c = fallback;
    if (!trajectory.empty())
      c = trajectory[std::uniform_int_distribution<std::size_t>(0, trajectory.size() - 1)(rng)];
    Point3 d;
    do {
      for (int a = 0; a < 3; ++a) d[a] = uniform(rng, -1.0, 1.0);
    } while (squared_distance(d, Point3{}) > 1.0);
    out.cloud.points.push_back(c + d * params.outlier_radius);
    out.injected.push_back(true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Routes and benchmark

grm::Trajectory make_route(const World& world, double length, double pose_spacing, CounterRng& rng) {
  const auto& p = world.params;
  const std::size_t roads = p.road_count();
  if (roads < 2) fail(ErrorKind::ConfigError, "world too small for a street grid");
  if (!(length > 0.0) || !(pose_spacing > 0.0)) fail(ErrorKind::ConfigError, "route length and spacing must be positive");
  const int n = static_cast<int>(roads);
  const int lo = n > 2 ? 1 : 0, hi = n > 2 ? n - 2 : n - 1;
  int i = std::uniform_int_distribution<int>(lo, hi)(rng);
  int j = std::uniform_int_distribution<int>(lo, hi)(rng);
  static constexpr int dx[4] = {1, 0, -1, 0};
  static constexpr int dy[4] = {0, 1, 0, -1};
  auto valid = [&](int d) { return i + dx[d] >= 0 && i + dx[d] < n && j + dy[d] >= 0 && j + dy[d] < n; };
  int dir;
  do dir = std::uniform_int_distribution<int>(0, 3)(rng);
  while (!valid(dir));

  std::vector<Point3> corners{{p.road_center(static_cast<std::size_t>(i)), p.road_center(static_cast<std::size_t>(j)), 1.5}};
  double total = 0.0;
  while (total < length) {
    i += dx[dir];
    j += dy[dir];
    corners.push_back({p.road_center(static_cast<std::size_t>(i)), p.road_center(static_cast<std::size_t>(j)), 1.5});
    total += p.road_pitch();
    // Straight with probability 1/2, else turn; never reverse.
    std::vector<int> options;
    const int straight = dir, left = (dir + 1) % 4, right = (dir + 3) % 4;
    const double r = uniform(rng, 0.0, 1.0);
    if (r < 0.5) options = {straight, left, right};
    else if (r < 0.75) options = {left, right, straight};
    else options = {right, left, straight};
    int next = -1;
    for (int d : options)
      if (valid(d)) { next = d; break; }
    dir = next >= 0 ? next : (dir + 2) % 4;
  }
  grm::Trajectory corner_path;
  for (std::size_t k = 0; k < corners.size(); ++k) {
    grm::Pose pose;
    pose.timestamp = static_cast<double>(k);
    pose.position = corners[k];
    corner_path.poses.push_back(pose);
  }
  grm::Trajectory route;
  const auto steps = static_cast<std::size_t>(std::floor(length / pose_spacing + 1e-9));
  for (std::size_t k = 0; k <= steps; ++k) {
    const double s = static_cast<double>(k) * pose_spacing;
    grm::Pose pose;
    pose.timestamp = s / 10.0;
    pose.position = corner_path.position_at(s);
    const Point3 ahead = corner_path.position_at(s + 0.5 * pose_spacing);
    const Point3 behind = corner_path.position_at(std::max(0.0, s - 0.5 * pose_spacing));
    const double yaw = std::atan2(ahead.y - behind.y, ahead.x - behind.x);
    pose.orientation = {0.0, 0.0, std::sin(0.5 * yaw), std::cos(0.5 * yaw)};
    route.poses.push_back(pose);
  }
  return route;
}

namespace {

grm::Trajectory retrace(const grm::Trajectory& route, double shift, double offset, double heading_jitter,
                        double spacing) {
  grm::Trajectory t;
  const double length = route.length();
  for (double s = shift; s <= length + 1e-9; s += spacing) {
    const Point3 here = route.position_at(s);
    const Point3 ahead = route.position_at(std::min(length, s + 0.5 * spacing));
    const Point3 behind = route.position_at(std::max(0.0, s - 0.5 * spacing));
    const double yaw = std::atan2(ahead.y - behind.y, ahead.x - behind.x);
    grm::Pose pose;
    pose.timestamp = (s - shift) / 10.0;
    pose.position = {here.x - std::sin(yaw) * offset, here.y + std::cos(yaw) * offset, here.z};
    const double heading = yaw + heading_jitter;
    pose.orientation = {0.0, 0.0, std::sin(0.5 * heading), std::cos(0.5 * heading)};
    t.poses.push_back(pose);
  }
  return t;
}

std::string indexed(const char* fmt, std::size_t a, std::size_t b) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, a, b);
  return buf;
}

}  // namespace

Benchmark make_benchmark(const BenchmarkParams& params) {
  params.degrade.validate();
  Benchmark bench;
  bench.world = generate_world(params.world);
  const std::uint64_t seed = params.world.seed;
  const std::uint64_t lidar_stream = stream_id("lidar");
  for (std::size_t r = 0; r < params.route_count; ++r) {
    CounterRng route_rng(seed, stream_id("route", r));
    bench.routes.push_back(make_route(bench.world, params.route_length, params.pose_spacing, route_rng));
    const auto& route = bench.routes.back();
    const auto anchors = grm::anchor_positions(route, params.spec.stride);
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      DbSubmap s;
      s.id = indexed("db_r%zu_%03zu", r, k);
      s.route = r;
      s.index = k;
      s.anchor = anchors[k];
      s.cloud = sample_lidar_submap(bench.world, anchors[k], params.spec, lidar_stream, params.lidar_voxel);
      bench.database.push_back(std::move(s));
    }
    for (std::size_t t = 0; t < params.traversals; ++t) {
      CounterRng rng(seed, stream_id("traversal", r, t));
      const double shift = uniform(rng, 0.0, params.start_shift_max);
      const double offset = uniform(rng, -params.lateral_offset_max, params.lateral_offset_max);
      const double jitter = uniform(rng, -params.heading_jitter_deg, params.heading_jitter_deg) * std::numbers::pi / 180.0;
      QueryTraversal q;
      q.id = indexed("q_r%zu_t%zu", r, t);
      q.route = r;
      q.traversal = t;
      q.trajectory = retrace(route, shift, offset, jitter, params.pose_spacing);
      q.anchors = grm::anchor_positions(q.trajectory, params.spec.stride);
      // Union of the tiles under every query segment, sampled once.
      std::set<std::pair<std::int64_t, std::int64_t>> tiles;
      for (const auto& a : q.anchors) {
        const Aabb box = Aabb::centered(a, params.spec.extent);
        for (auto ty = tile_of(box.min_corner.y); ty <= tile_of(box.max_corner.y); ++ty)
          for (auto tx = tile_of(box.min_corner.x); tx <= tile_of(box.max_corner.x); ++tx) tiles.insert({tx, ty});
      }
      PointCloud raw;
      raw.frame = FrameTag::World;
      const std::uint64_t query_stream = stream_id("query_lidar", r, t);
      for (const auto& [tx, ty] : tiles) sample_tile(bench.world, tx, ty, query_stream, raw.points);
      std::vector<Point3> positions;
      for (const auto& pose : q.trajectory.poses) positions.push_back(pose.position);
      CounterRng degrade_rng(seed, stream_id("degrade", r, t));
      q.cloud = degrade_to_visual(raw, positions, params.degrade, degrade_rng);
      bench.queries.push_back(std::move(q));
    }
  }
  return bench;
}

// ---------------------------------------------------------------------------
// Manifest

std::string manifest_text(const std::vector<ManifestRecord>& records) {
  std::string s = "# kind\tpath\tx\ty\tz\troute\tseed\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s\t%s\t%.6f\t%.6f\t%.6f\t%zu\t%llu\n", r.kind.c_str(), r.path.c_str(),
                  r.anchor.x, r.anchor.y, r.anchor.z, r.route, static_cast<unsigned long long>(r.seed));
    s += buf;
  }
  return s;
}

std::vector<ManifestRecord> parse_manifest(const std::string& text, const std::string& origin) {
  std::vector<ManifestRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestRecord r;
    unsigned long long seed = 0;
    if (!std::getline(ls, r.kind, '\t') || !std::getline(ls, r.path, '\t') ||
        !(ls >> r.anchor.x >> r.anchor.y >> r.anchor.z >> r.route >> seed))
      fail(ErrorKind::ParseError, origin + ": malformed manifest record at line " + std::to_string(line_no));
    r.seed = seed;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), path.string());
}

std::vector<ManifestRecord> write_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::uint64_t seed = bench.world.params.seed;
  std::vector<ManifestRecord> records;
  for (std::size_t r = 0; r < bench.routes.size(); ++r) {
    const std::string path = "routes/route_" + std::to_string(r) + ".traj";
    grm::save_trajectory(bench.routes[r], dir / path);
    records.push_back({"route", path, bench.routes[r].poses.front().position, r, seed});
  }
  for (const auto& s : bench.database) {
    const std::string path = "db/" + s.id + ".gpc1";
    save_cloud(s.cloud, dir / path);
    records.push_back({"db_submap", path, s.anchor, s.route, seed});
  }
  for (const auto& q : bench.queries) {
    const std::string cloud_path = "queries/" + q.id + ".gpc1";
    const std::string traj_path = "queries/" + q.id + ".traj";
    save_cloud(q.cloud.cloud, dir / cloud_path);
    grm::save_trajectory(q.trajectory, dir / traj_path);
    std::ofstream prov(dir / ("queries/" + q.id + ".provenance"), std::ios::trunc);
    std::size_t injected = 0;
    for (bool b : q.cloud.injected) injected += b;
    prov << "injected_outliers " << injected << "\n";
    for (std::size_t i = 0; i < q.cloud.injected.size(); ++i)
      if (q.cloud.injected[i]) prov << i << "\n";
    records.push_back({"query_cloud", cloud_path, q.trajectory.poses.front().position, q.route, seed});
    records.push_back({"query_trajectory", traj_path, q.trajectory.poses.front().position, q.route, seed});
    for (std::size_t k = 0; k < q.anchors.size(); ++k)
      records.push_back({"query_anchor", q.id + "#" + std::to_string(k), q.anchors[k], q.route, seed});
  }
  std::ofstream(dir / "manifest.tsv", std::ios::trunc) << manifest_text(records);
  return records;
}

}  // namespace placerec::synth

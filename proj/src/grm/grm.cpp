#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "placerec/grm.hpp"

namespace placerec::grm {

double Quaternion::norm() const { return std::sqrt(x * x + y * y + z * z + w * w); }

void Trajectory::validate() const {
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (!poses[i].position.finite())
      fail(ErrorKind::ContractViolation, "non-finite position in pose " + std::to_string(i));
    if (std::abs(poses[i].orientation.norm() - 1.0) > 1e-6)
      fail(ErrorKind::ContractViolation, "non-unit quaternion in pose " + std::to_string(i));
    if (i > 0 && !(poses[i].timestamp > poses[i - 1].timestamp))
      fail(ErrorKind::ContractViolation, "timestamps not strictly increasing at pose " + std::to_string(i));
  }
}

double Trajectory::length() const {
  double s = 0.0;
  for (std::size_t i = 1; i < poses.size(); ++i) s += distance(poses[i - 1].position, poses[i].position);
  return s;
}

Point3 Trajectory::position_at(double s) const {
  if (poses.empty()) fail(ErrorKind::EmptyInput, "empty trajectory");
  if (s <= 0.0) return poses.front().position;
  double walked = 0.0;
  for (std::size_t i = 1; i < poses.size(); ++i) {
    const double seg = distance(poses[i - 1].position, poses[i].position);
    if (seg > 0.0 && walked + seg >= s) {
      const double t = (s - walked) / seg;
      return poses[i - 1].position + (poses[i].position - poses[i - 1].position) * t;
    }
    walked += seg;
  }
  return poses.back().position;
}

Trajectory parse_trajectory(const std::string& text, const std::string& origin) {
  Trajectory traj;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Pose p;
    ls >> p.timestamp >> p.position.x >> p.position.y >> p.position.z >> p.orientation.x >> p.orientation.y >>
        p.orientation.z >> p.orientation.w;
    std::string extra;
    if (!ls || (ls >> extra))
      fail(ErrorKind::ParseError, origin + ": expected 8 numbers at line " + std::to_string(line_no));
    traj.poses.push_back(p);
  }
  try {
    traj.validate();
  } catch (const Error& e) {
    fail(ErrorKind::ParseError, origin + ": " + e.what());
  }
  return traj;
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_trajectory(buf.str(), path.string());
}

void save_trajectory(const Trajectory& trajectory, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char buf[512];
  for (const auto& p : trajectory.poses) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", p.timestamp, p.position.x,
                  p.position.y, p.position.z, p.orientation.x, p.orientation.y, p.orientation.z, p.orientation.w);
    out << buf;
  }
}

DensifyParams densify_params_for(VoSource source) {
  return DensifyParams{source == VoSource::Dso ? std::size_t{10} : std::size_t{20}};
}

std::string_view to_string(VoSource source) {
  switch (source) {
    case VoSource::Dso: return "dso";
    case VoSource::OrbSlam3: return "orbslam3";
    case VoSource::VinsMono: return "vins";
    case VoSource::Synthetic: return "synthetic";
  }
  return "unknown";
}

std::vector<Point3> anchor_positions(const Trajectory& trajectory, double stride) {
  if (!(stride > 0.0)) fail(ErrorKind::ContractViolation, "stride must be positive");
  if (trajectory.poses.size() < 2) fail(ErrorKind::ContractViolation, "segmentation needs at least 2 poses");
  const double total = trajectory.length();
  std::vector<Point3> anchors;
  if (total < stride) {
    anchors.push_back(trajectory.poses.front().position);
    return anchors;
  }
  // Tolerate accumulated rounding so an exact multiple still yields its anchor.
  const auto count = static_cast<std::size_t>(std::floor(total / stride + 1e-9)) + 1;
  for (std::size_t i = 0; i < count; ++i) anchors.push_back(trajectory.position_at(static_cast<double>(i) * stride));
  return anchors;
}

std::vector<Segment> segment_submaps(const Trajectory& trajectory, const PointCloud& cloud, const SubmapSpec& spec) {
  for (int a = 0; a < 3; ++a)
    if (!(spec.extent[a] > 0.0)) fail(ErrorKind::ContractViolation, "submap extent must be positive");
  const auto anchors = anchor_positions(trajectory, spec.stride);
  std::vector<Segment> out;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    auto crop = crop_aabb(cloud, Aabb::centered(anchors[i], spec.extent));
    if (crop.empty()) continue;
    crop.frame = FrameTag::World;
    out.push_back({anchors[i], i, std::move(crop)});
  }
  return out;
}

std::vector<double> mean_neighbor_distances(const PointCloud& cloud, std::size_t k) {
  if (k == 0) fail(ErrorKind::ContractViolation, "k must be at least 1");
  if (cloud.size() <= k)
    fail(ErrorKind::InsufficientPoints,
         std::to_string(cloud.size()) + " points, need more than k = " + std::to_string(k));
  const KdTree tree(cloud.points);
  std::vector<double> t(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double s = 0.0;
    for (const auto& nb : tree.knn(cloud.points[i], k, i)) s += nb.distance;
    t[i] = s / static_cast<double>(k);
  }
  return t;
}

namespace {

PointCloud select(const PointCloud& cloud, const std::vector<bool>& keep) {
  PointCloud out;
  out.frame = cloud.frame;
  out.feature_dim = cloud.feature_dim;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!keep[i]) continue;
    out.points.push_back(cloud.points[i]);
    const auto f = cloud.feature(i);
    out.features.insert(out.features.end(), f.begin(), f.end());
  }
  return out;
}

struct PointBitsHash {
  std::size_t operator()(const Point3& p) const noexcept {
    std::size_t h = std::hash<double>{}(p.x);
    h ^= std::hash<double>{}(p.y) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= std::hash<double>{}(p.z) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    return h;
  }
};

}  // namespace

PointCloud remove_outliers(const PointCloud& cloud, const FilterParams& params) {
  if (params.sigma_multiplier < 0.0) fail(ErrorKind::ContractViolation, "sigma multiplier must be >= 0");
  const auto t = mean_neighbor_distances(cloud, params.k_neighbors);
  const double n = static_cast<double>(t.size());
  double mean = 0.0;
  for (double v : t) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : t) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / n);
  std::vector<bool> keep(t.size(), true);
  if (sigma > 0.0) {
    const double threshold = mean + params.sigma_multiplier * sigma;
    for (std::size_t i = 0; i < t.size(); ++i) keep[i] = t[i] < threshold;
  }
  return select(cloud, keep);
}

PointCloud densify(const PointCloud& cloud, const DensifyParams& params) {
  if (params.k_neighbors == 0) fail(ErrorKind::ContractViolation, "k must be at least 1");
  if (cloud.size() <= params.k_neighbors)
    fail(ErrorKind::InsufficientPoints,
         std::to_string(cloud.size()) + " points, need more than k = " + std::to_string(params.k_neighbors));
  const KdTree tree(cloud.points);
  PointCloud out = cloud;
  const std::size_t dim = cloud.feature_dim;
  std::unordered_set<Point3, PointBitsHash> seen;
  seen.reserve(cloud.size() * params.k_neighbors);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (const auto& nb : tree.knn(cloud.points[i], params.k_neighbors, i)) {
      const Point3& a = cloud.points[i];
      const Point3& b = cloud.points[nb.index];
      // a + b is commutative in IEEE arithmetic, so symmetric pairs collide exactly.
      const Point3 mid{(a.x + b.x) * 0.5, (a.y + b.y) * 0.5, (a.z + b.z) * 0.5};
      if (!seen.insert(mid).second) continue;
      out.points.push_back(mid);
      for (std::size_t c = 0; c < dim; ++c)
        out.features.push_back(0.5 * (cloud.features[i * dim + c] + cloud.features[nb.index * dim + c]));
    }
  }
  return out;
}

PointCloud normalize_scale(const PointCloud& cloud) {
  if (cloud.empty()) fail(ErrorKind::EmptyInput, "normalize_scale of empty cloud");
  const Aabb box = bounds(cloud.points);
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, box.max_corner[a] - box.min_corner[a]);
  PointCloud out = cloud;
  out.frame = FrameTag::Normalized;
  for (auto& p : out.points) {
    if (extent > 0.0) {
      for (int a = 0; a < 3; ++a) p[a] = (p[a] - box.min_corner[a]) / extent;
    } else {
      p = Point3{};
    }
  }
  return out;
}

QpcResult build_qpc(const Trajectory& trajectory, const PointCloud& cloud, const SubmapSpec& spec,
                    const FilterParams& filter, const DensifyParams& densify_params, VoSource source) {
  QpcResult result;
  for (auto& segment : segment_submaps(trajectory, cloud, spec)) {
    try {
      auto filtered = remove_outliers(segment.cloud, filter);
      auto dense = densify(filtered, densify_params);
      result.queries.push_back({normalize_scale(dense), segment.anchor_world, source, segment.index});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientPoints) throw;
      result.warnings.push_back({segment.index, e.what()});
    }
  }
  if (result.queries.empty())
    fail(ErrorKind::NoValidSegments, "every segment was dropped (" + std::to_string(result.warnings.size()) +
                                         " warnings)");
  return result;
}

}  // namespace placerec::grm

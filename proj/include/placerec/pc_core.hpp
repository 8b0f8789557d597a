#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "placerec/error.hpp"

namespace placerec {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }

  friend Point3 operator+(const Point3& a, const Point3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Point3 operator-(const Point3& a, const Point3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Point3 operator*(const Point3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Point3&, const Point3&) = default;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

inline double distance(const Point3& a, const Point3& b) { return std::sqrt(squared_distance(a, b)); }

enum class FrameTag : std::uint8_t { World, Local, Normalized };

/// Ordered point set with optional uniform-width per-point features stored
/// row-major in `features` (size() * feature_dim values).
struct PointCloud {
  std::vector<Point3> points;
  std::size_t feature_dim = 0;
  std::vector<double> features;
  FrameTag frame = FrameTag::Local;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_features() const { return feature_dim > 0; }

  std::span<const double> feature(std::size_t i) const {
    return {features.data() + i * feature_dim, feature_dim};
  }
  std::span<double> feature(std::size_t i) { return {features.data() + i * feature_dim, feature_dim}; }

  /// Throws ContractViolation when features and points disagree or a
  /// coordinate is not finite.
  void validate() const;
};

struct VoxelGridParams {
  double cell_size = 0.1;
  /// Grid origin; defaults to the cloud's own min corner.
  std::optional<Point3> origin;
};

struct Aabb {
  Point3 min_corner;
  Point3 max_corner;

  bool contains(const Point3& p) const {
    return p.x >= min_corner.x && p.y >= min_corner.y && p.z >= min_corner.z && p.x <= max_corner.x &&
           p.y <= max_corner.y && p.z <= max_corner.z;
  }

  static Aabb centered(const Point3& center, const Point3& extent) {
    const Point3 half = extent * 0.5;
    return {center - half, center + half};
  }
};

/// Tight bounds of a nonempty point set.
Aabb bounds(std::span<const Point3> points);

Point3 centroid(std::span<const Point3> points);

struct Neighbor {
  std::size_t index;
  double distance;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Static 3-d tree over a borrowed point array. The points must outlive the
/// tree.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> points, std::size_t leaf_size = 8);

  /// k nearest points sorted by (distance, index). `skip` removes one index
  /// from consideration (the query's own slot when it is a member).
  std::vector<Neighbor> knn(const Point3& query, std::size_t k,
                            std::optional<std::size_t> skip = std::nullopt) const;

  /// Indices within `radius` (inclusive), ascending by index.
  std::vector<std::size_t> radius_search(const Point3& query, double radius) const;

  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    int axis = -1;
    double split = 0.0;
    Aabb box;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::span<const Point3> points_;
  std::size_t leaf_size_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

PointCloud voxel_downsample(const PointCloud& cloud, const VoxelGridParams& params);

/// Voxel index of every input point, numbered in first-occurrence order, and
/// the number of occupied voxels. Shares the key rule with voxel_downsample.
struct VoxelAssignment {
  std::vector<std::uint32_t> voxel_of_point;
  std::size_t voxel_count = 0;
};
VoxelAssignment assign_voxels(std::span<const Point3> points, const VoxelGridParams& params);

/// k nearest neighbours of `query`. If the query coincides with a member
/// point, the lowest-indexed coincident member is excluded.
std::vector<Neighbor> knn(const PointCloud& cloud, const Point3& query, std::size_t k);

PointCloud crop_aabb(const PointCloud& cloud, const Aabb& box);

enum class CloudFormat { Native, PlyBinary, PlyAscii };

PointCloud load_cloud(const std::filesystem::path& path);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path,
                std::optional<CloudFormat> format = std::nullopt);

}  // namespace placerec

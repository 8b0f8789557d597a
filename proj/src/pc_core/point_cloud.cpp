#include <algorithm>
#include <limits>
#include <queue>
#include <string>
#include <unordered_map>

#include "placerec/pc_core.hpp"

namespace placerec {

void PointCloud::validate() const {
  if (feature_dim == 0 && !features.empty())
    fail(ErrorKind::ContractViolation, "features present but feature_dim is 0");
  if (features.size() != points.size() * feature_dim)
    fail(ErrorKind::ContractViolation, "feature count " + std::to_string(features.size()) + " != " +
                                           std::to_string(points.size()) + " x " + std::to_string(feature_dim));
  for (std::size_t i = 0; i < points.size(); ++i)
    if (!points[i].finite()) fail(ErrorKind::ContractViolation, "non-finite coordinate at point " + std::to_string(i));
}

Aabb bounds(std::span<const Point3> points) {
  if (points.empty()) fail(ErrorKind::EmptyInput, "bounds of empty point set");
  Aabb box{points.front(), points.front()};
  for (const auto& p : points) {
    for (int a = 0; a < 3; ++a) {
      box.min_corner[a] = std::min(box.min_corner[a], p[a]);
      box.max_corner[a] = std::max(box.max_corner[a], p[a]);
    }
  }
  return box;
}

Point3 centroid(std::span<const Point3> points) {
  if (points.empty()) fail(ErrorKind::EmptyInput, "centroid of empty point set");
  Point3 sum;
  for (const auto& p : points) sum = sum + p;
  return sum * (1.0 / static_cast<double>(points.size()));
}

// ---------------------------------------------------------------------------
// Voxel grid

namespace {

struct VoxelKey {
  std::int64_t i, j, k;
  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& key) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(key.i) * 0x9E3779B97F4A7C15ULL;
    h ^= static_cast<std::uint64_t>(key.j) + 0x7F4A7C159E3779B9ULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(key.k) + 0x94D049BB133111EBULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

VoxelAssignment assign_voxels(std::span<const Point3> points, const VoxelGridParams& params) {
  const double cell_size = params.cell_size;
  if (!(cell_size > 0.0)) fail(ErrorKind::ContractViolation, "voxel cell size must be positive");
  if (points.empty()) fail(ErrorKind::EmptyInput, "voxel grid over empty cloud");
  const Point3 origin = params.origin.value_or(bounds(points).min_corner);
  VoxelAssignment out;
  out.voxel_of_point.resize(points.size());
  std::unordered_map<VoxelKey, std::uint32_t, VoxelKeyHash> index;
  index.reserve(points.size());
  for (std::size_t n = 0; n < points.size(); ++n) {
    const Point3 rel = points[n] - origin;
    const VoxelKey key{static_cast<std::int64_t>(std::floor(rel.x / cell_size)),
                       static_cast<std::int64_t>(std::floor(rel.y / cell_size)),
                       static_cast<std::int64_t>(std::floor(rel.z / cell_size))};
    auto [it, inserted] = index.try_emplace(key, static_cast<std::uint32_t>(out.voxel_count));
    if (inserted) ++out.voxel_count;
    out.voxel_of_point[n] = it->second;
  }
  return out;
}

PointCloud voxel_downsample(const PointCloud& cloud, const VoxelGridParams& params) {
  if (cloud.empty()) fail(ErrorKind::EmptyInput, "voxel_downsample on empty cloud");
  const auto assignment = assign_voxels(cloud.points, params);
  const std::size_t m = assignment.voxel_count;
  const std::size_t dim = cloud.feature_dim;

  std::vector<Point3> sums(m);
  std::vector<double> feature_sums(m * dim, 0.0);
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    const auto v = assignment.voxel_of_point[n];
    sums[v] = sums[v] + cloud.points[n];
    ++counts[v];
    for (std::size_t c = 0; c < dim; ++c) feature_sums[v * dim + c] += cloud.features[n * dim + c];
  }

  PointCloud out;
  out.frame = cloud.frame;
  out.feature_dim = dim;
  out.points.resize(m);
  out.features.resize(m * dim);
  for (std::size_t v = 0; v < m; ++v) {
    const double inv = 1.0 / static_cast<double>(counts[v]);
    out.points[v] = sums[v] * inv;
    for (std::size_t c = 0; c < dim; ++c) out.features[v * dim + c] = feature_sums[v * dim + c] * inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// KdTree

KdTree::KdTree(std::span<const Point3> points, std::size_t leaf_size)
    : points_(points), leaf_size_(std::max<std::size_t>(1, leaf_size)) {
  if (points.size() >= std::numeric_limits<std::uint32_t>::max())
    fail(ErrorKind::ContractViolation, "point cloud too large for KdTree");
  order_.resize(points.size());
  for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (!points.empty()) {
    nodes_.reserve(2 * points.size() / leaf_size_ + 1);
    build(0, static_cast<std::uint32_t>(points.size()));
  }
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  Node node;
  node.begin = begin;
  node.end = end;
  node.box = {points_[order_[begin]], points_[order_[begin]]};
  for (auto i = begin; i < end; ++i) {
    const auto& p = points_[order_[i]];
    for (int a = 0; a < 3; ++a) {
      node.box.min_corner[a] = std::min(node.box.min_corner[a], p[a]);
      node.box.max_corner[a] = std::max(node.box.max_corner[a], p[a]);
    }
  }
  if (end - begin > leaf_size_) {
    int axis = 0;
    double widest = -1.0;
    for (int a = 0; a < 3; ++a) {
      const double w = node.box.max_corner[a] - node.box.min_corner[a];
      if (w > widest) {
        widest = w;
        axis = a;
      }
    }
    if (widest > 0.0) {
      const auto mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                       [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
      node.axis = axis;
      node.split = points_[order_[mid]][axis];
      nodes_[id] = node;
      const auto left = build(begin, mid);
      const auto right = build(mid, end);
      nodes_[id].left = left;
      nodes_[id].right = right;
      return id;
    }
  }
  nodes_[id] = node;
  return id;
}

namespace {

double box_distance_sq(const Aabb& box, const Point3& q) {
  double d = 0.0;
  for (int a = 0; a < 3; ++a) {
    double e = 0.0;
    if (q[a] < box.min_corner[a]) e = box.min_corner[a] - q[a];
    else if (q[a] > box.max_corner[a]) e = q[a] - box.max_corner[a];
    d += e * e;
  }
  return d;
}

struct Candidate {
  double d2;
  std::size_t index;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace

std::vector<Neighbor> KdTree::knn(const Point3& query, std::size_t k, std::optional<std::size_t> skip) const {
  const std::size_t available = points_.size() - (skip && *skip < points_.size() ? 1 : 0);
  if (k > available)
    fail(ErrorKind::InsufficientPoints,
         "requested " + std::to_string(k) + " neighbours but only " + std::to_string(available) + " available");
  std::vector<Neighbor> result;
  if (k == 0) return result;

  // Max-heap on (d2, index); the top is the current worst accepted candidate.
  std::priority_queue<Candidate> heap;
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    stack.pop_back();
    if (heap.size() == k && box_distance_sq(node.box, query) > heap.top().d2) continue;
    if (node.left < 0) {
      for (auto i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        if (skip && idx == *skip) continue;
        const Candidate c{squared_distance(points_[idx], query), idx};
        if (heap.size() < k) heap.push(c);
        else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      continue;
    }
    // Visit the nearer child first (pushed last).
    const bool go_left = query[node.axis] < node.split;
    stack.push_back(go_left ? node.right : node.left);
    stack.push_back(go_left ? node.left : node.right);
  }
  result.resize(heap.size());
  for (auto i = result.size(); i-- > 0;) {
    result[i] = {heap.top().index, std::sqrt(heap.top().d2)};
    heap.pop();
  }
  return result;
}

std::vector<std::size_t> KdTree::radius_search(const Point3& query, double radius) const {
  std::vector<std::size_t> out;
  if (points_.empty()) return out;
  const double r2 = radius * radius;
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    stack.pop_back();
    if (box_distance_sq(node.box, query) > r2) continue;
    if (node.left < 0) {
      for (auto i = node.begin; i < node.end; ++i)
        if (squared_distance(points_[order_[i]], query) <= r2) out.push_back(order_[i]);
      continue;
    }
    stack.push_back(node.left);
    stack.push_back(node.right);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Neighbor> knn(const PointCloud& cloud, const Point3& query, std::size_t k) {
  std::optional<std::size_t> self;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.points[i] == query) {
      self = i;
      break;
    }
  }
  const KdTree tree(cloud.points);
  return tree.knn(query, k, self);
}

PointCloud crop_aabb(const PointCloud& cloud, const Aabb& box) {
  for (int a = 0; a < 3; ++a)
    if (box.min_corner[a] > box.max_corner[a]) fail(ErrorKind::ContractViolation, "Aabb min exceeds max");
  PointCloud out;
  out.frame = cloud.frame;
  out.feature_dim = cloud.feature_dim;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!box.contains(cloud.points[i])) continue;
    out.points.push_back(cloud.points[i]);
    if (cloud.feature_dim > 0) {
      const auto f = cloud.feature(i);
      out.features.insert(out.features.end(), f.begin(), f.end());
    }
  }
  return out;
}

}  // namespace placerec

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "placerec/pc_core.hpp"

namespace placerec::grm {

struct Quaternion {
  double x = 0.0, y = 0.0, z = 0.0, w = 1.0;
  double norm() const;
};

struct Pose {
  double timestamp = 0.0;
  Point3 position;
  Quaternion orientation;
};

struct Trajectory {
  std::vector<Pose> poses;

  /// Strictly increasing timestamps and unit quaternions (within 1e-6).
  void validate() const;
  double length() const;
  /// Position at cumulative arc length `s` (clamped to the ends).
  Point3 position_at(double s) const;
};

/// Text format, one pose per line: `timestamp tx ty tz qx qy qz qw`.
/// Lines starting with '#' and blank lines are ignored.
Trajectory load_trajectory(const std::filesystem::path& path);
void save_trajectory(const Trajectory& trajectory, const std::filesystem::path& path);
Trajectory parse_trajectory(const std::string& text, const std::string& origin = "<memory>");

struct FilterParams {
  std::size_t k_neighbors = 20;
  double sigma_multiplier = 2.0;
};

struct DensifyParams {
  std::size_t k_neighbors = 10;
};

/// Densification neighbour counts used for the common VO front ends.
enum class VoSource { Dso, OrbSlam3, VinsMono, Synthetic };
DensifyParams densify_params_for(VoSource source);
std::string_view to_string(VoSource source);

struct SubmapSpec {
  Point3 extent{40.0, 40.0, 15.0};
  double stride = 20.0;
};

struct Segment {
  Point3 anchor_world;
  std::size_t index = 0;  // anchor ordinal along the trajectory
  PointCloud cloud;
};

/// Anchors every `stride` metres of arc length from the first pose; each
/// segment is the world-axis-aligned crop of `cloud` centred on its anchor.
/// Empty crops are dropped.
std::vector<Segment> segment_submaps(const Trajectory& trajectory, const PointCloud& cloud, const SubmapSpec& spec);

/// Anchor positions alone (shared by the database builder).
std::vector<Point3> anchor_positions(const Trajectory& trajectory, double stride);

/// Mean distance from every point to its k nearest neighbours (self excluded).
std::vector<double> mean_neighbor_distances(const PointCloud& cloud, std::size_t k);

/// Drops points with t_i >= T_m + mu * sigma (population sigma); nothing is
/// dropped when sigma == 0.
PointCloud remove_outliers(const PointCloud& cloud, const FilterParams& params);

/// Adds the midpoint between every point and each of its k nearest
/// neighbours; exact-duplicate midpoints are inserted once.
PointCloud densify(const PointCloud& cloud, const DensifyParams& params);

/// Uniform scaling into [0, 1]: subtract the min corner, divide by the
/// largest extent.
PointCloud normalize_scale(const PointCloud& cloud);

struct QueryPointCloud {
  PointCloud cloud;
  Point3 anchor_world;
  VoSource source_vo = VoSource::Synthetic;
  std::size_t segment_index = 0;
};

struct SegmentWarning {
  std::size_t segment_index;
  std::string message;
};

struct QpcResult {
  std::vector<QueryPointCloud> queries;
  std::vector<SegmentWarning> warnings;
};

/// segment -> remove_outliers -> densify -> normalize_scale. Segments that
/// fail a precondition are dropped with a warning; NoValidSegments if none
/// survive.
QpcResult build_qpc(const Trajectory& trajectory, const PointCloud& cloud, const SubmapSpec& spec,
                    const FilterParams& filter, const DensifyParams& densify_params,
                    VoSource source = VoSource::Synthetic);

}  // namespace placerec::grm

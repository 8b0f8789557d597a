#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "placerec/aggregator.hpp"
#include "placerec/pc_core.hpp"

namespace placerec::retrieval {

using agg::GlobalDescriptor;

struct DbEntry {
  std::string id;
  GlobalDescriptor descriptor;
  Point3 centroid_world;  // ground-truth submap position
};

/// Immutable descriptor store. Insertion order is kept and decides ties.
class DescriptorDatabase {
 public:
  /// DuplicateId if two entries share an id, ShapeError on mixed dims.
  static DescriptorDatabase build(std::vector<DbEntry> entries);

  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return entries_.empty() ? 0 : entries_.front().descriptor.size(); }
  const std::vector<DbEntry>& entries() const { return entries_; }
  const DbEntry& operator[](std::size_t i) const { return entries_[i]; }

 private:
  std::vector<DbEntry> entries_;
};

struct Hit {
  std::size_t index = 0;  // insertion position
  std::string id;
  double distance = 0.0;
};

/// Exact k nearest entries by Euclidean distance, ascending, ties by
/// insertion order. BadK unless 1 <= k <= db.size().
std::vector<Hit> query_topk(const DescriptorDatabase& db, const GlobalDescriptor& descriptor, std::size_t k);

/// ceil(0.01 * n), at least 1.
std::size_t one_percent_k(std::size_t n);

struct EvalQuery {
  std::string id;
  GlobalDescriptor descriptor;
  Point3 true_position;
};

struct EvalOptions {
  std::vector<std::size_t> ks;  // empty: {1, 5, one_percent_k(db size)}
  double success_radius = 25.0;
};

struct QueryOutcome {
  std::string id;
  Point3 true_position;
  std::vector<Hit> top;        // max(ks) hits
  std::size_t first_correct;   // 1-based rank of first hit within the radius, 0 if none
};

struct EvalReport {
  std::size_t db_count = 0;
  std::size_t query_count = 0;
  double success_radius = 25.0;
  std::size_t k_one_percent = 1;
  std::vector<std::pair<std::size_t, double>> recall_at;  // ascending K
  std::vector<QueryOutcome> queries;

  /// Recall at K (clamped to the db size); ContractViolation if K was not evaluated.
  double recall(std::size_t k) const;
  double recall_one_percent() const { return recall(k_one_percent); }
};

/// A query is correct at K when one of its top-K entries lies within the
/// success radius of its true position. K values above the db size are
/// clamped.
EvalReport evaluate(const DescriptorDatabase& db, const std::vector<EvalQuery>& queries,
                    const EvalOptions& options = {});

/// Key-value header followed by a per-query table; fixed field order.
std::string to_text(const EvalReport& report);

/// "VDB1" file. Descriptors are stored as f32.
void save_database(const DescriptorDatabase& db, const std::filesystem::path& path);
DescriptorDatabase load_database(const std::filesystem::path& path);

/// Rounds every value to the nearest f32, matching what a saved database holds.
GlobalDescriptor quantize_f32(GlobalDescriptor descriptor);

}  // namespace placerec::retrieval

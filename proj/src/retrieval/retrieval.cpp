#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "placerec/binio.hpp"
#include "placerec/retrieval.hpp"

namespace placerec::retrieval {

DescriptorDatabase DescriptorDatabase::build(std::vector<DbEntry> entries) {
  if (entries.empty()) fail(ErrorKind::EmptyInput, "database needs at least one entry");
  std::unordered_set<std::string> ids;
  const std::size_t dim = entries.front().descriptor.size();
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) fail(ErrorKind::DuplicateId, "duplicate database id '" + e.id + "'");
    if (e.descriptor.size() != dim)
      fail(ErrorKind::ShapeError, "entry '" + e.id + "' has dim " + std::to_string(e.descriptor.size()) +
                                      ", database dim is " + std::to_string(dim));
  }
  DescriptorDatabase db;
  db.entries_ = std::move(entries);
  return db;
}

std::vector<Hit> query_topk(const DescriptorDatabase& db, const GlobalDescriptor& descriptor, std::size_t k) {
  if (k < 1 || k > db.size())
    fail(ErrorKind::BadK, "k = " + std::to_string(k) + " outside [1, " + std::to_string(db.size()) + "]");
  if (descriptor.size() != db.dim())
    fail(ErrorKind::ShapeError, "query dim " + std::to_string(descriptor.size()) + " vs database dim " +
                                    std::to_string(db.dim()));
  std::vector<std::pair<double, std::size_t>> scored(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) scored[i] = {agg::descriptor_distance(db[i].descriptor, descriptor), i};
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end());
  std::vector<Hit> hits;
  hits.reserve(k);
  for (std::size_t r = 0; r < k; ++r) hits.push_back({scored[r].second, db[scored[r].second].id, scored[r].first});
  return hits;
}

std::size_t one_percent_k(std::size_t n) { return std::max<std::size_t>(1, (n + 99) / 100); }

double EvalReport::recall(std::size_t k) const {
  if (db_count > 0) k = std::min(k, db_count);
  for (const auto& [kk, r] : recall_at)
    if (kk == k) return r;
  fail(ErrorKind::ContractViolation, "recall@" + std::to_string(k) + " was not evaluated");
}

EvalReport evaluate(const DescriptorDatabase& db, const std::vector<EvalQuery>& queries, const EvalOptions& options) {
  if (db.size() == 0) fail(ErrorKind::EmptyInput, "evaluation needs a nonempty database");
  if (queries.empty()) fail(ErrorKind::EmptyInput, "evaluation needs at least one query");
  EvalReport report;
  report.db_count = db.size();
  report.query_count = queries.size();
  report.success_radius = options.success_radius;
  report.k_one_percent = one_percent_k(db.size());
  std::vector<std::size_t> ks = options.ks;
  if (ks.empty()) ks = {1, 5, report.k_one_percent};
  for (auto& k : ks) {
    if (k == 0) fail(ErrorKind::BadK, "K must be at least 1");
    k = std::min(k, db.size());
  }
  if (std::find(ks.begin(), ks.end(), report.k_one_percent) == ks.end()) ks.push_back(report.k_one_percent);
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  const std::size_t kmax = ks.back();
  std::vector<std::size_t> correct(ks.size(), 0);
  for (const auto& q : queries) {
    QueryOutcome out{q.id, q.true_position, query_topk(db, q.descriptor, kmax), 0};
    for (std::size_t r = 0; r < out.top.size(); ++r) {
      if (distance(db[out.top[r].index].centroid_world, q.true_position) <= options.success_radius) {
        out.first_correct = r + 1;
        break;
      }
    }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (out.first_correct != 0 && out.first_correct <= ks[i]) ++correct[i];
    report.queries.push_back(std::move(out));
  }
  for (std::size_t i = 0; i < ks.size(); ++i)
    report.recall_at.emplace_back(ks[i], static_cast<double>(correct[i]) / static_cast<double>(queries.size()));
  return report;
}

std::string to_text(const EvalReport& report) {
  std::string s;
  char buf[256];
  auto line = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    s += buf;
  };
  line("db_count = %zu\n", report.db_count);
  line("query_count = %zu\n", report.query_count);
  line("success_radius_m = %.3f\n", report.success_radius);
  line("k_one_percent = %zu\n", report.k_one_percent);
  for (const auto& [k, r] : report.recall_at) line("recall@%zu = %.6f\n", k, r);
  line("recall@1%% = %.6f\n", report.recall_one_percent());
  s += "\n# query\ttrue_x\ttrue_y\ttrue_z\tfirst_correct_rank\ttop_ids\n";
  for (const auto& q : report.queries) {
    line("%s\t%.3f\t%.3f\t%.3f\t%zu\t", q.id.c_str(), q.true_position.x, q.true_position.y, q.true_position.z,
         q.first_correct);
    for (std::size_t r = 0; r < q.top.size(); ++r) {
      if (r) s += ',';
      s += q.top[r].id;
    }
    s += '\n';
  }
  return s;
}

void save_database(const DescriptorDatabase& db, const std::filesystem::path& path) {
  binio::Writer w;
  w.magic("VDB1");
  w.u32(static_cast<std::uint32_t>(db.size()));
  w.u32(static_cast<std::uint32_t>(db.dim()));
  for (const auto& e : db.entries()) {
    w.str16(e.id);
    for (double v : e.descriptor.values) w.f32(static_cast<float>(v));
    for (int a = 0; a < 3; ++a) w.f64(e.centroid_world[a]);
  }
  w.write_file(path);
}

DescriptorDatabase load_database(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic("VDB1");
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  std::vector<DbEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DbEntry e;
    e.id = r.str16();
    e.descriptor.values.resize(dim);
    for (auto& v : e.descriptor.values) v = r.f32();
    for (int a = 0; a < 3; ++a) e.centroid_world[a] = r.f64();
    entries.push_back(std::move(e));
  }
  if (!r.at_end()) r.error("trailing bytes after " + std::to_string(count) + " entries", r.offset());
  return DescriptorDatabase::build(std::move(entries));
}

GlobalDescriptor quantize_f32(GlobalDescriptor descriptor) {
  for (auto& v : descriptor.values) v = static_cast<double>(static_cast<float>(v));
  return descriptor;
}

}  // namespace placerec::retrieval

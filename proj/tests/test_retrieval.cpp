#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "placerec/retrieval.hpp"

using namespace placerec;
using namespace placerec::retrieval;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

DescriptorDatabase random_db(std::size_t n, std::size_t dim, std::mt19937_64& rng,
                             std::vector<std::vector<double>>* raw = nullptr) {
  std::uniform_real_distribution<double> u(0, 500);
  std::vector<DbEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    auto v = random_vec(dim, rng);
    if (raw) raw->push_back(v);
    entries.push_back({"e" + std::to_string(i), {v}, {u(rng), u(rng), 0}});
  }
  return DescriptorDatabase::build(std::move(entries));
}

}  // namespace

TEST(Database, BuildAndDuplicateIds) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(random_db(1, 4, rng).size(), 1u);
  const auto db = random_db(1000, 8, rng);
  EXPECT_EQ(db.size(), 1000u);
  for (std::size_t i = 0; i < db.size(); ++i) EXPECT_EQ(db[i].id, "e" + std::to_string(i));
  try {
    DescriptorDatabase::build({{"x", {{1, 2}}, {}}, {"x", {{3, 4}}, {}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DuplicateId);
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(DescriptorDatabase::build({{"a", {{1, 2}}, {}}, {"b", {{3}}, {}}}), Error);
}

TEST(QueryTopk, StoredDescriptorIsRankOne) {
  std::mt19937_64 rng(2);
  const auto db = random_db(50, 6, rng);
  for (std::size_t i = 0; i < 50; i += 7) {
    const auto hits = query_topk(db, db[i].descriptor, 3);
    EXPECT_EQ(hits[0].id, db[i].id);
    EXPECT_EQ(hits[0].distance, 0.0);
  }
}

TEST(QueryTopk, FullRankingIsPermutation) {
  std::mt19937_64 rng(3);
  const auto db = random_db(40, 5, rng);
  const auto hits = query_topk(db, {random_vec(5, rng)}, 40);
  std::set<std::string> ids;
  for (const auto& h : hits) ids.insert(h.id);
  EXPECT_EQ(ids.size(), 40u);
  EXPECT_THROW(query_topk(db, {random_vec(5, rng)}, 41), Error);
  EXPECT_THROW(query_topk(db, {random_vec(5, rng)}, 0), Error);
}

TEST(QueryTopk, MatchesFullSortOracle) {
  std::mt19937_64 rng(4);
  std::vector<std::vector<double>> raw;
  const auto db = random_db(500, 16, rng, &raw);
  for (int q = 0; q < 50; ++q) {
    const auto v = random_vec(16, rng);
    const auto want = oracle::ranking(raw, v);
    const auto got = query_topk(db, {v}, 25);
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].index, want[i].first);
      EXPECT_NEAR(got[i].distance, want[i].second, 1e-9);
    }
  }
}

TEST(QueryTopk, TiesKeepInsertionOrder) {
  std::vector<DbEntry> entries;
  for (int i = 0; i < 10; ++i) entries.push_back({"t" + std::to_string(i), {{1.0, 0.0}}, {}});
  const auto db = DescriptorDatabase::build(std::move(entries));
  const auto hits = query_topk(db, {{0.0, 0.0}}, 10);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(hits[i].index, i);
}

TEST(OnePercent, CeilingRule) {
  EXPECT_EQ(one_percent_k(120), 2u);
  EXPECT_EQ(one_percent_k(100), 1u);
  EXPECT_EQ(one_percent_k(1), 1u);
  EXPECT_EQ(one_percent_k(101), 2u);
}

TEST(Evaluate, SuccessRadiusExamples) {
  const auto db = DescriptorDatabase::build({{"near", {{0.0}}, {10, 0, 0}}});
  const auto r = evaluate(db, {{"q", {{0.0}}, {0, 0, 0}}});
  EXPECT_EQ(r.recall(1), 1.0);

  const auto db2 = DescriptorDatabase::build({{"far", {{0.0}}, {30, 0, 0}}, {"near", {{1.0}}, {10, 0, 0}}});
  const auto r2 = evaluate(db2, {{"q", {{0.0}}, {0, 0, 0}}});
  EXPECT_EQ(r2.recall(1), 0.0);
  EXPECT_EQ(r2.recall(5), 1.0);  // clamped to the db size
  EXPECT_EQ(r2.queries[0].first_correct, 2u);
}

TEST(Evaluate, RecountOracleAndMonotone) {
  std::mt19937_64 rng(5);
  std::vector<std::vector<double>> raw;
  const auto db = random_db(200, 4, rng, &raw);
  std::uniform_real_distribution<double> u(0, 500);
  std::vector<EvalQuery> queries;
  for (int i = 0; i < 150; ++i) queries.push_back({"q" + std::to_string(i), {random_vec(4, rng)}, {u(rng), u(rng), 0}});
  const auto report = evaluate(db, queries, {{1, 5, 10, 25}, 25.0});
  for (std::size_t k : {1u, 5u, 10u, 25u}) {
    std::size_t hits = 0;
    for (const auto& q : queries) {
      const auto rank = oracle::ranking(raw, q.descriptor.values);
      bool ok = false;
      for (std::size_t i = 0; i < k; ++i) ok = ok || distance(db[rank[i].first].centroid_world, q.true_position) <= 25.0;
      hits += ok;
    }
    EXPECT_DOUBLE_EQ(report.recall(k), static_cast<double>(hits) / 150.0);
  }
  for (std::size_t i = 1; i < report.recall_at.size(); ++i)
    EXPECT_LE(report.recall_at[i - 1].second, report.recall_at[i].second);
  EXPECT_EQ(report.k_one_percent, 2u);
  EXPECT_THROW(report.recall(3), Error);
  EXPECT_EQ(to_text(report), to_text(evaluate(db, queries, {{1, 5, 10, 25}, 25.0})));
}

TEST(DatabaseFile, RoundTripAndQuantisation) {
  std::mt19937_64 rng(6);
  const auto db = random_db(30, 12, rng);
  const auto path = std::filesystem::temp_directory_path() / "placerec_test.vdb";
  save_database(db, path);
  const auto back = load_database(path);
  ASSERT_EQ(back.size(), db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    EXPECT_EQ(back[i].id, db[i].id);
    EXPECT_EQ(back[i].centroid_world, db[i].centroid_world);
    EXPECT_EQ(back[i].descriptor.values, quantize_f32(db[i].descriptor).values);
    EXPECT_EQ(query_topk(back, quantize_f32(db[i].descriptor), 1)[0].distance, 0.0);
  }
}

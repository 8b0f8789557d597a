#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "oracles.hpp"
#include "placerec/training.hpp"

using namespace placerec;
using namespace placerec::train;

namespace {

GlobalDescriptor d(std::vector<double> v) { return GlobalDescriptor{std::move(v)}; }

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

std::vector<GlobalDescriptor> wrap(const std::vector<std::vector<double>>& v) {
  std::vector<GlobalDescriptor> out;
  for (const auto& x : v) out.push_back(d(x));
  return out;
}

agg::AggregatorConfig tiny() {
  agg::AggregatorConfig c;
  c.feature_dim = 8;
  c.latent_count = 2;
  c.descriptor_dim = 8;
  c.blocks = 1;
  c.self_layers_per_block = 1;
  c.heads = 2;
  c.tnet_code_dim = 4;
  return c;
}

// Places 100 m apart on a line; each place has its own random shape.
TrainingData toy_data(std::size_t places, std::size_t queries_per_place, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  TrainingData data;
  std::vector<nn::Tensor> shapes;
  for (std::size_t p = 0; p < places; ++p) {
    nn::Tensor t(40, agg::kInputChannels);
    const double sx = 0.2 + u(rng), sy = 0.2 + u(rng), sz = 0.2 + u(rng);
    for (std::size_t r = 0; r < 40; ++r) {
      t.at(r, 0) = u(rng) * sx;
      t.at(r, 1) = u(rng) * sy;
      t.at(r, 2) = u(rng) * sz;
    }
    shapes.push_back(t);
    data.database.push_back({"db" + std::to_string(p), {100.0 * static_cast<double>(p), 0, 0}, t});
    data.train_database.push_back(p);
  }
  for (std::size_t p = 0; p < places; ++p)
    for (std::size_t q = 0; q < queries_per_place; ++q) {
      nn::Tensor t = shapes[p];
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < 3; ++c) t.at(r, c) += noise(rng);
      data.queries.push_back({"q" + std::to_string(p) + "_" + std::to_string(q),
                              {100.0 * static_cast<double>(p) + 5.0, 0, 0}, t});
    }
  return data;
}

}  // namespace

TEST(LazyQuadruplet, HandExample) {
  const std::vector<GlobalDescriptor> pos{d({0.6, 0})}, neg{d({0.8, 0}), d({0.8, 0.1})};
  EXPECT_NEAR(lazy_quadruplet(d({0, 0}), pos, neg, {0.5, 0.2}), 1.0, 1e-9);
}

TEST(LazyQuadruplet, SatisfiedMarginsGiveZero) {
  // d_pos = 0.1, nearest negative 0.9, negative pair 0.9 apart.
  const std::vector<GlobalDescriptor> pos{d({0.1, 0})};
  const std::vector<GlobalDescriptor> neg{d({0.9, 0}), d({0.9, 0.9})};
  EXPECT_EQ(lazy_quadruplet(d({0, 0}), pos, neg, {0.5, 0.2}), 0.0);
}

TEST(LazyQuadruplet, MatchesExhaustiveMining) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t dim = 2 + trial % 7, np = 1 + trial % 5, nn = 2 + trial % 11;
    const auto a = random_vec(dim, rng);
    std::vector<std::vector<double>> pos, neg;
    for (std::size_t i = 0; i < np; ++i) pos.push_back(random_vec(dim, rng));
    for (std::size_t i = 0; i < nn; ++i) neg.push_back(random_vec(dim, rng));
    const double alpha = 0.1 + 0.01 * (trial % 50), beta = 0.05 + 0.02 * (trial % 20);
    EXPECT_NEAR(lazy_quadruplet(d(a), wrap(pos), wrap(neg), {alpha, beta}), oracle::quadruplet(a, pos, neg, alpha, beta),
                1e-9);
  }
}

TEST(LazyQuadruplet, NonNegativeAndOrderInvariant) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto pos = wrap({random_vec(4, rng), random_vec(4, rng), random_vec(4, rng)});
    auto neg = wrap({random_vec(4, rng), random_vec(4, rng), random_vec(4, rng), random_vec(4, rng)});
    const auto a = d(random_vec(4, rng));
    const double l = lazy_quadruplet(a, pos, neg, {});
    EXPECT_GE(l, 0.0);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    EXPECT_NEAR(lazy_quadruplet(a, pos, neg, {}), l, 1e-12);
  }
}

TEST(LazyQuadruplet, TiesGoToLowestIndex) {
  const std::vector<GlobalDescriptor> pos{d({1, 0}), d({0, 1})};
  const std::vector<GlobalDescriptor> neg{d({2, 0}), d({0, 2}), d({-2, 0})};
  const auto m = mine(d({0, 0}), pos, neg);
  EXPECT_EQ(m.hardest_positive, 0u);
  EXPECT_EQ(m.hardest_negative, 0u);
  EXPECT_EQ(m.second_negative, 1u);
}

TEST(LazyQuadruplet, NeedsTwoNegatives) {
  try {
    lazy_quadruplet(d({0}), std::vector<GlobalDescriptor>{d({1})}, std::vector<GlobalDescriptor>{d({2})}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientNegatives);
  }
}

TEST(LazyQuadruplet, GraphVersionAgreesWithValueVersion) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_vec(5, rng);
    std::vector<std::vector<double>> pos{random_vec(5, rng), random_vec(5, rng)}, neg;
    for (int i = 0; i < 6; ++i) neg.push_back(random_vec(5, rng));
    nn::Graph g(false);
    auto row = [&](const std::vector<double>& v) { return g.constant(nn::Tensor::from(1, v.size(), v)); };
    std::vector<nn::Var> pv, nv;
    for (const auto& p : pos) pv.push_back(row(p));
    for (const auto& n : neg) nv.push_back(row(n));
    const double got = g.value(lazy_quadruplet(g, row(a), pv, nv, {})).data[0];
    EXPECT_NEAR(got, oracle::quadruplet(a, pos, neg, 0.5, 0.2), 1e-12);
  }
}

TEST(CombinedLoss, ComposesTwoTerms) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    QuadrupletBatch b;
    b.anchor = d(random_vec(6, rng));
    for (int i = 0; i < 2; ++i) b.positives.push_back(d(random_vec(6, rng)));
    for (int i = 0; i < 5; ++i) b.negatives.push_back(d(random_vec(6, rng)));
    for (int i = 0; i < 3; ++i) b.v_positives.push_back(d(random_vec(6, rng)));
    for (int i = 0; i < 4; ++i) b.v_negatives.push_back(d(random_vec(6, rng)));
    const LossParams p{0.3, 0.1};
    const double l_vl = lazy_quadruplet(b.anchor, b.positives, b.negatives, p);
    const double l_vv = lazy_quadruplet(b.anchor, b.v_positives, b.v_negatives, p);
    EXPECT_NEAR(combined_loss(b, p), l_vl + l_vv, 1e-9);
    EXPECT_NEAR(combined_loss(b, p, TrainMode::Pretrain), l_vl, 1e-12);
    auto mirrored = b;
    mirrored.v_positives = b.positives;
    mirrored.v_negatives = b.negatives;
    EXPECT_NEAR(combined_loss(mirrored, p), 2.0 * l_vl, 1e-12);
  }
}

TEST(SampleBatch, ThreePlacesFarApart) {
  const std::vector<Point3> db{{0, 0, 0}, {100, 0, 0}, {200, 0, 0}};
  std::mt19937_64 rng(5);
  for (std::size_t a = 0; a < 3; ++a) {
    SampleRequest req{db[a] + Point3{3, 0, 0}, "q", db, {}, std::nullopt, {}, {}};
    const auto r = sample_batch(req, {}, {}, rng);
    const auto& b = std::get<BatchIndices>(r);
    EXPECT_EQ(b.positives, std::vector<std::size_t>{a});
    EXPECT_EQ(b.negatives.size(), 2u);
  }
}

TEST(SampleBatch, DeadZoneNeverUsed) {
  const std::vector<Point3> db{{0, 0, 0}, {30, 0, 0}, {100, 0, 0}, {150, 0, 0}};
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    SampleRequest req{{0, 0, 0}, "a", db, {}, std::nullopt, {}, {}};
    const auto r = sample_batch(req, {}, {}, rng);
    const auto& b = std::get<BatchIndices>(r);
    for (auto p : b.positives) EXPECT_NE(p, 1u);
    for (auto n : b.negatives) EXPECT_NE(n, 1u);
  }
}

TEST(SampleBatch, SkipsWhenNothingQualifies) {
  const std::vector<Point3> db{{0, 0, 0}, {100, 0, 0}};
  std::mt19937_64 rng(7);
  SampleRequest req{{0, 0, 0}, "lonely", db, {}, std::nullopt, {}, {}};
  const auto r = sample_batch(req, {}, {}, rng);
  ASSERT_TRUE(std::holds_alternative<SkippedAnchor>(r));
  EXPECT_EQ(std::get<SkippedAnchor>(r).anchor_id, "lonely");
}

TEST(SampleBatch, AuditTenThousandBatches) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 400);
  std::vector<Point3> db, q;
  for (int i = 0; i < 120; ++i) db.push_back({u(rng), u(rng), 0});
  for (int i = 0; i < 150; ++i) q.push_back({u(rng), u(rng), 0});
  std::vector<std::size_t> preferred(db.size());
  std::iota(preferred.begin(), preferred.end(), 0);
  std::size_t audited = 0, violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t a = static_cast<std::size_t>(trial) % q.size();
    SampleRequest req{q[a], "q", db, q, a, preferred, preferred};
    const auto r = sample_batch(req, {2, 8, 4}, {}, rng);
    if (!std::holds_alternative<BatchIndices>(r)) continue;
    const auto& b = std::get<BatchIndices>(r);
    ++audited;
    for (auto i : b.positives) violations += distance(db[i], q[a]) >= 20.0;
    for (auto i : b.negatives) violations += distance(db[i], q[a]) < 50.0;
    for (auto i : b.v_positives) violations += distance(q[i], q[a]) >= 20.0 || i == a;
    for (auto i : b.v_negatives) violations += distance(q[i], q[a]) < 50.0;
    std::set<std::size_t> uniq(b.negatives.begin(), b.negatives.end());
    violations += uniq.size() != b.negatives.size();
  }
  EXPECT_GT(audited, 1000u);
  EXPECT_EQ(violations, 0u);
}

TEST(SampleBatch, PreferredNegativesComeFirst) {
  std::vector<Point3> db{{0, 0, 0}};
  for (int i = 1; i <= 20; ++i) db.push_back({100.0 * i, 0, 0});
  const std::vector<std::size_t> preferred{0, 17, 3, 12, 9};
  std::mt19937_64 rng(9);
  SampleRequest req{{0, 0, 0}, "a", db, {}, std::nullopt, preferred, {}};
  const auto r = sample_batch(req, {1, 6, 3}, {}, rng);
  const auto& b = std::get<BatchIndices>(r);
  ASSERT_EQ(b.negatives.size(), 6u);
  // Index 0 is the anchor's own place, so the first three eligible picks are 17, 3, 12.
  EXPECT_EQ(std::vector<std::size_t>(b.negatives.begin(), b.negatives.begin() + 3), (std::vector<std::size_t>{17, 3, 12}));
}

TEST(Training, ZeroEpochsKeepInitialisation) {
  std::mt19937_64 rng(10);
  const auto data = toy_data(4, 1, rng);
  agg::AggregatorModel model(tiny());
  const auto before = model.params().get("head.fc2.W").value.data;
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto report = run_training(model, data, cfg);
  EXPECT_TRUE(report.epochs.empty());
  EXPECT_EQ(model.params().get("head.fc2.W").value.data, before);
}

TEST(Training, FinetuneHeadStepIsTenTimesLarger) {
  agg::AggregatorModel model(tiny());
  apply_lr_schedule(model.params(), TrainMode::Finetune, 10.0);
  auto& params = model.params();
  std::map<std::string, std::vector<double>> before;
  for (auto& [name, p] : params.items()) {
    before[name] = std::vector<double>(p.value.data.begin(), p.value.data.end());
    for (auto& g : p.grad.data) g = 0.25;
  }
  params.adam_step({});
  for (auto& [name, p] : params.items()) {
    const double step = before[name][0] - p.value.data[0];
    const double want = name.rfind("head.", 0) == 0 ? 1e-2 : 1e-3;
    EXPECT_NEAR(step, want, 1e-9) << name;
  }
  apply_lr_schedule(params, TrainMode::Pretrain, 10.0);
  for (auto& [name, p] : params.items()) EXPECT_EQ(p.lr_multiplier, 1.0);
}

TEST(Training, LossFallsOnToyPlaces) {
  std::mt19937_64 rng(11);
  auto data = toy_data(12, 2, rng);
  agg::AggregatorModel model(tiny());
  TrainConfig cfg;
  cfg.mode = TrainMode::Finetune;
  cfg.epochs = 10;
  cfg.base_lr = 3e-3;
  cfg.anchors_per_step = 2;
  cfg.shape = {1, 4, 0};
  cfg.hard_negatives = 2;
  std::vector<std::string> lines;
  const auto report = run_training(model, data, cfg, [&](const EpochMetrics& m) { lines.push_back(metrics_line(m)); });
  ASSERT_EQ(report.epochs.size(), 10u);
  ASSERT_EQ(lines.size(), 10u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += report.epochs[i].mean_loss;
    last += report.epochs[5 + i].mean_loss;
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(lines.front().substr(0, 11), "1\tfinetune\t");
}

TEST(Training, DeterministicUnderSeed) {
  std::mt19937_64 rng_a(12), rng_b(12);
  const auto da = toy_data(6, 1, rng_a), db = toy_data(6, 1, rng_b);
  agg::AggregatorModel ma(tiny()), mb(tiny());
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.shape = {1, 3, 0};
  run_training(ma, da, cfg);
  run_training(mb, db, cfg);
  EXPECT_EQ(ma.params().get("latents").value.data, mb.params().get("latents").value.data);
}

TEST(Modes, StringRoundTrip) {
  EXPECT_EQ(mode_from_string("pretrain"), TrainMode::Pretrain);
  EXPECT_EQ(mode_from_string(std::string(to_string(TrainMode::Finetune))), TrainMode::Finetune);
  EXPECT_THROW(mode_from_string("scratch"), Error);
}

TEST(Augment, SubsetJitterAndFeatureDrop) {
  nn::Tensor in(400, 6);
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t c = 0; c < 6; ++c) in.at(r, c) = static_cast<double>(r) + 0.1 * static_cast<double>(c);
  std::mt19937_64 rng(3);
  int dropped = 0;
  for (int t = 0; t < 200; ++t) {
    const auto out = augment(in, {0.7, 0.0, 0.5}, rng);
    ASSERT_EQ(out.cols(), 6u);
    ASSERT_GE(out.rows(), 240u);  // keep fraction >= 0.7 minus sampling slack
    std::size_t prev = 0;
    for (std::size_t r = 0; r < out.rows(); ++r) {
      const auto src = static_cast<std::size_t>(out.at(r, 0));
      if (r > 0) ASSERT_GT(src, prev);  // order kept, no repeats
      prev = src;
      for (std::size_t c = 1; c < 3; ++c) ASSERT_NEAR(out.at(r, c), in.at(src, c), 1e-12);
    }
    const bool zero = out.at(0, 3) == 0.0 && out.at(0, 4) == 0.0 && out.at(0, 5) == 0.0;
    dropped += zero;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 3; c < 6; ++c) ASSERT_EQ(out.at(r, c), zero ? 0.0 : in.at(static_cast<std::size_t>(out.at(r, 0)), c));
  }
  EXPECT_GT(dropped, 70);
  EXPECT_LT(dropped, 130);

  const auto kept = augment(in, {1.0, 0.01, 0.0}, rng);
  ASSERT_EQ(kept.rows(), 400u);
  double var = 0;
  for (std::size_t r = 0; r < 400; ++r) var += std::pow(kept.at(r, 1) - in.at(r, 1), 2);
  EXPECT_NEAR(std::sqrt(var / 400), 0.01, 0.002);
  EXPECT_EQ(kept.at(7, 4), in.at(7, 4));
}

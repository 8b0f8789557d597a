#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "placerec/training.hpp"

namespace placerec::train {

void LossParams::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha) || !(beta > 0.0) || !std::isfinite(beta))
    fail(ErrorKind::ConfigError, "loss margins must be finite and positive");
}

Mining mine(const GlobalDescriptor& anchor, std::span<const GlobalDescriptor> positives,
            std::span<const GlobalDescriptor> negatives) {
  if (positives.empty()) fail(ErrorKind::ContractViolation, "lazy quadruplet needs at least one positive");
  if (negatives.size() < 2)
    fail(ErrorKind::InsufficientNegatives, "lazy quadruplet needs at least 2 negatives, got " +
                                               std::to_string(negatives.size()));
  Mining m;
  double best = -1.0;
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const double d = agg::descriptor_distance(anchor, positives[i]);
    if (d > best) best = d, m.hardest_positive = i;
  }
  best = INFINITY;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    const double d = agg::descriptor_distance(anchor, negatives[i]);
    if (d < best) best = d, m.hardest_negative = i;
  }
  best = INFINITY;
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    if (i == m.hardest_negative) continue;
    const double d = agg::descriptor_distance(negatives[m.hardest_negative], negatives[i]);
    if (d < best) best = d, m.second_negative = i;
  }
  return m;
}

double lazy_quadruplet(const GlobalDescriptor& anchor, std::span<const GlobalDescriptor> positives,
                       std::span<const GlobalDescriptor> negatives, const LossParams& params) {
  params.validate();
  const Mining m = mine(anchor, positives, negatives);
  const double d_pos = agg::descriptor_distance(anchor, positives[m.hardest_positive]);
  const double d_neg = agg::descriptor_distance(anchor, negatives[m.hardest_negative]);
  const double d_nn = agg::descriptor_distance(negatives[m.hardest_negative], negatives[m.second_negative]);
  return std::max(d_pos - d_neg + params.alpha, 0.0) + std::max(d_pos - d_nn + params.beta, 0.0);
}

namespace {

GlobalDescriptor row_descriptor(const nn::Graph& g, nn::Var v) {
  const auto& t = g.value(v);
  return GlobalDescriptor{std::vector<double>(t.data.begin(), t.data.end())};
}

nn::Var hinge(nn::Graph& g, nn::Var x, double margin) {
  return g.relu(g.add(x, g.constant(nn::Tensor(1, 1, margin))));
}

}  // namespace

nn::Var lazy_quadruplet(nn::Graph& g, nn::Var anchor, const std::vector<nn::Var>& positives,
                        const std::vector<nn::Var>& negatives, const LossParams& params) {
  params.validate();
  std::vector<GlobalDescriptor> pos, neg;
  for (auto v : positives) pos.push_back(row_descriptor(g, v));
  for (auto v : negatives) neg.push_back(row_descriptor(g, v));
  const Mining m = mine(row_descriptor(g, anchor), pos, neg);
  const nn::Var d_pos = g.distance(anchor, positives[m.hardest_positive]);
  const nn::Var d_neg = g.distance(anchor, negatives[m.hardest_negative]);
  const nn::Var d_nn = g.distance(negatives[m.hardest_negative], negatives[m.second_negative]);
  return g.add(hinge(g, g.sub(d_pos, d_neg), params.alpha), hinge(g, g.sub(d_pos, d_nn), params.beta));
}

std::string_view to_string(TrainMode mode) { return mode == TrainMode::Pretrain ? "pretrain" : "finetune"; }

TrainMode mode_from_string(const std::string& s) {
  if (s == "pretrain") return TrainMode::Pretrain;
  if (s == "finetune") return TrainMode::Finetune;
  fail(ErrorKind::ConfigError, "unknown training mode '" + s + "' (expected pretrain or finetune)");
}

double combined_loss(const QuadrupletBatch& batch, const LossParams& params, TrainMode mode) {
  const double vtol = lazy_quadruplet(batch.anchor, batch.positives, batch.negatives, params);
  if (mode == TrainMode::Pretrain) return vtol;
  return vtol + lazy_quadruplet(batch.anchor, batch.v_positives, batch.v_negatives, params);
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t count, std::mt19937_64& rng) {
  count = std::min(count, pool.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

struct Side {
  std::vector<std::size_t> positives, negatives;
};

Side classify(const Point3& anchor, std::span<const Point3> positions, std::optional<std::size_t> exclude,
              const DistanceRules& rules) {
  Side s;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (exclude && *exclude == i) continue;
    const double d = distance(anchor, positions[i]);
    if (d < rules.positive_below)
      s.positives.push_back(i);
    else if (d >= rules.negative_from)
      s.negatives.push_back(i);
  }
  return s;
}

std::vector<std::size_t> pick_negatives(const std::vector<std::size_t>& eligible,
                                        std::span<const std::size_t> preferred, std::size_t hard,
                                        std::size_t total, std::mt19937_64& rng) {
  std::vector<char> is_eligible;
  for (auto i : eligible) {
    if (i >= is_eligible.size()) is_eligible.resize(i + 1, 0);
    is_eligible[i] = 1;
  }
  std::vector<std::size_t> out;
  for (auto i : preferred) {
    if (out.size() >= std::min(hard, total)) break;
    if (i < is_eligible.size() && is_eligible[i]) {
      out.push_back(i);
      is_eligible[i] = 0;
    }
  }
  std::vector<std::size_t> rest;
  for (auto i : eligible)
    if (is_eligible[i]) rest.push_back(i);
  for (auto i : draw(std::move(rest), total - out.size(), rng)) out.push_back(i);
  return out;
}

}  // namespace

std::variant<BatchIndices, SkippedAnchor> sample_batch(const SampleRequest& req, const BatchShape& shape,
                                                       const DistanceRules& rules, std::mt19937_64& rng) {
  if (shape.positives == 0 || shape.negatives < 2)
    fail(ErrorKind::ConfigError, "batch shape needs >= 1 positive and >= 2 negatives");
  const Side db = classify(req.anchor_position, req.db_positions, std::nullopt, rules);
  if (db.positives.empty()) return SkippedAnchor{req.anchor_id, "no database submap within the positive radius"};
  if (db.negatives.size() < 2) return SkippedAnchor{req.anchor_id, "fewer than 2 database negatives"};
  BatchIndices out;
  out.positives = draw(db.positives, shape.positives, rng);
  out.negatives = pick_negatives(db.negatives, req.preferred_negatives, shape.hard_negatives, shape.negatives, rng);
  if (!req.query_positions.empty()) {
    const Side q = classify(req.anchor_position, req.query_positions, req.exclude_query, rules);
    if (q.positives.empty()) return SkippedAnchor{req.anchor_id, "no other query within the positive radius"};
    if (q.negatives.size() < 2) return SkippedAnchor{req.anchor_id, "fewer than 2 query negatives"};
    out.v_positives = draw(q.positives, shape.positives, rng);
    out.v_negatives =
        pick_negatives(q.negatives, req.preferred_v_negatives, shape.hard_negatives, shape.negatives, rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

std::string metrics_header() { return "# epoch\tmode\tmean_loss\tval_recall@1\twall_seconds\n"; }

std::string metrics_line(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6f\t%.4f\t%.2f\n", m.epoch, std::string(to_string(m.mode)).c_str(),
                m.mean_loss, m.val_recall_at_1, m.wall_seconds);
  return buf;
}

void apply_lr_schedule(nn::ParamStore& params, TrainMode mode, double head_multiplier) {
  params.set_lr_multiplier("", 1.0);
  if (mode == TrainMode::Finetune) params.set_lr_multiplier(std::string(agg::kHeadPrefix), head_multiplier);
}

std::vector<GlobalDescriptor> describe(const agg::AggregatorModel& model, std::span<const Sample> samples) {
  std::vector<GlobalDescriptor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(agg::aggregate(model, s.input));
  return out;
}

double recall_at_1(const agg::AggregatorModel& model, std::span<const Sample> database,
                   std::span<const Sample> queries) {
  if (queries.empty()) return 0.0;
  const auto db_desc = describe(model, database);
  std::vector<retrieval::DbEntry> entries;
  for (std::size_t i = 0; i < database.size(); ++i)
    entries.push_back({database[i].id, db_desc[i], database[i].position});
  const auto db = retrieval::DescriptorDatabase::build(std::move(entries));
  std::vector<retrieval::EvalQuery> evq;
  for (const auto& q : queries) evq.push_back({q.id, agg::aggregate(model, q.input), q.position});
  return retrieval::evaluate(db, evq, {{1}, 25.0}).recall(1);
}

nn::Tensor augment(const nn::Tensor& input, const AugmentParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, p.jitter);
  const double keep = p.keep_min + (1.0 - p.keep_min) * unit(rng);
  const bool drop_features = unit(rng) < p.feature_drop;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < input.rows(); ++i)
    if (unit(rng) < keep) rows.push_back(i);
  if (rows.empty()) rows.push_back(0);
  nn::Tensor out(rows.size(), input.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < (drop_features ? 3 : input.cols()); ++c) out.at(r, c) = input.at(rows[r], c);
    if (p.jitter > 0.0)
      for (std::size_t c = 0; c < 3; ++c) out.at(r, c) += noise(rng);
  }
  return out;
}

namespace {

std::vector<std::size_t> nearest_order(const GlobalDescriptor& anchor, const std::vector<GlobalDescriptor>& cache) {
  std::vector<std::pair<double, std::size_t>> d(cache.size());
  for (std::size_t i = 0; i < cache.size(); ++i) d[i] = {agg::descriptor_distance(anchor, cache[i]), i};
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) order[i] = d[i].second;
  return order;
}

struct Selected {
  nn::Var anchor;
  std::vector<nn::Var> positives, negatives;
};

}  // namespace

TrainReport run_training(agg::AggregatorModel& model, const TrainingData& data, const TrainConfig& config,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.loss.validate();
  if (config.anchors_per_step == 0) fail(ErrorKind::ConfigError, "anchors_per_step must be positive");
  const bool finetune = config.mode == TrainMode::Finetune;
  const bool query_side = finetune && config.query_side_loss;
  if (data.database.empty()) fail(ErrorKind::EmptyInput, "training needs database samples");
  if (finetune && data.queries.empty()) fail(ErrorKind::EmptyInput, "finetuning needs query samples");

  TrainReport report;
  if (config.epochs == 0) return report;
  apply_lr_schedule(model.params(), config.mode, config.head_lr_multiplier);
  nn::AdamConfig adam;
  adam.learning_rate = config.base_lr;
  BatchShape shape = config.shape;
  shape.hard_negatives = std::min(config.hard_negatives, shape.negatives);

  // Candidate pools: database samples eligible for batches.
  std::vector<std::size_t> db_pool = data.train_database;
  if (db_pool.empty()) {
    db_pool.resize(data.database.size());
    std::iota(db_pool.begin(), db_pool.end(), std::size_t{0});
  }
  std::vector<Point3> db_positions, q_positions;
  for (auto i : db_pool) db_positions.push_back(data.database[i].position);
  for (const auto& q : data.queries) q_positions.push_back(q.position);

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order = finetune ? std::vector<std::size_t>(data.queries.size()) : db_pool;
  if (finetune) std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    // Descriptor caches steer the hard-negative picks; mining itself uses fresh descriptors.
    std::vector<GlobalDescriptor> db_cache, q_cache;
    for (auto i : db_pool) db_cache.push_back(agg::aggregate(model, data.database[i].input));
    if (query_side) q_cache = describe(model, data.queries);

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.mode = config.mode;
    double loss_sum = 0.0;
    std::size_t in_step = 0;
    model.params().zero_grad();

    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::size_t a = order[pos];
      const Sample& anchor_sample = finetune ? data.queries[a] : data.database[a];
      const nn::Tensor anchor_input =
          finetune ? anchor_sample.input : augment(anchor_sample.input, config.augment, rng);

      const GlobalDescriptor anchor_now = agg::aggregate(model, anchor_input);
      const auto preferred = nearest_order(anchor_now, db_cache);
      const auto preferred_v = query_side ? nearest_order(anchor_now, q_cache) : std::vector<std::size_t>{};
      SampleRequest req{anchor_sample.position, anchor_sample.id, db_positions,
                        query_side ? std::span<const Point3>(q_positions) : std::span<const Point3>{},
                        finetune ? std::optional<std::size_t>(a) : std::nullopt, preferred, preferred_v};
      auto sampled = sample_batch(req, shape, config.rules, rng);
      if (auto* skip = std::get_if<SkippedAnchor>(&sampled)) {
        report.skipped.push_back(*skip);
        ++metrics.skipped;
        continue;
      }
      const auto& batch = std::get<BatchIndices>(sampled);

      // Mine on current inference descriptors, then record only the chosen rows.
      auto fresh = [&](const std::vector<std::size_t>& idx, bool db_side) {
        std::vector<GlobalDescriptor> out;
        for (auto i : idx) out.push_back(agg::aggregate(model, db_side ? data.database[db_pool[i]].input
                                                                       : data.queries[i].input));
        return out;
      };
      const auto pos_d = fresh(batch.positives, true);
      const auto neg_d = fresh(batch.negatives, true);
      const Mining m = mine(anchor_now, pos_d, neg_d);

      nn::Graph g;
      auto row = [&](const nn::Tensor& input) {
        return agg::forward(g, model, &model.params(), g.constant(input));
      };
      const nn::Var anchor_var = row(anchor_input);
      const nn::Var hp = row(data.database[db_pool[batch.positives[m.hardest_positive]]].input);
      const nn::Var hn = row(data.database[db_pool[batch.negatives[m.hardest_negative]]].input);
      const nn::Var sn = row(data.database[db_pool[batch.negatives[m.second_negative]]].input);
      nn::Var loss = lazy_quadruplet(g, anchor_var, {hp}, {hn, sn}, config.loss);
      if (query_side) {
        const auto vpos_d = fresh(batch.v_positives, false);
        const auto vneg_d = fresh(batch.v_negatives, false);
        const Mining vm = mine(anchor_now, vpos_d, vneg_d);
        const nn::Var vhp = row(data.queries[batch.v_positives[vm.hardest_positive]].input);
        const nn::Var vhn = row(data.queries[batch.v_negatives[vm.hardest_negative]].input);
        const nn::Var vsn = row(data.queries[batch.v_negatives[vm.second_negative]].input);
        loss = g.add(loss, lazy_quadruplet(g, anchor_var, {vhp}, {vhn, vsn}, config.loss));
      }
      const double value = g.value(loss).data[0];
      if (!std::isfinite(value))
        fail(ErrorKind::TrainingDiverged, "non-finite loss at epoch " + std::to_string(epoch) + ", anchor '" +
                                              anchor_sample.id + "'");
      loss_sum += value;
      ++metrics.anchors;
      g.backward(g.scale(loss, 1.0 / static_cast<double>(config.anchors_per_step)));
      if (++in_step == config.anchors_per_step) {
        model.params().adam_step(adam);
        model.params().zero_grad();
        in_step = 0;
      }
    }
    if (in_step > 0) {
      model.params().adam_step(adam);
      model.params().zero_grad();
    }
    metrics.mean_loss = metrics.anchors ? loss_sum / static_cast<double>(metrics.anchors) : 0.0;
    metrics.val_recall_at_1 = recall_at_1(model, data.database, data.validation);
    metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(metrics);
    if (on_epoch) on_epoch(metrics);
  }
  return report;
}

}  // namespace placerec::train

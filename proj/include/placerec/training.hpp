#pragma once

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "placerec/aggregator.hpp"
#include "placerec/retrieval.hpp"

namespace placerec::train {

using agg::GlobalDescriptor;

struct LossParams {
  double alpha = 0.5;
  double beta = 0.2;
  void validate() const;
};

/// Indices chosen by lazy mining. Ties go to the lowest index.
struct Mining {
  std::size_t hardest_positive = 0;  // argmax d(anchor, pos)
  std::size_t hardest_negative = 0;  // argmin d(anchor, neg)
  std::size_t second_negative = 0;   // argmin over the other negatives of d(hardest_negative, neg)
};

Mining mine(const GlobalDescriptor& anchor, std::span<const GlobalDescriptor> positives,
            std::span<const GlobalDescriptor> negatives);

/// max(d(a,P_hpos) - d(a,P_hneg) + alpha, 0) + max(d(a,P_hpos) - d(P_hneg,P_sneg) + beta, 0).
double lazy_quadruplet(const GlobalDescriptor& anchor, std::span<const GlobalDescriptor> positives,
                       std::span<const GlobalDescriptor> negatives, const LossParams& params);

/// Same loss on graph rows (each a 1 x dim Var). Mining reads the current
/// values; the returned scalar depends only on the four selected rows.
nn::Var lazy_quadruplet(nn::Graph& g, nn::Var anchor, const std::vector<nn::Var>& positives,
                        const std::vector<nn::Var>& negatives, const LossParams& params);

enum class TrainMode { Pretrain, Finetune };
std::string_view to_string(TrainMode mode);
TrainMode mode_from_string(const std::string& s);

struct QuadrupletBatch {
  GlobalDescriptor anchor;
  std::vector<GlobalDescriptor> positives;    // database side
  std::vector<GlobalDescriptor> negatives;
  std::vector<GlobalDescriptor> v_positives;  // query side
  std::vector<GlobalDescriptor> v_negatives;
};

/// L_VtoL + L_VtoV; the query-side term is skipped in pretrain mode.
double combined_loss(const QuadrupletBatch& batch, const LossParams& params, TrainMode mode = TrainMode::Finetune);

// ---------------------------------------------------------------------------
// Sampling

struct DistanceRules {
  double positive_below = 20.0;  // metres, strict
  double negative_from = 50.0;   // metres, inclusive
};

struct BatchShape {
  std::size_t positives = 2;
  std::size_t negatives = 8;
  std::size_t hard_negatives = 0;  // taken from SampleRequest::preferred_* before random draws
};

/// Indices into the database and query-side candidate lists.
struct BatchIndices {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::vector<std::size_t> v_positives;
  std::vector<std::size_t> v_negatives;
};

struct SkippedAnchor {
  std::string anchor_id;
  std::string reason;
};

struct SampleRequest {
  Point3 anchor_position;
  std::string anchor_id;
  std::span<const Point3> db_positions;
  std::span<const Point3> query_positions;  // empty when the query side is unused
  std::optional<std::size_t> exclude_query;  // the anchor itself, when it is a query
  /// Optional preferred negatives (e.g. nearest in descriptor space), taken
  /// first when eligible; the rest of the quota is drawn uniformly.
  std::span<const std::size_t> preferred_negatives;
  std::span<const std::size_t> preferred_v_negatives;
};

/// Draws up to shape.positives positives (< 20 m) and shape.negatives
/// negatives (>= 50 m) without replacement, on both sides. Candidates in the
/// 20-50 m band are never used.
std::variant<BatchIndices, SkippedAnchor> sample_batch(const SampleRequest& request, const BatchShape& shape,
                                                       const DistanceRules& rules, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Training loop

/// One network input with its ground-truth position.
struct Sample {
  std::string id;
  Point3 position;
  nn::Tensor input;  // Nc x 6
};

struct TrainingData {
  std::vector<Sample> database;            // all database submaps (retrieval targets)
  std::vector<std::size_t> train_database; // indices usable as pretrain anchors / batch members
  std::vector<Sample> queries;             // training QPCs
  std::vector<Sample> validation;          // held-out QPCs, scored against the whole database
};

struct AugmentParams {
  double keep_min = 0.7;  // each pretrain anchor keeps a uniform fraction in [keep_min, 1] of its points
  double jitter = 0.005;  // Gaussian xyz noise in normalised units
  double feature_drop = 0.5;  // probability that the anchor's feature channels are zeroed, as on query inputs
};

/// Pretrain anchor augmentation: random point subset, xyz jitter, optional
/// feature dropout. Output has the input's column count.
nn::Tensor augment(const nn::Tensor& input, const AugmentParams& p, std::mt19937_64& rng);

struct TrainConfig {
  TrainMode mode = TrainMode::Pretrain;
  double base_lr = 1e-3;
  std::size_t epochs = 10;
  BatchShape shape;
  std::size_t hard_negatives = 4;  // of shape.negatives, taken nearest in the cached descriptor space
  std::size_t anchors_per_step = 4;
  LossParams loss;
  DistanceRules rules;
  bool query_side_loss = true;  // finetune only: add L_VtoV
  double head_lr_multiplier = 10.0;
  AugmentParams augment;
  std::uint64_t seed = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  TrainMode mode = TrainMode::Pretrain;
  double mean_loss = 0.0;
  double val_recall_at_1 = 0.0;
  double wall_seconds = 0.0;
  std::size_t anchors = 0;
  std::size_t skipped = 0;
};

std::string metrics_header();
/// epoch, mode, mean_loss, val_recall@1, wall_seconds (tab-separated).
std::string metrics_line(const EpochMetrics& m);

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  std::vector<SkippedAnchor> skipped;
};

/// Sets the learning-rate multipliers for `mode`: 1 everywhere, and
/// head_multiplier on the final MLP in finetune mode.
void apply_lr_schedule(nn::ParamStore& params, TrainMode mode, double head_multiplier);

/// Inference-mode descriptors for a list of samples.
std::vector<GlobalDescriptor> describe(const agg::AggregatorModel& model, std::span<const Sample> samples);

/// Recall@1 of `queries` against every database sample (25 m rule).
double recall_at_1(const agg::AggregatorModel& model, std::span<const Sample> database,
                   std::span<const Sample> queries);

/// Pretrain: anchors are augmented database submaps, loss L_VtoL.
/// Finetune: anchors are training QPCs, loss L_VtoL (+ L_VtoV).
/// TrainingDiverged on a non-finite loss.
TrainReport run_training(agg::AggregatorModel& model, const TrainingData& data, const TrainConfig& config,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace placerec::train

#include <cmath>
#include <numeric>

#include "placerec/binio.hpp"
#include "placerec/gpc.hpp"

namespace placerec::gpc {

namespace {

constexpr std::string_view kWeightsMagic = "GPCW";
constexpr std::string_view kCompressedMagic = "GPCC";
constexpr std::uint32_t kWeightsVersion = 1;

std::string enc_weight(std::size_t b) { return "enc." + std::to_string(b) + ".W"; }
std::string dec_name(std::size_t b, std::size_t c, const char* what) {
  return "dec." + std::to_string(b) + "." + std::to_string(c) + "." + what;
}

// Per-component offset bound of decoder block b. The bounds halve per block
// and sum below 1, so a leaf never leaves its parent's 1 m cell diagonal.
double offset_limit(std::size_t block) { return std::ldexp(1.0, -static_cast<int>(block) - 1); }

std::vector<Point3> pooled_centroids(std::span<const Point3> points, const VoxelAssignment& assignment) {
  std::vector<Point3> sums(assignment.voxel_count);
  std::vector<std::size_t> counts(assignment.voxel_count, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto v = assignment.voxel_of_point[i];
    sums[v] = sums[v] + points[i];
    ++counts[v];
  }
  for (std::size_t v = 0; v < sums.size(); ++v) sums[v] = sums[v] * (1.0 / static_cast<double>(counts[v]));
  return sums;
}

nn::Var scale_rows(nn::Graph& graph, nn::Var x, std::vector<double> factors) {
  nn::Tensor out = graph.value(x);
  const std::size_t c = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t q = 0; q < c; ++q) out.at(r, q) *= factors[r];
  const nn::Var self{static_cast<std::int32_t>(graph.node_count())};
  return graph.custom(std::move(out), {x}, [x, self, c, factors = std::move(factors)](nn::Graph& g) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t q = 0; q < c; ++q) gx.at(r, q) += go.at(r, q) * factors[r];
  });
}

nn::Var segment_mean(nn::Graph& graph, nn::Var x, const VoxelAssignment& assignment) {
  const auto& xv = graph.value(x);
  const std::size_t c = xv.cols();
  std::vector<double> counts(assignment.voxel_count, 0.0);
  for (auto v : assignment.voxel_of_point) counts[v] += 1.0;
  nn::Tensor out(assignment.voxel_count, c);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    const auto v = assignment.voxel_of_point[i];
    for (std::size_t q = 0; q < c; ++q) out.at(v, q) += xv.at(i, q);
  }
  for (std::size_t v = 0; v < out.rows(); ++v)
    for (std::size_t q = 0; q < c; ++q) out.at(v, q) /= counts[v];
  const nn::Var self{static_cast<std::int32_t>(graph.node_count())};
  return graph.custom(std::move(out), {x}, [x, self, c, &assignment, counts = std::move(counts)](nn::Graph& g) {
    const auto& go = g.grad(self);
    auto& gx = g.grad(x);
    for (std::size_t i = 0; i < gx.rows(); ++i) {
      const auto v = assignment.voxel_of_point[i];
      for (std::size_t q = 0; q < c; ++q) gx.at(i, q) += go.at(v, q) / counts[v];
    }
  });
}

// Row m * parts.size() + c of the output is row m of parts[c].
nn::Var interleave_rows(nn::Graph& graph, const std::vector<nn::Var>& parts) {
  const std::size_t f = parts.size();
  const auto& first = graph.value(parts.front());
  const std::size_t m = first.rows(), c = first.cols();
  nn::Tensor out(m * f, c);
  for (std::size_t p = 0; p < f; ++p) {
    const auto& v = graph.value(parts[p]);
    for (std::size_t r = 0; r < m; ++r) std::copy(v.row(r), v.row(r) + c, out.row(r * f + p));
  }
  const nn::Var self{static_cast<std::int32_t>(graph.node_count())};
  return graph.custom(std::move(out), parts, [parts, self, m, c, f](nn::Graph& g) {
    const auto& go = g.grad(self);
    for (std::size_t p = 0; p < f; ++p) {
      if (!g.requires_grad(parts[p])) continue;
      auto& gp = g.grad(parts[p]);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t q = 0; q < c; ++q) gp.at(r, q) += go.at(r * f + p, q);
    }
  });
}

nn::Tensor points_tensor(std::span<const Point3> points) {
  nn::Tensor t(points.size(), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    t.at(i, 0) = points[i].x;
    t.at(i, 1) = points[i].y;
    t.at(i, 2) = points[i].z;
  }
  return t;
}

std::vector<Point3> tensor_points(const nn::Tensor& t) {
  std::vector<Point3> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

GpcModel::GpcModel(GpcConfig config) : config_(config) {
  for (double g : config_.grid_sizes)
    if (!(g > 0.0)) fail(ErrorKind::ContractViolation, "grid sizes must be positive");
  if (config_.neighbor_radius_factor < 1.0)
    fail(ErrorKind::ContractViolation, "neighbour radius must be at least the grid size");
  std::mt19937_64 rng(config_.seed);
  const std::size_t k = config_.kernel_point_count;
  std::size_t in = 1;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t out = config_.feature_widths[b];
    params_.add(enc_weight(b), nn::uniform_init(k * in, out, k * in, rng));
    in = out;
  }
  params_.add("enc.head.W", nn::uniform_init(in, CompressedSubmap::kFeatureDim, in, rng));
  params_.add("enc.head.b", nn::uniform_init(1, CompressedSubmap::kFeatureDim, in, rng));
  std::size_t dec_in = CompressedSubmap::kFeatureDim;
  const std::size_t h = config_.decoder_width;
  for (std::size_t b = 0; b < config_.decoder_factors.size(); ++b) {
    if (config_.decoder_factors[b] == 0) fail(ErrorKind::ContractViolation, "decoder factor must be positive");
    for (std::size_t c = 0; c < config_.decoder_factors[b]; ++c) {
      params_.add(dec_name(b, c, "W"), nn::uniform_init(dec_in, h, dec_in, rng));
      params_.add(dec_name(b, c, "b"), nn::uniform_init(1, h, dec_in, rng));
      params_.add(dec_name(b, c, "U"), nn::uniform_init(h, 3, h, rng));
    }
    dec_in = h;
  }
}

KpconvParams GpcModel::block_params(std::size_t block) const {
  KpconvParams p;
  p.influence_radius = config_.grid_sizes[block];
  p.kernel_points = kernel_points_for(config_.kernel_point_count, p.influence_radius);
  p.weights = params_.get(enc_weight(block)).value;
  return p;
}

void GpcModel::save(const std::filesystem::path& path) const {
  binio::Writer w;
  w.magic(kWeightsMagic);
  w.u32(kWeightsVersion);
  std::vector<std::pair<std::string, nn::Tensor>> blobs;
  auto meta = [&](const std::string& name, std::vector<double> values) {
    blobs.emplace_back("meta." + name, nn::Tensor::from(1, values.size(), values));
  };
  // Grid sizes in millimetres so f32 storage reproduces the decimal metres.
  meta("grid_sizes_mm", {config_.grid_sizes[0] * 1000.0, config_.grid_sizes[1] * 1000.0,
                         config_.grid_sizes[2] * 1000.0});
  meta("feature_widths", {double(config_.feature_widths[0]), double(config_.feature_widths[1]),
                          double(config_.feature_widths[2])});
  meta("kernel_point_count", {double(config_.kernel_point_count)});
  meta("neighbor_radius_factor", {config_.neighbor_radius_factor});
  std::vector<double> factors(config_.decoder_factors.begin(), config_.decoder_factors.end());
  meta("decoder_factors", factors);
  meta("decoder_width", {double(config_.decoder_width)});
  meta("frozen", {frozen_ ? 1.0 : 0.0});
  for (const auto& [name, p] : params_.items()) blobs.emplace_back(name, p.value);

  w.u32(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, t] : blobs) {
    w.str32(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) w.f32(static_cast<float>(v));
  }
  w.write_file(path);
}

GpcModel GpcModel::load(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kWeightsMagic);
  const auto version = r.u32();
  if (version != kWeightsVersion) r.error("unsupported GPCW version " + std::to_string(version), 4);
  const auto count = r.u32();
  std::map<std::string, nn::Tensor> blobs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    auto name = r.str32();
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) r.error("bad tensor rank", at);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u32();
    nn::Tensor t(shape);
    r.need(t.numel() * sizeof(float));
    for (auto& v : t.data) v = r.f32();
    blobs[name] = std::move(t);
  }
  if (!r.at_end()) r.error("trailing bytes after last tensor", r.offset());
  auto meta = [&](const std::string& name, std::size_t n) -> const nn::Tensor& {
    auto it = blobs.find("meta." + name);
    if (it == blobs.end() || it->second.numel() != n)
      fail(ErrorKind::ParseError, path.string() + ": missing or malformed meta." + name);
    return it->second;
  };
  GpcConfig cfg;
  for (int b = 0; b < 3; ++b) {
    cfg.grid_sizes[b] = meta("grid_sizes_mm", 3).data[b] / 1000.0;
    cfg.feature_widths[b] = static_cast<std::size_t>(meta("feature_widths", 3).data[b]);
  }
  cfg.kernel_point_count = static_cast<std::size_t>(meta("kernel_point_count", 1).data[0]);
  cfg.neighbor_radius_factor = meta("neighbor_radius_factor", 1).data[0];
  for (int b = 0; b < 4; ++b) cfg.decoder_factors[b] = static_cast<std::size_t>(meta("decoder_factors", 4).data[b]);
  cfg.decoder_width = static_cast<std::size_t>(meta("decoder_width", 1).data[0]);

  GpcModel model(cfg);
  model.frozen_ = meta("frozen", 1).data[0] != 0.0;
  for (auto& [name, p] : model.params_.items()) {
    auto it = blobs.find(name);
    if (it == blobs.end()) fail(ErrorKind::ParseError, path.string() + ": missing tensor " + name);
    if (it->second.numel() != p.value.numel())
      fail(ErrorKind::ParseError, path.string() + ": tensor " + name + " has shape " +
                                      nn::shape_string(it->second.shape) + ", expected " +
                                      nn::shape_string(p.value.shape));
    p.value.data = it->second.data;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Encoder / decoder

EncoderPlan plan_encoder(const GpcModel& model, const PointCloud& cloud) {
  if (cloud.empty()) fail(ErrorKind::EmptyInput, "encode of empty cloud");
  cloud.validate();
  EncoderPlan plan;
  plan.stage_points[0] = cloud.points;
  const Point3 origin = bounds(cloud.points).min_corner;
  for (std::size_t b = 0; b < 3; ++b) {
    const double grid = model.config().grid_sizes[b];
    const auto kernel = kernel_points_for(model.config().kernel_point_count, grid);
    plan.neighborhoods[b] = build_neighborhood(plan.stage_points[b], kernel, grid, model.neighbor_radius(b));
    plan.pooling[b] = assign_voxels(plan.stage_points[b], VoxelGridParams{grid, origin});
    plan.stage_points[b + 1] = pooled_centroids(plan.stage_points[b], plan.pooling[b]);
  }
  return plan;
}

nn::Var encode_graph(nn::Graph& graph, const GpcModel& model, nn::ParamStore* trainable, const EncoderPlan& plan) {
  const auto& store = model.params();
  nn::Var f = graph.constant(nn::Tensor(plan.stage_points[0].size(), 1, 1.0));
  for (std::size_t b = 0; b < 3; ++b) {
    const auto& nb = plan.neighborhoods[b];
    f = graph.matmul(kernel_gather(graph, f, nb), graph.param(store, trainable, enc_weight(b)));
    std::vector<double> inv_ball(nb.ball_size.size());
    for (std::size_t i = 0; i < inv_ball.size(); ++i) inv_ball[i] = 1.0 / static_cast<double>(nb.ball_size[i]);
    f = graph.relu(scale_rows(graph, f, std::move(inv_ball)));
    f = segment_mean(graph, f, plan.pooling[b]);
  }
  return graph.add_row(graph.matmul(f, graph.param(store, trainable, "enc.head.W")),
                       graph.param(store, trainable, "enc.head.b"));
}

nn::Var decode_graph(nn::Graph& graph, const GpcModel& model, nn::ParamStore* trainable,
                     std::span<const Point3> compressed_points, nn::Var compressed_features) {
  const auto& store = model.params();
  nn::Var h = compressed_features;
  nn::Var pos = graph.constant(points_tensor(compressed_points));
  const auto& factors = model.config().decoder_factors;
  for (std::size_t b = 0; b < factors.size(); ++b) {
    std::vector<nn::Var> child_features, child_positions;
    for (std::size_t c = 0; c < factors[b]; ++c) {
      nn::Var hc = graph.relu(graph.add_row(graph.matmul(h, graph.param(store, trainable, dec_name(b, c, "W"))),
                                            graph.param(store, trainable, dec_name(b, c, "b"))));
      nn::Var offset =
          graph.scale(graph.tanh(graph.matmul(hc, graph.param(store, trainable, dec_name(b, c, "U")))), offset_limit(b));
      child_features.push_back(hc);
      child_positions.push_back(graph.add(pos, offset));
    }
    h = factors[b] == 1 ? child_features.front() : interleave_rows(graph, child_features);
    pos = factors[b] == 1 ? child_positions.front() : interleave_rows(graph, child_positions);
  }
  return pos;
}

PointCloud CompressedSubmap::as_cloud() const {
  PointCloud c;
  c.points = points;
  c.feature_dim = kFeatureDim;
  c.features = features;
  c.frame = FrameTag::Local;
  return c;
}

CompressedSubmap encode(const GpcModel& model, const PointCloud& cloud, std::string source_id, Point3 centroid_world) {
  const auto plan = plan_encoder(model, cloud);
  nn::Graph graph(false);
  const auto features = encode_graph(graph, model, nullptr, plan);
  CompressedSubmap out;
  out.points = plan.stage_points[3];
  const auto& fv = graph.value(features);
  out.features.assign(fv.data.begin(), fv.data.end());
  out.source_id = std::move(source_id);
  out.centroid_world = centroid_world;
  return out;
}

PointCloud decode(const GpcModel& model, const CompressedSubmap& compressed) {
  if (compressed.features.size() != compressed.size() * CompressedSubmap::kFeatureDim)
    fail(ErrorKind::ContractViolation, "compressed submap feature count mismatch");
  nn::Graph graph(false);
  const auto f = graph.constant(
      nn::Tensor::from(compressed.size(), CompressedSubmap::kFeatureDim, compressed.features));
  const auto pos = decode_graph(graph, model, nullptr, compressed.points, f);
  PointCloud out;
  out.points = tensor_points(graph.value(pos));
  out.frame = FrameTag::Local;
  return out;
}

// ---------------------------------------------------------------------------
// Chamfer

double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) fail(ErrorKind::EmptyInput, "chamfer distance of an empty set");
  const KdTree ta(a), tb(b);
  double sa = 0.0, sb = 0.0;
  for (const auto& p : a) sa += tb.knn(p, 1).front().distance;
  for (const auto& p : b) sb += ta.knn(p, 1).front().distance;
  return 0.5 * (sa / static_cast<double>(a.size()) + sb / static_cast<double>(b.size()));
}

nn::Var chamfer_graph(nn::Graph& graph, nn::Var predicted, std::span<const Point3> target, const KdTree& target_tree) {
  const auto pred = tensor_points(graph.value(predicted));
  if (pred.empty() || target.empty()) fail(ErrorKind::EmptyInput, "chamfer distance of an empty set");
  const KdTree pred_tree(pred);
  const double wp = 0.5 / static_cast<double>(pred.size());
  const double wt = 0.5 / static_cast<double>(target.size());

  // Each term: (predicted index, target index, weight).
  struct Term {
    std::size_t p, t;
    double w;
  };
  std::vector<Term> terms;
  terms.reserve(pred.size() + target.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto nn = target_tree.knn(pred[i], 1).front();
    loss += wp * nn.distance;
    terms.push_back({i, nn.index, wp});
  }
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto nn = pred_tree.knn(target[j], 1).front();
    loss += wt * nn.distance;
    terms.push_back({nn.index, j, wt});
  }
  const nn::Var self{static_cast<std::int32_t>(graph.node_count())};
  return graph.custom(nn::Tensor(1, 1, loss), {predicted},
                      [predicted, self, target, terms = std::move(terms)](nn::Graph& g) {
                        const double go = g.grad(self).data[0];
                        const auto& pv = g.value(predicted);
                        auto& gp = g.grad(predicted);
                        for (const auto& term : terms) {
                          const double dx = pv.at(term.p, 0) - target[term.t].x;
                          const double dy = pv.at(term.p, 1) - target[term.t].y;
                          const double dz = pv.at(term.p, 2) - target[term.t].z;
                          const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                          if (d == 0.0) continue;
                          const double s = go * term.w / d;
                          gp.at(term.p, 0) += s * dx;
                          gp.at(term.p, 1) += s * dy;
                          gp.at(term.p, 2) += s * dz;
                        }
                      });
}

double reconstruction_chamfer(const GpcModel& model, const PointCloud& cloud) {
  return chamfer_distance(decode(model, encode(model, cloud)).points, cloud.points);
}

AutoencoderTrainReport train_autoencoder(GpcModel& model, std::span<const PointCloud> clouds,
                                         const AutoencoderTrainConfig& config) {
  if (clouds.size() < 2) fail(ErrorKind::ContractViolation, "autoencoder training needs at least 2 clouds");
  std::vector<EncoderPlan> plans;
  std::vector<std::unique_ptr<KdTree>> trees;
  for (const auto& c : clouds) {
    plans.push_back(plan_encoder(model, c));
    trees.push_back(std::make_unique<KdTree>(c.points));
  }
  AutoencoderTrainReport report;
  for (const auto& c : clouds) report.initial_loss += reconstruction_chamfer(model, c);
  report.initial_loss /= static_cast<double>(clouds.size());

  nn::AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  auto& store = model.params();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      store.zero_grad();
      nn::Graph graph;
      const auto features = encode_graph(graph, model, &store, plans[i]);
      const auto positions = decode_graph(graph, model, &store, plans[i].stage_points[3], features);
      const auto loss = chamfer_graph(graph, positions, clouds[i].points, *trees[i]);
      const double value = graph.value(loss).data[0];
      if (!std::isfinite(value))
        fail(ErrorKind::TrainingDiverged, "autoencoder loss is " + std::to_string(value) + " at epoch " +
                                              std::to_string(epoch));
      total += value;
      graph.backward(loss);
      store.adam_step(adam);
    }
    report.epoch_loss.push_back(total / static_cast<double>(clouds.size()));
  }
  model.set_frozen(true);
  return report;
}

double compression_ratio(const PointCloud& original, const CompressedSubmap& compressed) {
  if (original.empty() || compressed.size() == 0)
    fail(ErrorKind::EmptyInput, "compression ratio needs nonempty clouds");
  return static_cast<double>(original.size() * 3) / static_cast<double>(compressed.size() * 6);
}

void save_compressed(const CompressedSubmap& submap, const std::filesystem::path& path) {
  if (submap.features.size() != submap.size() * CompressedSubmap::kFeatureDim)
    fail(ErrorKind::ContractViolation, "compressed submap feature count mismatch");
  binio::Writer w;
  w.magic(kCompressedMagic);
  w.u32(static_cast<std::uint32_t>(submap.size()));
  for (std::size_t i = 0; i < submap.size(); ++i) {
    w.f32(static_cast<float>(submap.points[i].x));
    w.f32(static_cast<float>(submap.points[i].y));
    w.f32(static_cast<float>(submap.points[i].z));
    for (std::size_t c = 0; c < CompressedSubmap::kFeatureDim; ++c)
      w.f32(static_cast<float>(submap.features[i * CompressedSubmap::kFeatureDim + c]));
  }
  w.str32(submap.source_id);
  w.f64(submap.centroid_world.x);
  w.f64(submap.centroid_world.y);
  w.f64(submap.centroid_world.z);
  w.write_file(path);
}

CompressedSubmap load_compressed(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kCompressedMagic);
  const auto n = r.u32();
  r.need(static_cast<std::size_t>(n) * 6 * sizeof(float));
  CompressedSubmap s;
  s.points.resize(n);
  s.features.resize(static_cast<std::size_t>(n) * CompressedSubmap::kFeatureDim);
  for (std::uint32_t i = 0; i < n; ++i) {
    s.points[i].x = r.f32();
    s.points[i].y = r.f32();
    s.points[i].z = r.f32();
    for (std::size_t c = 0; c < CompressedSubmap::kFeatureDim; ++c)
      s.features[i * CompressedSubmap::kFeatureDim + c] = r.f32();
  }
  s.source_id = r.str32();
  s.centroid_world.x = r.f64();
  s.centroid_world.y = r.f64();
  s.centroid_world.z = r.f64();
  if (!r.at_end()) r.error("trailing bytes after metadata", r.offset());
  return s;
}

}  // namespace placerec::gpc

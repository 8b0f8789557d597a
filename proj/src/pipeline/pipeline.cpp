#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "placerec/pipeline.hpp"

namespace placerec::pipeline {

// ---------------------------------------------------------------------------
// Config

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys{
      {"seed", "7", "master seed; every random stream derives from it"},
      {"paths.benchmark", "work/bench", "synthetic benchmark directory (manifest.tsv)"},
      {"paths.compressed", "work/compressed", "compressed database submaps (GPCC + index.tsv)"},
      {"paths.qpc", "work/qpc", "refined query point clouds (GPC1 + index.tsv)"},
      {"paths.gpc_weights", "work/gpc.gpcw", "compressor checkpoint"},
      {"paths.agg_weights", "work/agg.aggw", "aggregator checkpoint written by train-agg and read by later commands"},
      {"paths.agg_init", "", "checkpoint train-agg starts from; empty for a fresh initialisation"},
      {"paths.db", "work/db.vdb", "descriptor database (VDB1)"},
      {"paths.report", "work/eval_report.txt", "evaluation report"},
      {"paths.logs", "work/logs", "resolved configs and metric logs"},
      {"synth.extent", "600", "world edge length (m)"},
      {"synth.block_size", "50", "city block edge (m)"},
      {"synth.road_width", "10", "road width (m)"},
      {"synth.building_density", "600", "buildings per km^2"},
      {"synth.pole_density", "300", "poles per km^2"},
      {"synth.tree_density", "200", "trees per km^2"},
      {"synth.surface_density", "10", "lidar surface samples per m^2"},
      {"synth.route_count", "4", "number of database routes"},
      {"synth.route_length", "1000", "route length (m)"},
      {"synth.traversals", "5", "query traversals per route"},
      {"synth.lateral_offset_max", "3", "max lateral offset of a query traversal (m)"},
      {"synth.heading_jitter_deg", "5", "max heading jitter of query poses (deg)"},
      {"synth.start_shift_max", "10", "max along-route start shift of a query traversal (m)"},
      {"synth.keep_fraction", "0.35", "fraction of surface points a query keeps"},
      {"synth.noise_sigma", "0.05", "query point noise (m)"},
      {"synth.outlier_fraction", "0.02", "injected outliers per kept query point"},
      {"synth.outlier_radius", "30", "outlier ball radius around the trajectory (m)"},
      {"synth.density_bias", "1", "edge preference exponent of the query subsample"},
      {"submap.extent_x", "40", "submap box x extent (m)"},
      {"submap.extent_y", "40", "submap box y extent (m)"},
      {"submap.extent_z", "15", "submap box z extent (m)"},
      {"submap.stride", "20", "anchor spacing along trajectories (m)"},
      {"gpc.train_scenes", "20", "database submaps used to train the compressor"},
      {"gpc.epochs", "40", "compressor training epochs"},
      {"gpc.learning_rate", "0.005", "compressor Adam learning rate"},
      {"grm.filter_k", "20", "outlier filter neighbour count"},
      {"grm.sigma_multiplier", "2", "outlier filter threshold multiplier"},
      {"grm.vo_source", "dso", "VO front end: dso | orbslam3 | vins | synthetic"},
      {"grm.densify_k", "0", "densification neighbour count; 0 picks the front end's default"},
      {"grm.query_voxel", "0.025", "query voxel cell in the normalised frame before aggregation"},
      {"agg.feature_dim", "32", "aggregator width D"},
      {"agg.latent_count", "8", "number of latents N_t"},
      {"agg.descriptor_dim", "32", "global descriptor length"},
      {"agg.blocks", "2", "cross-attention blocks"},
      {"agg.self_layers", "4", "self-attention layers per block"},
      {"agg.heads", "4", "attention heads"},
      {"agg.tnet_code_dim", "16", "T-Net pooled code width"},
      {"train.mode", "pretrain", "pretrain | finetune"},
      {"train.epochs", "8", "aggregator training epochs"},
      {"train.lr", "0.001", "base Adam learning rate"},
      {"train.positives", "2", "positives per anchor"},
      {"train.negatives", "8", "negatives per anchor"},
      {"train.hard_negatives", "4", "negatives taken nearest in descriptor space"},
      {"train.anchors_per_step", "4", "anchors accumulated per optimiser step"},
      {"train.alpha", "0.5", "first quadruplet margin"},
      {"train.beta", "0.2", "second quadruplet margin"},
      {"train.query_side_loss", "true", "finetune: add the query-side quadruplet term"},
      {"train.head_lr_multiplier", "10", "finetune learning-rate multiplier of the final MLP"},
      {"train.holdout_fraction", "0.1", "fraction of places held out for validation and evaluation"},
      {"train.augment_keep_min", "0.7", "pretrain: minimum kept fraction of anchor points"},
      {"train.augment_jitter", "0.005", "pretrain: anchor coordinate noise (normalised units)"},
      {"train.augment_feature_drop", "0.5", "pretrain: probability of zeroing the anchor's feature channels"},
      {"eval.success_radius", "25", "retrieval success radius (m)"},
      {"eval.split", "heldout", "queries to evaluate: heldout | all"},
      {"gradcheck.nc", "16", "input points"},
      {"gradcheck.latents", "4", "latents"},
      {"gradcheck.dim", "16", "aggregator width"},
      {"gradcheck.tolerance", "1e-4", "max relative error"},
  };
  return keys;
}

Config::Config() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorKind::ConfigError, "unknown config key '" + key + "'");
  it->second = value;
}

void Config::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = origin + ":" + std::to_string(line_no);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.erase(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::ConfigError, where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::ConfigError, where + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!section.empty()) key = section + "." + key;
    if (!values_.count(key)) fail(ErrorKind::ConfigError, where + ": unknown config key '" + key + "'");
    values_[key] = value;
  }
}

void Config::load_file(const std::filesystem::path& path) { load_text(read_text(path), path.string()); }

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorKind::ContractViolation, "config key '" + key + "' is not registered");
  return it->second;
}

double Config::real(const std::string& key) const {
  const auto& v = str(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::logic_error&) {
  }
  fail(ErrorKind::ConfigError, "config key '" + key + "' expects a number, got '" + v + "'");
}

std::size_t Config::count(const std::string& key) const {
  const double d = real(key);
  if (d < 0.0 || d != std::floor(d))
    fail(ErrorKind::ConfigError, "config key '" + key + "' expects a non-negative integer, got '" + str(key) + "'");
  return static_cast<std::size_t>(d);
}

std::uint64_t Config::u64(const std::string& key) const {
  const auto& v = str(key);
  try {
    std::size_t used = 0;
    const auto u = std::stoull(v, &used);
    if (used == v.size()) return u;
  } catch (const std::logic_error&) {
  }
  fail(ErrorKind::ConfigError, "config key '" + key + "' expects an unsigned integer, got '" + v + "'");
}

bool Config::flag(const std::string& key) const {
  const auto& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::ConfigError, "config key '" + key + "' expects true or false, got '" + v + "'");
}

std::string Config::resolved_text() const {
  std::string out, section = "\x01";
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string name = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (sec != section) {
      if (!sec.empty()) out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += name + " = \"" + values_.at(k.name) + "\"\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter blocks

grm::SubmapSpec submap_spec(const Config& c) {
  grm::SubmapSpec s;
  s.extent = {c.real("submap.extent_x"), c.real("submap.extent_y"), c.real("submap.extent_z")};
  s.stride = c.real("submap.stride");
  return s;
}

synth::BenchmarkParams benchmark_params(const Config& c) {
  synth::BenchmarkParams p;
  p.world.seed = c.u64("seed");
  p.world.extent = c.real("synth.extent");
  p.world.block_size = c.real("synth.block_size");
  p.world.road_width = c.real("synth.road_width");
  p.world.building_density = c.real("synth.building_density");
  p.world.pole_density = c.real("synth.pole_density");
  p.world.tree_density = c.real("synth.tree_density");
  p.world.surface_density = c.real("synth.surface_density");
  p.route_count = c.count("synth.route_count");
  p.route_length = c.real("synth.route_length");
  p.traversals = c.count("synth.traversals");
  p.lateral_offset_max = c.real("synth.lateral_offset_max");
  p.heading_jitter_deg = c.real("synth.heading_jitter_deg");
  p.start_shift_max = c.real("synth.start_shift_max");
  p.degrade.keep_fraction = c.real("synth.keep_fraction");
  p.degrade.noise_sigma = c.real("synth.noise_sigma");
  p.degrade.outlier_fraction = c.real("synth.outlier_fraction");
  p.degrade.outlier_radius = c.real("synth.outlier_radius");
  p.degrade.density_bias = c.real("synth.density_bias");
  p.spec = submap_spec(c);
  return p;
}

gpc::GpcConfig gpc_config(const Config& c) {
  gpc::GpcConfig g;
  g.seed = synth::stream_id("gpc.init", c.u64("seed"));
  return g;
}

agg::AggregatorConfig aggregator_config(const Config& c) {
  agg::AggregatorConfig a;
  a.feature_dim = c.count("agg.feature_dim");
  a.latent_count = c.count("agg.latent_count");
  a.descriptor_dim = c.count("agg.descriptor_dim");
  a.blocks = c.count("agg.blocks");
  a.self_layers_per_block = c.count("agg.self_layers");
  a.heads = c.count("agg.heads");
  a.tnet_code_dim = c.count("agg.tnet_code_dim");
  a.seed = synth::stream_id("agg.init", c.u64("seed"));
  a.validate();
  return a;
}

train::TrainConfig train_config(const Config& c, train::TrainMode mode) {
  train::TrainConfig t;
  t.mode = mode;
  t.base_lr = c.real("train.lr");
  t.epochs = c.count("train.epochs");
  t.shape.positives = c.count("train.positives");
  t.shape.negatives = c.count("train.negatives");
  t.hard_negatives = c.count("train.hard_negatives");
  t.anchors_per_step = c.count("train.anchors_per_step");
  t.loss.alpha = c.real("train.alpha");
  t.loss.beta = c.real("train.beta");
  t.loss.validate();
  t.query_side_loss = c.flag("train.query_side_loss");
  t.head_lr_multiplier = c.real("train.head_lr_multiplier");
  t.augment.keep_min = c.real("train.augment_keep_min");
  t.augment.jitter = c.real("train.augment_jitter");
  t.augment.feature_drop = c.real("train.augment_feature_drop");
  t.seed = synth::stream_id("train", c.u64("seed"), mode == train::TrainMode::Pretrain ? 0 : 1);
  return t;
}

namespace {

grm::VoSource vo_source(const std::string& s) {
  if (s == "dso") return grm::VoSource::Dso;
  if (s == "orbslam3") return grm::VoSource::OrbSlam3;
  if (s == "vins") return grm::VoSource::VinsMono;
  if (s == "synthetic") return grm::VoSource::Synthetic;
  fail(ErrorKind::ConfigError, "unknown vo_source '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Data preparation

PointCloud to_local(const PointCloud& world_cloud, const Point3& anchor) {
  PointCloud out = world_cloud;
  for (auto& p : out.points) p = p - anchor;
  out.frame = FrameTag::Local;
  return out;
}

nn::Tensor query_input(const grm::QueryPointCloud& qpc, double voxel) {
  const PointCloud v = voxel > 0.0 ? voxel_downsample(qpc.cloud, VoxelGridParams{voxel, Point3{}}) : qpc.cloud;
  return agg::make_input(v.points, {}, 0, false);
}

namespace {

std::string fmt_point(const Point3& p) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%.6f", p.x, p.y, p.z);
  return buf;
}

std::vector<std::vector<std::string>> read_table(const std::filesystem::path& path, std::size_t columns) {
  std::istringstream in(read_text(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) cols.push_back(cell);
    if (cols.size() != columns)
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                      std::to_string(columns) + " columns, got " + std::to_string(cols.size()));
    rows.push_back(std::move(cols));
  }
  return rows;
}

double parse_real(const std::string& s, const std::filesystem::path& origin) {
  try {
    return std::stod(s);
  } catch (const std::logic_error&) {
    fail(ErrorKind::ParseError, origin.string() + ": bad number '" + s + "'");
  }
}

}  // namespace

std::vector<QueryRecord> load_query_index(const std::filesystem::path& dir) {
  const auto path = dir / "index.tsv";
  std::vector<QueryRecord> out;
  for (const auto& row : read_table(path, 7)) {
    QueryRecord r;
    r.id = row[0];
    r.traversal = row[1];
    r.segment = static_cast<std::size_t>(parse_real(row[2], path));
    r.anchor_world = {parse_real(row[3], path), parse_real(row[4], path), parse_real(row[5], path)};
    r.cloud = dir / row[6];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<DbRecord> load_db_index(const Config& c) {
  const auto dir = c.path("paths.compressed");
  const auto path = dir / "index.tsv";
  std::vector<DbRecord> out;
  for (const auto& row : read_table(path, 5)) {
    DbRecord r;
    r.id = row[0];
    r.anchor_world = {parse_real(row[1], path), parse_real(row[2], path), parse_real(row[3], path)};
    r.compressed = dir / row[4];
    out.push_back(std::move(r));
  }
  if (out.empty()) fail(ErrorKind::EmptyInput, path.string() + " lists no submaps");
  return out;
}

std::vector<bool> holdout_places(std::size_t place_count, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) fail(ErrorKind::ConfigError, "holdout fraction must be in [0, 1)");
  std::vector<std::size_t> order(place_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  synth::CounterRng rng(seed, synth::stream_id("holdout"));
  for (std::size_t i = place_count; i > 1; --i) {
    const auto j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  const auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(place_count) - 1e-9));
  std::vector<bool> out(place_count, false);
  for (std::size_t i = 0; i < held; ++i) out[order[i]] = true;
  return out;
}

std::size_t nearest_place(const Point3& p, const std::vector<DbRecord>& db) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const double d = squared_distance(p, db[i].anchor_world);
    if (d < best_d) best_d = d, best = i;
  }
  return best;
}

Split load_split(const Config& c) {
  const auto db = load_db_index(c);
  const auto queries = load_query_index(c.path("paths.qpc"));
  const auto held = holdout_places(db.size(), c.real("train.holdout_fraction"), c.u64("seed"));
  const double voxel = c.real("grm.query_voxel");
  Split split;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto compressed = gpc::load_compressed(db[i].compressed);
    split.data.database.push_back({db[i].id, db[i].anchor_world, agg::make_input(compressed)});
    if (!held[i]) split.data.train_database.push_back(i);
  }
  for (const auto& q : queries) {
    grm::QueryPointCloud qpc;
    qpc.cloud = load_cloud(q.cloud);
    qpc.anchor_world = q.anchor_world;
    train::Sample s{q.id, q.anchor_world, query_input(qpc, voxel)};
    if (held[nearest_place(q.anchor_world, db)]) {
      split.heldout_query_ids.push_back(q.id);
      split.data.validation.push_back(std::move(s));
    } else {
      split.data.queries.push_back(std::move(s));
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::ostream& out_of(CommandContext& ctx) { return ctx.out ? *ctx.out : std::cout; }
std::ostream& log_of(CommandContext& ctx) { return ctx.log ? *ctx.log : std::cerr; }

int cmd_synth(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto params = benchmark_params(c);
  const auto bench = synth::make_benchmark(params);
  const auto records = synth::write_benchmark(bench, c.path("paths.benchmark"));
  std::size_t queries = 0;
  for (const auto& r : records) queries += r.kind == "query_anchor";
  out_of(ctx) << "world primitives " << bench.world.primitive_count() << ", db submaps " << bench.database.size()
              << ", query traversals " << bench.queries.size() << ", query anchors " << queries << "\n";
  return 0;
}

std::vector<synth::ManifestRecord> manifest_of(const Config& c) {
  return synth::load_manifest(c.path("paths.benchmark") / "manifest.tsv");
}

int cmd_train_gpc(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto dir = c.path("paths.benchmark");
  std::vector<synth::ManifestRecord> db;
  for (auto& r : manifest_of(c))
    if (r.kind == "db_submap") db.push_back(r);
  if (db.empty()) fail(ErrorKind::EmptyInput, "manifest lists no database submaps");
  const std::size_t n = std::min(c.count("gpc.train_scenes"), db.size());
  if (n < 2) fail(ErrorKind::ConfigError, "gpc.train_scenes must select at least 2 submaps");
  std::vector<PointCloud> clouds;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = db[i * db.size() / n];
    clouds.push_back(to_local(load_cloud(dir / r.path), r.anchor));
  }
  gpc::GpcModel model(gpc_config(c));
  gpc::AutoencoderTrainConfig tc;
  tc.epochs = c.count("gpc.epochs");
  tc.learning_rate = c.real("gpc.learning_rate");
  const auto report = gpc::train_autoencoder(model, clouds, tc);
  model.save(c.path("paths.gpc_weights"));
  std::string log = "# epoch\tmean_chamfer\n0\t" + std::to_string(report.initial_loss) + "\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e)
    log += std::to_string(e + 1) + "\t" + std::to_string(report.epoch_loss[e]) + "\n";
  write_text(c.path("paths.logs") / "train_gpc.tsv", log);
  out_of(ctx) << "trained compressor on " << n << " submaps, chamfer " << report.initial_loss << " -> "
              << (report.epoch_loss.empty() ? report.initial_loss : report.epoch_loss.back()) << "\n";
  return 0;
}

int cmd_compress(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto dir = c.path("paths.benchmark");
  const auto model = gpc::GpcModel::load(c.path("paths.gpc_weights"));
  if (!model.frozen()) log_of(ctx) << "warning: compressor checkpoint is not marked frozen\n";
  const auto out_dir = c.path("paths.compressed");
  std::filesystem::create_directories(out_dir);
  std::string index = "# id\tx\ty\tz\tfile\n";
  double ratio_sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : manifest_of(c)) {
    if (r.kind != "db_submap") continue;
    const auto local = to_local(load_cloud(dir / r.path), r.anchor);
    const std::string id = std::filesystem::path(r.path).stem().string();
    const auto compressed = gpc::encode(model, local, id, r.anchor);
    gpc::save_compressed(compressed, out_dir / (id + ".gpcc"));
    index += id + "\t" + fmt_point(r.anchor) + "\t" + id + ".gpcc\n";
    ratio_sum += gpc::compression_ratio(local, compressed);
    ++count;
  }
  if (count == 0) fail(ErrorKind::EmptyInput, "manifest lists no database submaps");
  write_text(out_dir / "index.tsv", index);
  out_of(ctx) << "compressed " << count << " submaps, mean ratio " << ratio_sum / static_cast<double>(count) << "\n";
  return 0;
}

int cmd_refine(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto dir = c.path("paths.benchmark");
  const auto out_dir = c.path("paths.qpc");
  std::filesystem::create_directories(out_dir);
  const auto source = vo_source(c.str("grm.vo_source"));
  grm::DensifyParams densify = grm::densify_params_for(source);
  if (c.count("grm.densify_k") > 0) densify.k_neighbors = c.count("grm.densify_k");
  const grm::FilterParams filter{c.count("grm.filter_k"), c.real("grm.sigma_multiplier")};
  const auto spec = submap_spec(c);
  std::map<std::string, std::string> clouds, trajectories;
  std::vector<std::string> order;
  for (const auto& r : manifest_of(c)) {
    const std::string id = std::filesystem::path(r.path).stem().string();
    if (r.kind == "query_cloud") {
      clouds[id] = r.path;
      order.push_back(id);
    } else if (r.kind == "query_trajectory") {
      trajectories[id] = r.path;
    }
  }
  std::string index = "# id\ttraversal\tsegment\tx\ty\tz\tfile\n";
  std::size_t total = 0, dropped = 0;
  for (const auto& id : order) {
    if (!trajectories.count(id)) fail(ErrorKind::ParseError, "manifest has no trajectory for query cloud " + id);
    const auto traj = grm::load_trajectory(dir / trajectories[id]);
    const auto cloud = load_cloud(dir / clouds[id]);
    grm::QpcResult result;
    try {
      result = grm::build_qpc(traj, cloud, spec, filter, densify, source);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoValidSegments) throw;
      log_of(ctx) << "warning: " << id << ": " << e.what() << "\n";
      continue;
    }
    for (const auto& w : result.warnings)
      log_of(ctx) << "warning: " << id << " segment " << w.segment_index << ": " << w.message << "\n";
    dropped += result.warnings.size();
    for (const auto& q : result.queries) {
      const std::string qid = id + "_s" + (q.segment_index < 10 ? "0" : "") + std::to_string(q.segment_index);
      save_cloud(q.cloud, out_dir / (qid + ".gpc1"));
      index += qid + "\t" + id + "\t" + std::to_string(q.segment_index) + "\t" + fmt_point(q.anchor_world) + "\t" +
               qid + ".gpc1\n";
      ++total;
    }
  }
  write_text(out_dir / "index.tsv", index);
  out_of(ctx) << "refined " << total << " query point clouds (" << dropped << " segments dropped)\n";
  return 0;
}

int cmd_train_agg(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto mode = train::mode_from_string(c.str("train.mode"));
  const auto split = load_split(c);
  const auto init = c.str("paths.agg_init");
  agg::AggregatorModel model =
      init.empty() ? agg::AggregatorModel(aggregator_config(c)) : agg::AggregatorModel::load(init);
  const auto tc = train_config(c, mode);
  const auto log_path = c.path("paths.logs") / ("train_agg_" + std::string(train::to_string(mode)) + ".tsv");
  std::string log = train::metrics_header();
  write_text(log_path, log);
  auto report = train::run_training(model, split.data, tc, [&](const train::EpochMetrics& m) {
    log += train::metrics_line(m);
    write_text(log_path, log);
    log_of(ctx) << train::metrics_line(m);
  });
  model.save(c.path("paths.agg_weights"));
  out_of(ctx) << "trained aggregator (" << train::to_string(mode) << ") for " << report.epochs.size() << " epochs on "
              << (mode == train::TrainMode::Pretrain ? split.data.train_database.size() : split.data.queries.size())
              << " anchors; " << report.skipped.size() << " anchors skipped\n";
  if (!report.epochs.empty())
    out_of(ctx) << "final mean loss " << report.epochs.back().mean_loss << ", held-out recall@1 "
                << report.epochs.back().val_recall_at_1 << "\n";
  return 0;
}

int cmd_build_db(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto model = agg::AggregatorModel::load(c.path("paths.agg_weights"));
  std::vector<retrieval::DbEntry> entries;
  for (const auto& r : load_db_index(c)) {
    const auto compressed = gpc::load_compressed(r.compressed);
    entries.push_back({r.id, retrieval::quantize_f32(agg::aggregate(model, compressed)), r.anchor_world});
  }
  const auto db = retrieval::DescriptorDatabase::build(std::move(entries));
  retrieval::save_database(db, c.path("paths.db"));
  out_of(ctx) << "database of " << db.size() << " descriptors (dim " << db.dim() << ")\n";
  return 0;
}

agg::GlobalDescriptor describe_file(const agg::AggregatorModel& model, const std::filesystem::path& path,
                                    double voxel) {
  if (path.extension() == ".gpcc") return agg::aggregate(model, gpc::load_compressed(path));
  grm::QueryPointCloud qpc;
  qpc.cloud = load_cloud(path);
  return agg::aggregate(model, query_input(qpc, voxel));
}

int cmd_query(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto input = ctx.options.count("input") ? ctx.options.at("input") : std::string{};
  if (input.empty()) fail(ErrorKind::ConfigError, "query needs --input <file.gpcc | QPC cloud>");
  std::size_t k = 5;
  if (ctx.options.count("k")) {
    try {
      k = std::stoul(ctx.options.at("k"));
    } catch (const std::logic_error&) {
      fail(ErrorKind::ConfigError, "--k expects a positive integer");
    }
  }
  const auto db = retrieval::load_database(c.path("paths.db"));
  const auto model = agg::AggregatorModel::load(c.path("paths.agg_weights"));
  const auto d = retrieval::quantize_f32(describe_file(model, input, c.real("grm.query_voxel")));
  auto& out = out_of(ctx);
  out << "# rank\tid\tdistance\tx\ty\tz\n";
  char buf[256];
  const auto hits = retrieval::query_topk(db, d, k);
  for (std::size_t r = 0; r < hits.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%zu\t%s\t%.9g\t%s\n", r + 1, hits[r].id.c_str(), hits[r].distance,
                  fmt_point(db[hits[r].index].centroid_world).c_str());
    out << buf;
  }
  return 0;
}

int cmd_eval(CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto db = retrieval::load_database(c.path("paths.db"));
  const auto model = agg::AggregatorModel::load(c.path("paths.agg_weights"));
  const auto places = load_db_index(c);
  const auto held = holdout_places(places.size(), c.real("train.holdout_fraction"), c.u64("seed"));
  const auto split_mode = c.str("eval.split");
  if (split_mode != "heldout" && split_mode != "all")
    fail(ErrorKind::ConfigError, "eval.split must be heldout or all, got '" + split_mode + "'");
  const double voxel = c.real("grm.query_voxel");
  std::vector<retrieval::EvalQuery> queries;
  for (const auto& q : load_query_index(c.path("paths.qpc"))) {
    if (split_mode == "heldout" && !held[nearest_place(q.anchor_world, places)]) continue;
    grm::QueryPointCloud qpc;
    qpc.cloud = load_cloud(q.cloud);
    queries.push_back({q.id, retrieval::quantize_f32(agg::aggregate(model, query_input(qpc, voxel))), q.anchor_world});
  }
  retrieval::EvalOptions options;
  options.success_radius = c.real("eval.success_radius");
  const auto report = retrieval::evaluate(db, queries, options);
  write_text(c.path("paths.report"), retrieval::to_text(report));
  char buf[256];
  std::snprintf(buf, sizeof buf, "queries %zu, db %zu: recall@1 %.4f, recall@5 %.4f, recall@1%% (K=%zu) %.4f\n",
                report.query_count, report.db_count, report.recall(1), report.recall(std::min<std::size_t>(5, db.size())),
                report.k_one_percent, report.recall_one_percent());
  out_of(ctx) << buf;
  return 0;
}

int cmd_gradcheck(CommandContext& ctx) {
  const auto& c = ctx.config;
  const double tol = c.real("gradcheck.tolerance");
  const auto checks = run_gradchecks(c.count("gradcheck.nc"), c.count("gradcheck.latents"), c.count("gradcheck.dim"),
                                     c.u64("seed"));
  bool ok = true;
  char buf[256];
  for (const auto& l : checks) {
    const bool pass = l.max_rel_error < tol;
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "%-16s max_rel_error %.3e over %zu entries (worst %s) %s\n", l.layer.c_str(),
                  l.max_rel_error, l.checked, l.worst.c_str(), pass ? "ok" : "FAIL");
    out_of(ctx) << buf;
  }
  return ok ? 0 : 4;
}

}  // namespace

const std::vector<Command>& commands() {
  static const std::vector<Command> list{
      {"synth", "generate the synthetic world, database submaps and degraded query traversals",
       {"seed", "paths.benchmark", "paths.logs", "synth.extent", "synth.block_size", "synth.road_width",
        "synth.building_density", "synth.pole_density", "synth.tree_density", "synth.surface_density",
        "synth.route_count", "synth.route_length", "synth.traversals", "synth.lateral_offset_max",
        "synth.heading_jitter_deg", "synth.start_shift_max", "synth.keep_fraction", "synth.noise_sigma",
        "synth.outlier_fraction", "synth.outlier_radius", "synth.density_bias", "submap.extent_x",
        "submap.extent_y", "submap.extent_z", "submap.stride"},
       cmd_synth},
      {"train-gpc", "train the compressor autoencoder on database submaps",
       {"seed", "paths.benchmark", "paths.gpc_weights", "paths.logs", "gpc.train_scenes", "gpc.epochs",
        "gpc.learning_rate"},
       cmd_train_gpc},
      {"compress", "encode every database submap with the frozen compressor",
       {"paths.benchmark", "paths.gpc_weights", "paths.compressed", "paths.logs"},
       cmd_compress},
      {"refine", "turn query traversals into refined query point clouds",
       {"paths.benchmark", "paths.qpc", "paths.logs", "grm.filter_k", "grm.sigma_multiplier", "grm.vo_source",
        "grm.densify_k", "submap.extent_x", "submap.extent_y", "submap.extent_z", "submap.stride"},
       cmd_refine},
      {"train-agg", "train the aggregator (train.mode = pretrain | finetune)",
       {"seed", "paths.compressed", "paths.qpc", "paths.agg_weights", "paths.agg_init", "paths.logs", "agg.feature_dim",
        "agg.latent_count", "agg.descriptor_dim", "agg.blocks", "agg.self_layers", "agg.heads", "agg.tnet_code_dim",
        "train.mode", "train.epochs", "train.lr", "train.positives", "train.negatives", "train.hard_negatives",
        "train.anchors_per_step", "train.alpha", "train.beta", "train.query_side_loss", "train.head_lr_multiplier",
        "train.holdout_fraction", "train.augment_keep_min", "train.augment_jitter",
        "train.augment_feature_drop", "grm.query_voxel"},
       cmd_train_agg},
      {"build-db", "aggregate compressed submaps into a descriptor database",
       {"paths.compressed", "paths.agg_weights", "paths.db", "paths.logs"},
       cmd_build_db},
      {"query", "retrieve the top-K database entries for one submap or query cloud",
       {"paths.db", "paths.agg_weights", "paths.logs", "grm.query_voxel"},
       cmd_query},
      {"eval", "recall@1/@5/@1% of the query point clouds against the database",
       {"seed", "paths.db", "paths.agg_weights", "paths.compressed", "paths.qpc", "paths.report", "paths.logs",
        "eval.success_radius", "eval.split", "train.holdout_fraction", "grm.query_voxel"},
       cmd_eval},
      {"gradcheck", "finite-difference gradient checks of every aggregator layer and the loss",
       {"seed", "paths.logs", "gradcheck.nc", "gradcheck.latents", "gradcheck.dim", "gradcheck.tolerance"},
       cmd_gradcheck},
  };
  return list;
}

const Command& find_command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  fail(ErrorKind::ConfigError, "unknown command '" + name + "'");
}

int run_command(const std::string& name, CommandContext& ctx) {
  const auto& cmd = find_command(name);
  const auto resolved = ctx.config.resolved_text();
  write_text(ctx.config.path("paths.logs") / (name + ".config.toml"), resolved);
  return cmd.run(ctx);
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError: return 2;
    case ErrorKind::TrainingDiverged: return 4;
    case ErrorKind::ContractViolation: return 5;
    default: return 3;
  }
}

// ---------------------------------------------------------------------------
// Gradient checks

std::vector<LayerCheck> run_gradchecks(std::size_t nc, std::size_t latents, std::size_t dim, std::uint64_t seed) {
  agg::AggregatorConfig cfg;
  cfg.feature_dim = dim;
  cfg.latent_count = latents;
  cfg.descriptor_dim = dim;
  cfg.seed = seed;
  agg::AggregatorModel model(cfg);
  std::mt19937_64 rng(seed);
  // Move every parameter off its structured initial value (identity
  // transform, unit gains) so each path carries a generic gradient.
  std::normal_distribution<double> nudge(0.0, 0.05);
  for (auto& [_, p] : model.params().items())
    for (auto& v : p.value.data) v += nudge(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  nn::Tensor input(nc, agg::kInputChannels);
  for (auto& v : input.data) v = unit(rng);
  nn::Tensor probe(cfg.descriptor_dim, 1);
  for (auto& v : probe.data) v = unit(rng) - 0.5;

  auto loss = [&](nn::Graph& g) {
    return g.matmul(agg::forward(g, model, &model.params(), g.constant(input)), g.constant(probe));
  };
  std::vector<std::string> layers{"tnet.", "latents"};
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    layers.push_back("block" + std::to_string(b) + ".cross.");
    for (std::size_t l = 0; l < cfg.self_layers_per_block; ++l)
      layers.push_back("block" + std::to_string(b) + ".self" + std::to_string(l) + ".");
  }
  layers.push_back("final_ln.");
  layers.push_back("head.");
  std::vector<LayerCheck> out;
  for (const auto& prefix : layers) {
    const auto r = nn::gradcheck(model.params(), loss, prefix, 1e-5, 1e-5);
    std::string name = prefix.back() == '.' ? prefix.substr(0, prefix.size() - 1) : prefix;
    out.push_back({name, r.max_rel_error, r.checked, r.worst});
  }

  // Combined loss w.r.t. descriptors, on an instance away from hinge kinks
  // and mining ties.
  const train::LossParams lp;
  nn::ParamStore d;
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_set = [&](std::size_t n) {
    std::vector<train::GlobalDescriptor> v(n);
    for (auto& x : v) {
      x.values.resize(dim);
      for (auto& e : x.values) e = 0.3 * gauss(rng);
    }
    return v;
  };
  auto clear_of_kinks = [&](const train::GlobalDescriptor& a, const std::vector<train::GlobalDescriptor>& pos,
                            const std::vector<train::GlobalDescriptor>& neg) {
    std::vector<double> dp, dn;
    for (const auto& p : pos) dp.push_back(agg::descriptor_distance(a, p));
    for (const auto& n : neg) dn.push_back(agg::descriptor_distance(a, n));
    auto gap = [](std::vector<double> v, bool largest) {
      std::sort(v.begin(), v.end());
      if (v.size() < 2) return static_cast<double>(INFINITY);
      return largest ? v[v.size() - 1] - v[v.size() - 2] : v[1] - v[0];
    };
    const auto m = train::mine(a, pos, neg);
    std::vector<double> dnn;
    for (std::size_t i = 0; i < neg.size(); ++i)
      if (i != m.hardest_negative) dnn.push_back(agg::descriptor_distance(neg[m.hardest_negative], neg[i]));
    const double h1 = dp[m.hardest_positive] - dn[m.hardest_negative] + lp.alpha;
    const double h2 = dp[m.hardest_positive] - *std::min_element(dnn.begin(), dnn.end()) + lp.beta;
    return gap(dp, true) >= 1e-2 && gap(dn, false) >= 1e-2 && gap(dnn, false) >= 1e-2 && std::abs(h1) >= 1e-2 &&
           std::abs(h2) >= 1e-2 && (h1 > 0.0 || h2 > 0.0);
  };
  train::GlobalDescriptor a;
  std::vector<train::GlobalDescriptor> pos, neg, vpos, vneg;
  do {
    a = random_set(1)[0];
    pos = random_set(3);
    neg = random_set(5);
    vpos = random_set(3);
    vneg = random_set(5);
  } while (!clear_of_kinks(a, pos, neg) || !clear_of_kinks(a, vpos, vneg));
  auto put = [&](const std::string& name, const train::GlobalDescriptor& x) {
    d.add(name, nn::Tensor::from(1, dim, x.values));
  };
  put("anchor", a);
  for (std::size_t i = 0; i < 3; ++i) put("pos" + std::to_string(i), pos[i]), put("vpos" + std::to_string(i), vpos[i]);
  for (std::size_t i = 0; i < 5; ++i) put("neg" + std::to_string(i), neg[i]), put("vneg" + std::to_string(i), vneg[i]);
  auto combined = [&](nn::Graph& g) {
    auto rows = [&](const std::string& prefix, std::size_t n) {
      std::vector<nn::Var> v;
      for (std::size_t i = 0; i < n; ++i) v.push_back(g.param(d, prefix + std::to_string(i)));
      return v;
    };
    const nn::Var anchor = g.param(d, "anchor");
    return g.add(train::lazy_quadruplet(g, anchor, rows("pos", 3), rows("neg", 5), lp),
                 train::lazy_quadruplet(g, anchor, rows("vpos", 3), rows("vneg", 5), lp));
  };
  const auto r = nn::gradcheck(d, combined, "", 1e-5, 1e-5);
  out.push_back({"combined_loss", r.max_rel_error, r.checked, r.worst});
  return out;
}

}  // namespace placerec::pipeline

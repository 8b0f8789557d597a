#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "placerec/aggregator.hpp"
#include "placerec/gpc.hpp"
#include "placerec/grm.hpp"
#include "placerec/retrieval.hpp"
#include "placerec/synth.hpp"
#include "placerec/training.hpp"

namespace placerec::pipeline {

// ---------------------------------------------------------------------------
// Run configuration

struct KeySpec {
  std::string name;  // "section.key" or a top-level key
  std::string default_value;
  std::string help;
};

/// Every key the toolkit understands, in display order.
const std::vector<KeySpec>& config_keys();

/// TOML-style key-value configuration: `[section]` headers, `key = value`
/// lines, '#' comments, optional double quotes around strings. Unknown keys
/// are rejected with ConfigError.
class Config {
 public:
  Config();

  void load_text(const std::string& text, const std::string& origin = "<memory>");
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::filesystem::path path(const std::string& key) const { return str(key); }

  /// All keys with their resolved values, grouped by section.
  std::string resolved_text() const;

 private:
  std::map<std::string, std::string> values_;
};

// Parameter blocks built from a config.
synth::BenchmarkParams benchmark_params(const Config& c);
gpc::GpcConfig gpc_config(const Config& c);
agg::AggregatorConfig aggregator_config(const Config& c);
train::TrainConfig train_config(const Config& c, train::TrainMode mode);
grm::SubmapSpec submap_spec(const Config& c);

// ---------------------------------------------------------------------------
// Data preparation shared by the commands

/// Database submap moved into its anchor-centred local frame.
PointCloud to_local(const PointCloud& world_cloud, const Point3& anchor);

/// Aggregator input for a refined query: voxelised in the normalised frame
/// (cell `voxel`), zero feature channels.
nn::Tensor query_input(const grm::QueryPointCloud& qpc, double voxel);

struct QueryRecord {
  std::string id;         // "<traversal>_s<segment>"
  std::string traversal;
  std::size_t segment = 0;
  Point3 anchor_world;
  std::filesystem::path cloud;  // normalised QPC (GPC1)
};

std::vector<QueryRecord> load_query_index(const std::filesystem::path& dir);

struct DbRecord {
  std::string id;
  Point3 anchor_world;
  std::filesystem::path compressed;  // GPCC file
};

std::vector<DbRecord> load_db_index(const Config& c);

/// Places held out of training: round-up 10% (holdout_fraction) of the
/// database ids, chosen by a seeded shuffle.
std::vector<bool> holdout_places(std::size_t place_count, double fraction, std::uint64_t seed);

/// Index of the nearest database anchor (lowest index on ties).
std::size_t nearest_place(const Point3& p, const std::vector<DbRecord>& db);

struct Split {
  train::TrainingData data;
  std::vector<std::string> heldout_query_ids;
};

/// Loads compressed database submaps and refined queries and splits the
/// queries by place into training and held-out sets.
Split load_split(const Config& c);

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  Config config;
  std::map<std::string, std::string> options;  // command-specific flags (e.g. query --input)
  std::ostream* out = nullptr;
  std::ostream* log = nullptr;
};

struct Command {
  std::string name;
  std::string summary;
  std::vector<std::string> keys;  // config keys read
  std::function<int(CommandContext&)> run;
};

const std::vector<Command>& commands();
const Command& find_command(const std::string& name);

/// Runs a command, logging the resolved config first. Library errors
/// propagate as exceptions; see exit_code_for.
int run_command(const std::string& name, CommandContext& ctx);

/// 2 config, 3 input, 4 numerical, 5 internal invariant.
int exit_code_for(ErrorKind kind);

// ---------------------------------------------------------------------------
// Gradient checks

struct LayerCheck {
  std::string layer;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Central-difference checks for every aggregator layer (parameter group)
/// and for the combined loss w.r.t. descriptors.
std::vector<LayerCheck> run_gradchecks(std::size_t nc, std::size_t latents, std::size_t dim, std::uint64_t seed);

}  // namespace placerec::pipeline

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "placerec/aggregator.hpp"

namespace placerec::agg {

void AggregatorConfig::validate() const {
  if (feature_dim == 0 || latent_count == 0 || descriptor_dim == 0 || heads == 0 || tnet_code_dim == 0)
    fail(ErrorKind::ConfigError, "aggregator dimensions must be positive");
  if (feature_dim % heads != 0)
    fail(ErrorKind::ConfigError, "feature_dim " + std::to_string(feature_dim) + " not divisible by heads " +
                                     std::to_string(heads));
  if (blocks == 0) fail(ErrorKind::ConfigError, "aggregator needs at least one block");
}

std::string to_text(const AggregatorConfig& c) {
  std::ostringstream s;
  s << "feature_dim = " << c.feature_dim << "\n"
    << "latent_count = " << c.latent_count << "\n"
    << "descriptor_dim = " << c.descriptor_dim << "\n"
    << "blocks = " << c.blocks << "\n"
    << "self_layers_per_block = " << c.self_layers_per_block << "\n"
    << "heads = " << c.heads << "\n"
    << "tnet_code_dim = " << c.tnet_code_dim << "\n"
    << "seed = " << c.seed << "\n";
  return s.str();
}

AggregatorConfig config_from_text(const std::string& text, const std::string& origin) {
  AggregatorConfig c;
  std::map<std::string, std::size_t*> sizes{{"feature_dim", &c.feature_dim},
                                            {"latent_count", &c.latent_count},
                                            {"descriptor_dim", &c.descriptor_dim},
                                            {"blocks", &c.blocks},
                                            {"self_layers_per_block", &c.self_layers_per_block},
                                            {"heads", &c.heads},
                                            {"tnet_code_dim", &c.tnet_code_dim}};
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos)
      fail(ErrorKind::ParseError, origin + ": expected 'key = value' at line " + std::to_string(line_no));
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      if (key == "seed") {
        c.seed = std::stoull(value);
      } else if (auto it = sizes.find(key); it != sizes.end()) {
        *it->second = std::stoull(value);
      } else {
        fail(ErrorKind::ConfigError, origin + ": unknown key '" + key + "' at line " + std::to_string(line_no));
      }
    } catch (const std::logic_error&) {
      fail(ErrorKind::ParseError, origin + ": bad value for '" + key + "' at line " + std::to_string(line_no));
    }
  }
  c.validate();
  return c;
}

double descriptor_distance(const GlobalDescriptor& a, const GlobalDescriptor& b) {
  if (a.size() != b.size())
    fail(ErrorKind::ShapeError, "descriptor dims differ: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Inputs

nn::Tensor make_input(std::span<const Point3> points, std::span<const double> features, std::size_t feature_dim,
                      bool normalize) {
  if (points.empty()) fail(ErrorKind::EmptyInput, "aggregate of an empty point set");
  if (feature_dim > kInputChannels - 3) fail(ErrorKind::ShapeError, "at most 3 feature channels are supported");
  if (features.size() != points.size() * feature_dim)
    fail(ErrorKind::ShapeError, "feature count does not match point count");
  Point3 origin;
  double scale = 1.0;
  if (normalize) {
    const Aabb box = bounds(points);
    origin = box.min_corner;
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent = std::max(extent, box.max_corner[a] - box.min_corner[a]);
    scale = extent > 0.0 ? 1.0 / extent : 0.0;
  }
  nn::Tensor t(points.size(), kInputChannels);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int a = 0; a < 3; ++a) t.at(i, static_cast<std::size_t>(a)) = (points[i][a] - origin[a]) * scale;
    for (std::size_t c = 0; c < feature_dim; ++c) t.at(i, 3 + c) = features[i * feature_dim + c];
  }
  return t;
}

nn::Tensor make_input(const gpc::CompressedSubmap& submap) {
  return make_input(submap.points, submap.features, gpc::CompressedSubmap::kFeatureDim, true);
}

nn::Tensor make_input(const grm::QueryPointCloud& query) {
  return make_input(query.cloud.points, {}, 0, false);
}

// ---------------------------------------------------------------------------
// Model

namespace {

void add_attention_params(nn::ParamStore& p, const std::string& prefix, std::size_t d, bool cross,
                          std::mt19937_64& rng) {
  p.add(prefix + ".ln_q.gamma", nn::Tensor(1, d, 1.0));
  p.add(prefix + ".ln_q.beta", nn::Tensor(1, d, 0.0));
  if (cross) {
    p.add(prefix + ".ln_kv.gamma", nn::Tensor(1, d, 1.0));
    p.add(prefix + ".ln_kv.beta", nn::Tensor(1, d, 0.0));
  }
  for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) p.add(prefix + "." + w, nn::uniform_init(d, d, d, rng));
  p.add(prefix + ".bo", nn::Tensor(1, d, 0.0));
}

std::string block_prefix(std::size_t b) { return "block" + std::to_string(b); }

nn::Var reshape(nn::Graph& g, nn::Var x, std::size_t rows, std::size_t cols) {
  nn::Tensor out = g.value(x);
  if (out.numel() != rows * cols)
    fail(ErrorKind::ShapeError, "cannot reshape " + nn::shape_string(out.shape) + " to " +
                                    nn::shape_string({rows, cols}));
  out.shape = {rows, cols};
  const nn::Var self{static_cast<std::int32_t>(g.node_count())};
  return g.custom(std::move(out), {x}, [x, self](nn::Graph& gr) {
    const auto& go = gr.grad(self);
    auto& gx = gr.grad(x);
    for (std::size_t i = 0; i < go.numel(); ++i) gx.data[i] += go.data[i];
  });
}

nn::Var multi_head_attention(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, const std::string& prefix,
                             nn::Var queries, nn::Var keys_values) {
  const auto& store = m.params();
  const std::size_t d = m.config().feature_dim;
  const std::size_t heads = m.config().heads;
  const std::size_t dh = d / heads;
  const nn::Var q = g.matmul(queries, g.param(store, tr, prefix + ".Wq"));
  const nn::Var k = g.matmul(keys_values, g.param(store, tr, prefix + ".Wk"));
  const nn::Var v = g.matmul(keys_values, g.param(store, tr, prefix + ".Wv"));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<nn::Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const nn::Var qh = heads == 1 ? q : g.slice_cols(q, h * dh, (h + 1) * dh);
    const nn::Var kh = heads == 1 ? k : g.slice_cols(k, h * dh, (h + 1) * dh);
    const nn::Var vh = heads == 1 ? v : g.slice_cols(v, h * dh, (h + 1) * dh);
    // Scores are (query rows) x (key rows); for cross-attention N_t x Nc.
    const nn::Var scores = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), inv_sqrt));
    outputs.push_back(g.matmul(scores, vh));
  }
  const nn::Var merged = heads == 1 ? outputs.front() : g.concat_cols(outputs);
  return g.add_row(g.matmul(merged, g.param(store, tr, prefix + ".Wo")), g.param(store, tr, prefix + ".bo"));
}

}  // namespace

AggregatorModel::AggregatorModel(AggregatorConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.feature_dim;
  const std::size_t code = config_.tnet_code_dim;
  auto& p = params_;
  p.add("tnet.lift1.W", nn::uniform_init(kInputChannels, d, kInputChannels, rng));
  p.add("tnet.lift1.b", nn::uniform_init(1, d, kInputChannels, rng));
  p.add("tnet.lift2.W", nn::uniform_init(d, d, d, rng));
  p.add("tnet.lift2.b", nn::uniform_init(1, d, d, rng));
  p.add("tnet.code.W", nn::uniform_init(d, code, d, rng));
  p.add("tnet.code.b", nn::uniform_init(1, code, d, rng));
  // Transform predictor starts at exactly the identity.
  p.add("tnet.transform.W", nn::Tensor(code, d * d, 0.0));
  nn::Tensor identity(1, d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) identity.data[i * d + i] = 1.0;
  p.add("tnet.transform.b", std::move(identity));

  p.add("latents", nn::gaussian_init(config_.latent_count, d, 0.02, rng));
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    add_attention_params(p, block_prefix(b) + ".cross", d, true, rng);
    for (std::size_t l = 0; l < config_.self_layers_per_block; ++l)
      add_attention_params(p, block_prefix(b) + ".self" + std::to_string(l), d, false, rng);
  }
  p.add("final_ln.gamma", nn::Tensor(1, d, 1.0));
  p.add("final_ln.beta", nn::Tensor(1, d, 0.0));
  p.add("head.fc1.W", nn::uniform_init(d, d, d, rng));
  p.add("head.fc1.b", nn::uniform_init(1, d, d, rng));
  p.add("head.fc2.W", nn::uniform_init(d, config_.descriptor_dim, d, rng));
  p.add("head.fc2.b", nn::uniform_init(1, config_.descriptor_dim, d, rng));
}

AggregatorModel::AggregatorModel(AggregatorConfig config, nn::ParamStore params) : AggregatorModel(config) {
  for (auto& [name, p] : params_.items()) {
    if (!params.contains(name)) fail(ErrorKind::ParseError, "checkpoint lacks parameter '" + name + "'");
    const auto& src = params.get(name);
    if (src.value.shape != p.value.shape)
      fail(ErrorKind::ParseError, "checkpoint parameter '" + name + "' has shape " +
                                      nn::shape_string(src.value.shape) + ", expected " +
                                      nn::shape_string(p.value.shape));
    p.value = src.value;
    p.lr_multiplier = src.lr_multiplier;
  }
  if (params.size() != params_.size()) fail(ErrorKind::ParseError, "checkpoint has unexpected extra parameters");
}

void AggregatorModel::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(path.string() + ".cfg", std::ios::trunc);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string() + ".cfg");
  out << to_text(config_);
}

AggregatorModel AggregatorModel::load(const std::filesystem::path& path) {
  const std::string cfg_path = path.string() + ".cfg";
  std::ifstream in(cfg_path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + cfg_path);
  std::stringstream buf;
  buf << in.rdbuf();
  return AggregatorModel(config_from_text(buf.str(), cfg_path), nn::ParamStore::load(path));
}

// ---------------------------------------------------------------------------
// Forward

nn::Var tnet_transform(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, nn::Var input) {
  const auto& s = m.params();
  const std::size_t d = m.config().feature_dim;
  if (g.value(input).cols() != kInputChannels)
    fail(ErrorKind::ShapeError, "aggregator input must have 6 channels, got " + nn::shape_string(g.value(input).shape));
  nn::Var lifted = g.relu(g.add_row(g.matmul(input, g.param(s, tr, "tnet.lift1.W")), g.param(s, tr, "tnet.lift1.b")));
  lifted = g.add_row(g.matmul(lifted, g.param(s, tr, "tnet.lift2.W")), g.param(s, tr, "tnet.lift2.b"));
  const nn::Var code = g.relu(
      g.add_row(g.matmul(g.reduce_max_rows(lifted), g.param(s, tr, "tnet.code.W")), g.param(s, tr, "tnet.code.b")));
  const nn::Var flat = g.add_row(g.matmul(code, g.param(s, tr, "tnet.transform.W")), g.param(s, tr, "tnet.transform.b"));
  return g.matmul(lifted, reshape(g, flat, d, d));
}

nn::Var cross_attention(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, const std::string& prefix,
                        nn::Var latents, nn::Var features) {
  const auto& s = m.params();
  const nn::Var q = g.layer_norm_rows(latents, g.param(s, tr, prefix + ".ln_q.gamma"), g.param(s, tr, prefix + ".ln_q.beta"));
  const nn::Var kv =
      g.layer_norm_rows(features, g.param(s, tr, prefix + ".ln_kv.gamma"), g.param(s, tr, prefix + ".ln_kv.beta"));
  return g.add(latents, multi_head_attention(g, m, tr, prefix, q, kv));
}

nn::Var self_attention(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, const std::string& prefix,
                       nn::Var latents) {
  const auto& s = m.params();
  const nn::Var x = g.layer_norm_rows(latents, g.param(s, tr, prefix + ".ln_q.gamma"), g.param(s, tr, prefix + ".ln_q.beta"));
  return g.add(latents, multi_head_attention(g, m, tr, prefix, x, x));
}

nn::Var descriptor_head(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, nn::Var latents) {
  const auto& s = m.params();
  const nn::Var normed =
      g.layer_norm_rows(latents, g.param(s, tr, "final_ln.gamma"), g.param(s, tr, "final_ln.beta"));
  nn::Var x = g.mean_rows(normed);
  x = g.relu(g.add_row(g.matmul(x, g.param(s, tr, "head.fc1.W")), g.param(s, tr, "head.fc1.b")));
  x = g.add_row(g.matmul(x, g.param(s, tr, "head.fc2.W")), g.param(s, tr, "head.fc2.b"));
  return g.l2_normalize_rows(x);
}

nn::Var forward(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* tr, nn::Var input) {
  if (g.value(input).rows() == 0) fail(ErrorKind::EmptyInput, "aggregate of an empty point set");
  const nn::Var features = tnet_transform(g, m, tr, input);
  nn::Var latents = g.param(m.params(), tr, "latents");
  for (std::size_t b = 0; b < m.config().blocks; ++b) {
    const auto prefix = block_prefix(b);
    latents = cross_attention(g, m, tr, prefix + ".cross", latents, features);
    for (std::size_t l = 0; l < m.config().self_layers_per_block; ++l)
      latents = self_attention(g, m, tr, prefix + ".self" + std::to_string(l), latents);
  }
  return descriptor_head(g, m, tr, latents);
}

GlobalDescriptor aggregate(const AggregatorModel& model, const nn::Tensor& input) {
  if (input.rows() == 0) fail(ErrorKind::EmptyInput, "aggregate of an empty point set");
  nn::Graph g(false);
  const auto out = forward(g, model, nullptr, g.constant(input));
  const auto& v = g.value(out);
  return GlobalDescriptor{std::vector<double>(v.data.begin(), v.data.end())};
}

GlobalDescriptor aggregate(const AggregatorModel& model, const gpc::CompressedSubmap& submap) {
  return aggregate(model, make_input(submap));
}

GlobalDescriptor aggregate(const AggregatorModel& model, const grm::QueryPointCloud& query) {
  return aggregate(model, make_input(query));
}

}  // namespace placerec::agg

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "placerec/gpc.hpp"
#include "placerec/grm.hpp"
#include "placerec/tensor_nn.hpp"

namespace placerec::agg {

struct AggregatorConfig {
  std::size_t feature_dim = 256;     // D
  std::size_t latent_count = 32;     // N_t
  std::size_t descriptor_dim = 256;
  std::size_t blocks = 2;
  std::size_t self_layers_per_block = 4;
  std::size_t heads = 4;
  std::size_t tnet_code_dim = 16;    // width of the pooled code that predicts the transform
  std::uint64_t seed = 11;

  void validate() const;
};

/// Key-value text (`key = value` per line, '#' comments). Unknown keys are
/// rejected.
std::string to_text(const AggregatorConfig& config);
AggregatorConfig config_from_text(const std::string& text, const std::string& origin = "<memory>");

struct GlobalDescriptor {
  std::vector<double> values;
  std::size_t size() const { return values.size(); }
};

double descriptor_distance(const GlobalDescriptor& a, const GlobalDescriptor& b);

/// Number of input channels: xyz + 3 feature channels.
inline constexpr std::size_t kInputChannels = 6;

/// Builds the Nc x 6 network input of a compressed submap. Coordinates are
/// mapped into the unit frame with the same uniform min-corner scaling the
/// query side uses, so both sides share one coordinate convention.
nn::Tensor make_input(const gpc::CompressedSubmap& submap);
/// Query clouds carry no learned features: channels 3..5 are zero.
nn::Tensor make_input(const grm::QueryPointCloud& query);
nn::Tensor make_input(std::span<const Point3> points, std::span<const double> features, std::size_t feature_dim,
                      bool normalize);

/// Latent-attention aggregation network. Parameters:
///   tnet.*            shared lift MLP and transform predictor
///   latents           N_t x D
///   block<b>.cross.*  cross-attention (Q latents, K/V from F_a)
///   block<b>.self<l>.*
///   head.*            final MLP (the fine-tuning "last MLP")
class AggregatorModel {
 public:
  explicit AggregatorModel(AggregatorConfig config = {});
  AggregatorModel(AggregatorConfig config, nn::ParamStore params);

  const AggregatorConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Writes the AGGW checkpoint at `path` and the config next to it
  /// (`path` + ".cfg").
  void save(const std::filesystem::path& path) const;
  static AggregatorModel load(const std::filesystem::path& path);

 private:
  AggregatorConfig config_;
  nn::ParamStore params_;
};

inline constexpr std::string_view kHeadPrefix = "head.";

// Individual stages, exposed for testing and gradient checks. `trainable`
// is the model's own store when gradients are wanted, otherwise null.

/// Lifts each 6-vector to D and applies the predicted D x D transform.
nn::Var tnet_transform(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* trainable, nn::Var input);
/// Pre-norm multi-head cross-attention with residual; scores are N_t x Nc.
nn::Var cross_attention(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* trainable, const std::string& prefix,
                        nn::Var latents, nn::Var features);
/// Pre-norm multi-head self-attention over the latents with residual.
nn::Var self_attention(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* trainable, const std::string& prefix,
                       nn::Var latents);
/// Mean-pool -> MLP -> L2 normalise.
nn::Var descriptor_head(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* trainable, nn::Var latents);

/// Full network; returns the 1 x descriptor_dim unit descriptor.
nn::Var forward(nn::Graph& g, const AggregatorModel& m, nn::ParamStore* trainable, nn::Var input);

GlobalDescriptor aggregate(const AggregatorModel& model, const nn::Tensor& input);
GlobalDescriptor aggregate(const AggregatorModel& model, const gpc::CompressedSubmap& submap);
GlobalDescriptor aggregate(const AggregatorModel& model, const grm::QueryPointCloud& query);

}  // namespace placerec::agg

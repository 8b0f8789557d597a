#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "placerec/pc_core.hpp"
#include "placerec/tensor_nn.hpp"

namespace placerec::gpc {

/// Rigid kernel-point convolution parameters. `weights` stacks one
/// in_dim x out_dim map per kernel point: shape (K * in_dim) x out_dim.
struct KpconvParams {
  std::vector<Point3> kernel_points;
  double influence_radius = 0.1;
  nn::Tensor weights;

  std::size_t kernel_count() const { return kernel_points.size(); }
  std::size_t in_dim() const { return kernel_points.empty() ? 0 : weights.rows() / kernel_points.size(); }
  std::size_t out_dim() const { return weights.cols(); }
};

/// Center plus a 14-point shell (6 axis + 8 diagonal directions) at 0.95 sigma.
std::vector<Point3> default_kernel_points(double influence_radius);
/// default_kernel_points for count 15, otherwise center + Fibonacci shell.
std::vector<Point3> kernel_points_for(std::size_t count, double influence_radius);

/// Sparse influence structure for one point set: for point i, entries
/// (j, k, h) with h = max(0, 1 - |p_j - p_i - x_k| / sigma) > 0 over the
/// ball of `neighbor_radius` (self included).
struct KernelNeighborhood {
  struct Entry {
    std::uint32_t neighbor;
    std::uint16_t kernel;
    double weight;
  };
  std::vector<std::uint32_t> offsets;  // CSR row starts, size n + 1
  std::vector<Entry> entries;
  std::vector<std::uint32_t> ball_size;  // neighbours in the ball, self included
  std::size_t kernel_count = 0;

  std::size_t point_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

KernelNeighborhood build_neighborhood(std::span<const Point3> points, std::span<const Point3> kernel_points,
                                      double influence_radius, double neighbor_radius);

/// f'_i = sum_{j in ball(i)} sum_k h(p_j - p_i, x_k) W_k^T f_j.
nn::Tensor kpconv_forward(const PointCloud& cloud, const KpconvParams& params, double neighbor_radius);

/// Graph op: gathers kernel-weighted neighbour features into an
/// n x (K * in_dim) matrix. Multiplying by the stacked weights completes the
/// convolution.
nn::Var kernel_gather(nn::Graph& graph, nn::Var features, const KernelNeighborhood& neighborhood);

struct GpcConfig {
  std::array<double, 3> grid_sizes{0.1, 0.5, 1.0};
  std::array<std::size_t, 3> feature_widths{16, 32, 32};
  std::size_t kernel_point_count = 15;
  double neighbor_radius_factor = 2.5;
  std::array<std::size_t, 4> decoder_factors{2, 2, 2, 2};
  std::size_t decoder_width = 16;
  std::uint64_t seed = 7;
};

struct CompressedSubmap {
  std::vector<Point3> points;   // submap-local metres
  std::vector<double> features; // Nc x 3, row-major
  std::string source_id;
  Point3 centroid_world;

  static constexpr std::size_t kFeatureDim = 3;
  std::size_t size() const { return points.size(); }
  /// points + features as a 6-channel cloud.
  PointCloud as_cloud() const;
};

/// Three KPConv-downsampling encoder blocks, a 3-wide linear head, and a
/// four-block expansion decoder. Parameter names:
///   enc.<b>.W          (K * in) x out, b = 0..2
///   enc.head.W / .b    32 x 3 / 1 x 3
///   dec.<b>.<c>.W/.b/.U  per decoder block b and child slot c
class GpcModel {
 public:
  explicit GpcModel(GpcConfig config = {});

  const GpcConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  KpconvParams block_params(std::size_t block) const;
  double neighbor_radius(std::size_t block) const { return config_.neighbor_radius_factor * config_.grid_sizes[block]; }

  void save(const std::filesystem::path& path) const;
  static GpcModel load(const std::filesystem::path& path);

 private:
  GpcConfig config_;
  nn::ParamStore params_;
  bool frozen_ = false;
};

/// Precomputed geometry of the encoder cascade for one input cloud. The
/// cascade depends only on coordinates, so training reuses it across steps.
struct EncoderPlan {
  std::array<std::vector<Point3>, 4> stage_points;  // input, after block 0, 1, 2
  std::array<KernelNeighborhood, 3> neighborhoods;
  std::array<VoxelAssignment, 3> pooling;
};

EncoderPlan plan_encoder(const GpcModel& model, const PointCloud& cloud);

/// Encoder forward on a graph; returns the Nc x 3 head output. Parameters
/// are trainable leaves when `trainable` is non-null (it must be the model's
/// own store).
nn::Var encode_graph(nn::Graph& graph, const GpcModel& model, nn::ParamStore* trainable, const EncoderPlan& plan);

/// Decoder forward; returns (Nc * prod(factors)) x 3 positions.
nn::Var decode_graph(nn::Graph& graph, const GpcModel& model, nn::ParamStore* trainable,
                     std::span<const Point3> compressed_points, nn::Var compressed_features);

CompressedSubmap encode(const GpcModel& model, const PointCloud& cloud, std::string source_id = {},
                        Point3 centroid_world = {});
PointCloud decode(const GpcModel& model, const CompressedSubmap& compressed);

/// Symmetric mean nearest-neighbour distance: 0.5 * (mean_a d(a, B) + mean_b d(b, A)).
double chamfer_distance(std::span<const Point3> a, std::span<const Point3> b);

/// Graph op: Chamfer distance between predicted positions (n x 3) and a
/// fixed target set. Nearest-neighbour assignments are held constant in the
/// backward pass.
nn::Var chamfer_graph(nn::Graph& graph, nn::Var predicted, std::span<const Point3> target, const KdTree& target_tree);

struct AutoencoderTrainConfig {
  std::size_t epochs = 40;
  double learning_rate = 5e-3;
};

struct AutoencoderTrainReport {
  std::vector<double> epoch_loss;  // mean Chamfer over clouds, per epoch
  double initial_loss = 0.0;
};

/// Minimises the reconstruction Chamfer distance with Adam, one step per
/// cloud, clouds visited in order. Sets the frozen flag on return.
AutoencoderTrainReport train_autoencoder(GpcModel& model, std::span<const PointCloud> clouds,
                                         const AutoencoderTrainConfig& config);

/// Reconstruction loss of a single cloud through encode + decode.
double reconstruction_chamfer(const GpcModel& model, const PointCloud& cloud);

/// (N * 3) / (Nc * 6).
double compression_ratio(const PointCloud& original, const CompressedSubmap& compressed);

void save_compressed(const CompressedSubmap& submap, const std::filesystem::path& path);
CompressedSubmap load_compressed(const std::filesystem::path& path);

}  // namespace placerec::gpc

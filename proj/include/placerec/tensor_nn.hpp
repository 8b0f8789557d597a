#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "placerec/error.hpp"

namespace placerec::nn {

// ---------------------------------------------------------------------------
// Allocation accounting. Tensor buffers go through TrackingAllocator so tests
// can measure the peak transient footprint of a forward pass.

struct MemoryStats {
  std::size_t current_bytes = 0;
  std::size_t peak_bytes = 0;
};

MemoryStats& memory_stats();
void reset_peak_memory();

template <typename T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& s = memory_stats();
    s.current_bytes += n * sizeof(T);
    if (s.current_bytes > s.peak_bytes) s.peak_bytes = s.current_bytes;
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    memory_stats().current_bytes -= n * sizeof(T);
    std::allocator<T>{}.deallocate(p, n);
  }
  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;

/// Dense row-major tensor. Most of the network uses rank 2 (rows x cols);
/// vectors are 1 x n.
struct Tensor {
  std::vector<std::size_t> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  static Tensor from(std::size_t rows, std::size_t cols, std::span<const double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? 1 : numel() / shape.front(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double* row(std::size_t r) { return data.data() + r * cols(); }
  const double* row(std::size_t r) const { return data.data() + r * cols(); }

  bool all_finite() const;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Raw kernels (C += op(A) * op(B)); exposed for the few custom ops that need
// them.
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c);  // c[m,n] += a[m,k] b[k,n]
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c);  // c[m,n] += a[m,k] b[n,k]^T
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c);  // c[k,n] += a[m,k]^T b[m,n]

// ---------------------------------------------------------------------------
// Parameters

struct Param {
  Tensor value;
  Tensor grad;
  double lr_multiplier = 1.0;
  Tensor adam_m;
  Tensor adam_v;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Named parameters in a stable (lexicographic) order.
class ParamStore {
 public:
  Param& add(const std::string& name, Tensor value, double lr_multiplier = 1.0);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  std::map<std::string, Param>& items() { return params_; }
  const std::map<std::string, Param>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Adam with per-parameter learning-rate multipliers.
  void adam_step(const AdamConfig& config);
  std::uint64_t step_count() const { return steps_; }

  void set_lr_multiplier(const std::string& prefix, double multiplier);

  void save(const std::filesystem::path& path) const;
  static ParamStore load(const std::filesystem::path& path);
  std::vector<std::uint8_t> serialize() const;
  static ParamStore deserialize(std::vector<std::uint8_t> bytes, const std::string& origin);

 private:
  std::map<std::string, Param> params_;
  std::uint64_t steps_ = 0;
};

/// Uniform init in [-s, s], s = 1/sqrt(fan_in).
Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, std::mt19937_64& rng);
Tensor gaussian_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Recorded computation graph

class Graph;

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// creation order is a valid topological order for backward.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  /// Leaf bound to a stored parameter; gradients flow back into Param::grad.
  /// The leaf references the stored tensor, which must outlive the graph.
  Var param(ParamStore& store, const std::string& name);
  /// Non-trainable leaf referencing a stored parameter.
  Var param(const ParamStore& store, const std::string& name);
  /// Trainable when `trainable` is non-null, otherwise a frozen leaf.
  Var param(const ParamStore& store, ParamStore* trainable, const std::string& name) {
    return trainable ? param(*trainable, name) : param(store, name);
  }

  const Tensor& value(Var v) const {
    const auto& node = nodes_[check(v)];
    return node.external ? *node.external : node.value;
  }
  Tensor& grad(Var v);
  bool has_grad(Var v) const { return !nodes_[check(v)].grad.data.empty(); }
  std::size_t node_count() const { return nodes_.size(); }

  /// Generic node for module-specific ops. `backward` reads grad(out) and
  /// accumulates into the parents' grads.
  Var custom(Tensor value, std::vector<Var> parents, BackwardFn backward);
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Standard ops.
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_row(Var a, Var bias);
  Var scale(Var a, double s);
  Var relu(Var a);
  Var tanh(Var a);
  Var softmax_rows(Var a);
  Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var reduce_max_rows(Var a);
  Var mean_rows(Var a);
  Var sum_all(Var a);
  Var l2_normalize_rows(Var a, double eps = 1e-12);
  /// Euclidean distance between two 1 x n rows; returns a 1 x 1 scalar.
  Var distance(Var a, Var b);
  /// 1 x 1 scalar sum of scalars.
  Var add_scalars(const std::vector<Var>& terms);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Param* param = nullptr;
    const Tensor* external = nullptr;
    bool requires_grad = false;
  };

  std::size_t check(Var v) const;
  Var push(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  bool record_;
  std::vector<Node> nodes_;
  std::map<const Param*, Var> param_nodes_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<param>[<index>]"
};

/// Compares backward() against central differences for every entry of the
/// parameters whose name starts with `prefix`. `loss` must build a scalar on
/// the given graph, binding parameters of `store` as trainable leaves.
/// Relative error: |a - n| / max(|a|, |n|, floor).
GradcheckResult gradcheck(ParamStore& store, const std::function<Var(Graph&)>& loss, const std::string& prefix = "",
                          double eps = 1e-6, double floor = 1e-6);

}  // namespace placerec::nn

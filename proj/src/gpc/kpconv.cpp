#include <cmath>
#include <numbers>

#include "placerec/gpc.hpp"

namespace placerec::gpc {

std::vector<Point3> default_kernel_points(double influence_radius) {
  std::vector<Point3> dirs{{0, 0, 0}};
  for (int a = 0; a < 3; ++a) {
    for (double s : {1.0, -1.0}) {
      Point3 d;
      d[a] = s;
      dirs.push_back(d);
    }
  }
  const double c = 1.0 / std::sqrt(3.0);
  for (double sx : {1.0, -1.0})
    for (double sy : {1.0, -1.0})
      for (double sz : {1.0, -1.0}) dirs.push_back({sx * c, sy * c, sz * c});
  for (auto& d : dirs) d = d * (0.95 * influence_radius);
  return dirs;
}

namespace {

// Center plus a Fibonacci shell, for kernel counts other than 15.
std::vector<Point3> fibonacci_kernel_points(std::size_t count, double influence_radius) {
  std::vector<Point3> out{{0, 0, 0}};
  const std::size_t shell = count - 1;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < shell; ++i) {
    const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(shell);
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double t = golden * static_cast<double>(i);
    out.push_back(Point3{r * std::cos(t), y, r * std::sin(t)} * (0.95 * influence_radius));
  }
  return out;
}

}  // namespace

std::vector<Point3> kernel_points_for(std::size_t count, double influence_radius) {
  if (count == 0) fail(ErrorKind::ContractViolation, "kernel point count must be positive");
  if (count == 15) return default_kernel_points(influence_radius);
  return fibonacci_kernel_points(count, influence_radius);
}

KernelNeighborhood build_neighborhood(std::span<const Point3> points, std::span<const Point3> kernel_points,
                                      double influence_radius, double neighbor_radius) {
  if (!(influence_radius > 0.0) || !(neighbor_radius > 0.0))
    fail(ErrorKind::ContractViolation, "kpconv radii must be positive");
  KernelNeighborhood nb;
  nb.kernel_count = kernel_points.size();
  nb.offsets.reserve(points.size() + 1);
  nb.offsets.push_back(0);
  nb.ball_size.reserve(points.size());
  const KdTree tree(points);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto ball = tree.radius_search(points[i], neighbor_radius);
    nb.ball_size.push_back(static_cast<std::uint32_t>(ball.size()));
    for (auto j : ball) {
      const Point3 rel = points[j] - points[i];
      for (std::size_t k = 0; k < kernel_points.size(); ++k) {
        const double h = 1.0 - distance(rel, kernel_points[k]) / influence_radius;
        if (h > 0.0) nb.entries.push_back({static_cast<std::uint32_t>(j), static_cast<std::uint16_t>(k), h});
      }
    }
    nb.offsets.push_back(static_cast<std::uint32_t>(nb.entries.size()));
  }
  return nb;
}

namespace {

nn::Tensor gather_values(const nn::Tensor& features, const KernelNeighborhood& nb) {
  const std::size_t c = features.cols();
  const std::size_t n = nb.point_count();
  nn::Tensor out(n, nb.kernel_count * c);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.row(i);
    for (auto e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) {
      const auto& entry = nb.entries[e];
      const double* f = features.row(entry.neighbor);
      double* dst = row + static_cast<std::size_t>(entry.kernel) * c;
      for (std::size_t q = 0; q < c; ++q) dst[q] += entry.weight * f[q];
    }
  }
  return out;
}

}  // namespace

nn::Var kernel_gather(nn::Graph& graph, nn::Var features, const KernelNeighborhood& nb) {
  const auto& f = graph.value(features);
  if (f.rows() != nb.point_count())
    fail(ErrorKind::ShapeError, "kernel_gather: " + std::to_string(f.rows()) + " feature rows for " +
                                    std::to_string(nb.point_count()) + " points");
  const std::size_t c = f.cols();
  auto out = gather_values(f, nb);
  const nn::Var self{static_cast<std::int32_t>(graph.node_count())};
  return graph.custom(std::move(out), {features}, [features, self, c, &nb](nn::Graph& g) {
    const auto& go = g.grad(self);
    auto& gf = g.grad(features);
    for (std::size_t i = 0; i < nb.point_count(); ++i) {
      const double* grow = go.row(i);
      for (auto e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) {
        const auto& entry = nb.entries[e];
        double* dst = gf.row(entry.neighbor);
        const double* src = grow + static_cast<std::size_t>(entry.kernel) * c;
        for (std::size_t q = 0; q < c; ++q) dst[q] += entry.weight * src[q];
      }
    }
  });
}

nn::Tensor kpconv_forward(const PointCloud& cloud, const KpconvParams& params, double neighbor_radius) {
  if (params.kernel_points.empty()) fail(ErrorKind::ContractViolation, "kpconv without kernel points");
  for (const auto& x : params.kernel_points)
    if (std::sqrt(x.x * x.x + x.y * x.y + x.z * x.z) > params.influence_radius)
      fail(ErrorKind::ContractViolation, "kernel point outside the influence radius");
  if (params.weights.rows() % params.kernel_count() != 0)
    fail(ErrorKind::ShapeError, "kpconv weights " + nn::shape_string(params.weights.shape) +
                                    " not divisible into " + std::to_string(params.kernel_count()) + " kernel maps");

  nn::Tensor features;
  if (cloud.has_features()) {
    features = nn::Tensor::from(cloud.size(), cloud.feature_dim, cloud.features);
  } else {
    features = nn::Tensor(cloud.size(), 1, 1.0);
  }
  if (features.cols() != params.in_dim())
    fail(ErrorKind::ShapeError, "kpconv input width " + std::to_string(features.cols()) + " != weight in_dim " +
                                    std::to_string(params.in_dim()));
  const auto nb = build_neighborhood(cloud.points, params.kernel_points, params.influence_radius, neighbor_radius);
  const auto gathered = gather_values(features, nb);
  nn::Tensor out(cloud.size(), params.out_dim());
  nn::gemm_nn(gathered, params.weights, out);
  return out;
}

}  // namespace placerec::gpc

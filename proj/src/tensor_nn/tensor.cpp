#include <algorithm>
#include <cmath>
#include <sstream>

#include "placerec/tensor_nn.hpp"

namespace placerec::nn {

MemoryStats& memory_stats() {
  thread_local MemoryStats stats;
  return stats;
}

void reset_peak_memory() {
  auto& s = memory_stats();
  s.peak_bytes = s.current_bytes;
}

Tensor::Tensor(std::vector<std::size_t> shape_, double fill) : shape(std::move(shape_)) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  data.assign(n, fill);
}

Tensor Tensor::from(std::size_t rows, std::size_t cols, std::span<const double> values) {
  if (values.size() != rows * cols)
    fail(ErrorKind::ShapeError, "cannot fill " + shape_string({rows, cols}) + " from " + std::to_string(values.size()) +
                                    " values");
  Tensor t(rows, cols);
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream s;
  s << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? "x" : "") << shape[i];
  s << ']';
  return s.str();
}

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) fail(ErrorKind::ShapeError, std::string(op) + " expects rank-2 tensor, got " + shape_string(t.shape));
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  fail(ErrorKind::ShapeError, std::string(op) + ": incompatible shapes " + shape_string(a.shape) + " and " +
                                  shape_string(b.shape));
}

}  // namespace

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k || c.rows() != m || c.cols() != n) mismatch("matmul", a, b);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.row(i);
    const double* arow = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  if (b.shape[1] != k || c.rows() != m || c.cols() != n) mismatch("matmul_nt", a, b);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  require_2d(a, "matmul_tn");
  require_2d(b, "matmul_tn");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != m || c.rows() != k || c.cols() != n) mismatch("matmul_tn", a, b);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    const double* brow = b.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, fan_in)));
  std::uniform_real_distribution<double> dist(-s, s);
  Tensor t(rows, cols);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

Tensor gaussian_init(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

}  // namespace placerec::nn

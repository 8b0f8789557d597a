#include <algorithm>
#include <cmath>

#include "placerec/tensor_nn.hpp"

namespace placerec::nn {

std::size_t Graph::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    fail(ErrorKind::ContractViolation, "variable does not belong to this graph");
  return static_cast<std::size_t>(v.id);
}

Tensor& Graph::grad(Var v) {
  auto& node = nodes_[check(v)];
  if (node.grad.data.empty()) node.grad = Tensor(node.external ? node.external->shape : node.value.shape);
  return node.grad;
}

Var Graph::push(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (auto p : parents) node.requires_grad = node.requires_grad || nodes_[check(p)].requires_grad;
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) { return push(std::move(value), {}, {}); }

Var Graph::param(ParamStore& store, const std::string& name) {
  Param* p = &store.get(name);
  if (auto it = param_nodes_.find(p); it != param_nodes_.end()) return it->second;
  Node node;
  node.external = &p->value;
  node.param = p;
  node.requires_grad = record_;
  nodes_.push_back(std::move(node));
  Var v{static_cast<std::int32_t>(nodes_.size() - 1)};
  param_nodes_[p] = v;
  return v;
}

Var Graph::param(const ParamStore& store, const std::string& name) {
  const Param* p = &store.get(name);
  if (auto it = param_nodes_.find(p); it != param_nodes_.end()) return it->second;
  Node node;
  node.external = &p->value;
  nodes_.push_back(std::move(node));
  Var v{static_cast<std::int32_t>(nodes_.size() - 1)};
  param_nodes_[p] = v;
  return v;
}

Var Graph::custom(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  return push(std::move(value), parents, std::move(backward));
}

void Graph::backward(Var loss) {
  const auto root = check(loss);
  if (value(loss).numel() != 1)
    fail(ErrorKind::ContractViolation, "backward requires a scalar loss, got " + shape_string(value(loss).shape));
  if (!record_) fail(ErrorKind::ContractViolation, "backward on a non-recording graph");
  grad(loss).data[0] += 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.grad.data.empty() || !node.backward) continue;
    auto fn = node.backward;  // the closure may touch nodes_; keep a copy alive
    fn(*this);
  }
  for (auto& node : nodes_) {
    if (!node.param || node.grad.data.empty()) continue;
    auto& target = node.param->grad.data;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += node.grad.data[i];
    std::fill(node.grad.data.begin(), node.grad.data.end(), 0.0);
  }
}

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  fail(ErrorKind::ShapeError,
       std::string(op) + ": incompatible shapes " + shape_string(a.shape) + " and " + shape_string(b.shape));
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    fail(ErrorKind::ShapeError, std::string(op) + " expects a rank-2 tensor, got " + shape_string(t.shape));
}

}  // namespace

Var Graph::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require_2d(av, "matmul");
  require_2d(bv, "matmul");
  if (av.shape[1] != bv.shape[0]) shape_mismatch("matmul", av, bv);
  Tensor out(av.shape[0], bv.shape[1]);
  gemm_nn(av, bv, out);
  return push(std::move(out), {a, b}, [a, b, self = Var{static_cast<std::int32_t>(nodes_.size())}](Graph& g) {
    const auto& go = g.grad(self);
    if (g.requires_grad(a)) gemm_nt(go, g.value(b), g.grad(a));
    if (g.requires_grad(b)) gemm_tn(g.value(a), go, g.grad(b));
  });
}

Var Graph::matmul_nt(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require_2d(av, "matmul_nt");
  require_2d(bv, "matmul_nt");
  if (av.shape[1] != bv.shape[1]) shape_mismatch("matmul_nt", av, bv);
  Tensor out(av.shape[0], bv.shape[0]);
  gemm_nt(av, bv, out);
  return push(std::move(out), {a, b}, [a, b, self = Var{static_cast<std::int32_t>(nodes_.size())}](Graph& g) {
    const auto& go = g.grad(self);
    if (g.requires_grad(a)) gemm_nn(go, g.value(b), g.grad(a));
    if (g.requires_grad(b)) gemm_tn(go, g.value(a), g.grad(b));
  });
}

Var Graph::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape != bv.shape) shape_mismatch("add", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a, b}, [a, b, self](Graph& g) {
    const auto& go = g.grad(self);
    for (Var p : {a, b}) {
      if (!g.requires_grad(p)) continue;
      auto& gp = g.grad(p);
      for (std::size_t i = 0; i < go.numel(); ++i) gp.data[i] += go.data[i];
    }
  });
}

Var Graph::sub(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape != bv.shape) shape_mismatch("sub", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a, b}, [a, b, self](Graph& g) {
    const auto& go = g.grad(self);
    if (g.requires_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < go.numel(); ++i) gb.data[i] -= go.data[i];
    }
  });
}

Var Graph::add_row(Var a, Var bias) {
  const auto& av = value(a);
  const auto& bv = value(bias);
  require_2d(av, "add_row");
  if (bv.numel() != av.cols()) shape_mismatch("add_row", av, bv);
  Tensor out = av;
  const std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] += bv.data[c];
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a, bias}, [a, bias, self, n](Graph& g) {
    const auto& go = g.grad(self);
    if (g.requires_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
    }
    if (g.requires_grad(bias)) {
      auto& gb = g.grad(bias);
      for (std::size_t r = 0; r < go.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) gb.data[c] += go.data[r * n + c];
    }
  });
}

Var Graph::scale(Var a, double s) {
  Tensor out = value(a);
  for (auto& v : out.data) v *= s;
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, s, self](Graph& g) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += s * go.data[i];
  });
}

Var Graph::relu(Var a) {
  Tensor out = value(a);
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self](Graph& g) {
    const auto& go = g.grad(self);
    const auto& x = g.value(a);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < go.numel(); ++i)
      if (x.data[i] > 0.0) ga.data[i] += go.data[i];
  });
}

Var Graph::tanh(Var a) {
  Tensor out = value(a);
  for (auto& v : out.data) v = std::tanh(v);
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self](Graph& g) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad(a);
    for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

Var Graph::softmax_rows(Var a) {
  Tensor out = value(a);
  require_2d(out, "softmax_rows");
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.row(r);
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) row[c] /= sum;
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self, n](Graph& g) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.row(r);
      const double* gr = go.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += yr[c] * gr[c];
      double* out_row = ga.row(r);
      for (std::size_t c = 0; c < n; ++c) out_row[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var Graph::layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  const auto& x = value(a);
  require_2d(x, "layer_norm_rows");
  const std::size_t n = x.cols();
  if (value(gamma).numel() != n) shape_mismatch("layer_norm_rows(gamma)", x, value(gamma));
  if (value(beta).numel() != n) shape_mismatch("layer_norm_rows(beta)", x, value(beta));
  Tensor normalized(x.shape);
  std::vector<double> inv_std(x.rows());
  Tensor out(x.shape);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mean) * inv_std[r];
      normalized.at(r, c) = h;
      out.at(r, c) = gv.data[c] * h + bv.data[c];
    }
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a, gamma, beta},
              [a, gamma, beta, self, n, normalized = std::move(normalized), inv_std = std::move(inv_std)](Graph& g) {
                const auto& go = g.grad(self);
                const auto& gv = g.value(gamma);
                if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                  auto& gg = g.grad(gamma);
                  auto& gb = g.grad(beta);
                  for (std::size_t r = 0; r < go.rows(); ++r)
                    for (std::size_t c = 0; c < n; ++c) {
                      gg.data[c] += go.at(r, c) * normalized.at(r, c);
                      gb.data[c] += go.at(r, c);
                    }
                }
                if (!g.requires_grad(a)) return;
                auto& ga = g.grad(a);
                std::vector<double> dh(n);
                for (std::size_t r = 0; r < go.rows(); ++r) {
                  double mean_dh = 0.0, mean_dh_h = 0.0;
                  for (std::size_t c = 0; c < n; ++c) {
                    dh[c] = go.at(r, c) * gv.data[c];
                    mean_dh += dh[c];
                    mean_dh_h += dh[c] * normalized.at(r, c);
                  }
                  mean_dh /= static_cast<double>(n);
                  mean_dh_h /= static_cast<double>(n);
                  for (std::size_t c = 0; c < n; ++c)
                    ga.at(r, c) += inv_std[r] * (dh[c] - mean_dh - normalized.at(r, c) * mean_dh_h);
                }
              });
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::ShapeError, "concat_cols of nothing");
  const std::size_t rows = value(parts.front()).rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (auto p : parts) {
    const auto& v = value(p);
    require_2d(v, "concat_cols");
    if (v.rows() != rows) shape_mismatch("concat_cols", value(parts.front()), v);
    offsets.push_back(total);
    total += v.cols();
  }
  Tensor out(rows, total);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = value(parts[i]);
    for (std::size_t r = 0; r < rows; ++r) std::copy(v.row(r), v.row(r) + v.cols(), out.row(r) + offsets[i]);
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), parts, [parts, offsets, self](Graph& g) {
    const auto& go = g.grad(self);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!g.requires_grad(parts[i])) continue;
      auto& gp = g.grad(parts[i]);
      const std::size_t w = gp.cols();
      for (std::size_t r = 0; r < gp.rows(); ++r)
        for (std::size_t c = 0; c < w; ++c) gp.at(r, c) += go.at(r, offsets[i] + c);
    }
  });
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  const auto& v = value(a);
  require_2d(v, "slice_cols");
  if (begin >= end || end > v.cols())
    fail(ErrorKind::ShapeError, "slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                                    shape_string(v.shape));
  Tensor out(v.rows(), end - begin);
  for (std::size_t r = 0; r < v.rows(); ++r) std::copy(v.row(r) + begin, v.row(r) + end, out.row(r));
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self, begin](Graph& g) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t c = 0; c < go.cols(); ++c) ga.at(r, begin + c) += go.at(r, c);
  });
}

Var Graph::reduce_max_rows(Var a) {
  const auto& v = value(a);
  require_2d(v, "reduce_max_rows");
  if (v.rows() == 0) fail(ErrorKind::ShapeError, "reduce_max_rows over zero rows");
  const std::size_t n = v.cols();
  Tensor out(1, n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t c = 0; c < n; ++c) out.data[c] = v.at(0, c);
  for (std::size_t r = 1; r < v.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c)
      if (v.at(r, c) > out.data[c]) {
        out.data[c] = v.at(r, c);
        arg[c] = r;
      }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self, arg = std::move(arg)](Graph& g) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t c = 0; c < arg.size(); ++c) ga.at(arg[c], c) += go.data[c];
  });
}

Var Graph::mean_rows(Var a) {
  const auto& v = value(a);
  require_2d(v, "mean_rows");
  const std::size_t n = v.cols();
  const double inv = 1.0 / static_cast<double>(v.rows());
  Tensor out(1, n);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out.data[c] += v.at(r, c);
  for (auto& x : out.data) x *= inv;
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self, inv, n](Graph& g) {
    const auto& go = g.grad(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) += go.data[c] * inv;
  });
}

Var Graph::sum_all(Var a) {
  double s = 0.0;
  for (double x : value(a).data) s += x;
  Tensor out(1, 1, s);
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self](Graph& g) {
    const double go = g.grad(self).data[0];
    for (auto& x : g.grad(a).data) x += go;
  });
}

Var Graph::l2_normalize_rows(Var a, double eps) {
  Tensor out = value(a);
  require_2d(out, "l2_normalize_rows");
  const std::size_t n = out.cols();
  std::vector<double> norms(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += out.at(r, c) * out.at(r, c);
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) /= norms[r];
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(std::move(out), {a}, [a, self, n, norms = std::move(norms)](Graph& g) {
    const auto& go = g.grad(self);
    const auto& y = g.value(self);
    auto& ga = g.grad(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += y.at(r, c) * go.at(r, c);
      for (std::size_t c = 0; c < n; ++c) ga.at(r, c) += (go.at(r, c) - y.at(r, c) * dot) / norms[r];
    }
  });
}

Var Graph::distance(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape != bv.shape) shape_mismatch("distance", av, bv);
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += (av.data[i] - bv.data[i]) * (av.data[i] - bv.data[i]);
  const double d = std::sqrt(s);
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor(1, 1, d), {a, b}, [a, b, self, d](Graph& g) {
    if (d == 0.0) return;
    const double go = g.grad(self).data[0] / d;
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad(a);
      for (std::size_t i = 0; i < av.numel(); ++i) ga.data[i] += go * (av.data[i] - bv.data[i]);
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad(b);
      for (std::size_t i = 0; i < av.numel(); ++i) gb.data[i] -= go * (av.data[i] - bv.data[i]);
    }
  });
}

Var Graph::add_scalars(const std::vector<Var>& terms) {
  double s = 0.0;
  for (auto t : terms) {
    if (value(t).numel() != 1) fail(ErrorKind::ShapeError, "add_scalars expects 1x1 terms, got " +
                                                               shape_string(value(t).shape));
    s += value(t).data[0];
  }
  const Var self{static_cast<std::int32_t>(nodes_.size())};
  return push(Tensor(1, 1, s), terms, [terms, self](Graph& g) {
    const double go = g.grad(self).data[0];
    for (auto t : terms)
      if (g.requires_grad(t)) g.grad(t).data[0] += go;
  });
}

}  // namespace placerec::nn

namespace placerec::nn {

GradcheckResult gradcheck(ParamStore& store, const std::function<Var(Graph&)>& loss, const std::string& prefix,
                          double eps, double floor) {
  store.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph g(false);
    return g.value(loss(g)).data.at(0);
  };
  GradcheckResult result;
  for (auto& [name, p] : store.items()) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value.data[i];
      p.value.data[i] = saved + eps;
      const double up = evaluate();
      p.value.data[i] = saved - eps;
      const double down = evaluate();
      p.value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p.grad.data[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  store.zero_grad();
  return result;
}

}  // namespace placerec::nn

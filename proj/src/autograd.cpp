#include "omnifuse/autograd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace omnifuse {

bool AttnProbe::enabled = false;
std::vector<std::pair<std::string, Tensor>> AttnProbe::records;

void Node::ensure_grad() {
  if (grad.size() == 0) grad = Tensor::zeros(value.shape());
}

bool Node::ensure_grad_fresh() {
  if (grad.size() == 0) {
    grad = Tensor(value.shape());
    return true;
  }
  return false;
}

void Node::accum_grad(const Tensor& g) {
  ensure_grad();
  for (int64_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(n);
}

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
  }
}

}  // namespace

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar, got " + root.value().shape_str());
  if (!root.requires_grad()) return;

  // Iterative postorder DFS; recursion depth scales with scan length otherwise.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accum_grad(self.grad);
    if (pb->requires_grad) pb->accum_grad(self.grad);
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accum_grad(self.grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  }));
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.grad.size(); ++i) {
        const double bv = pb->value[i];
        pb->grad[i] -= self.grad[i] * pa->value[i] / (bv * bv);
      }
    }
  }));
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) { pa->accum_grad(self.grad); }));
}

Var mul_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa, s](Node& self) {
    pa->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * s;
  }));
}

Var add_rowvec(const Var& x, const Var& v) {
  const int m = x.rows(), n = x.cols();
  if (v.value().size() != n) throw ShapeError("add_rowvec: vector length mismatch");
  Tensor out = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] += v.value()[j];
  auto px = x.node(), pv = v.node();
  return Var(make_node(std::move(out), {px, pv}, [px, pv, m, n](Node& self) {
    if (px->requires_grad) px->accum_grad(self.grad);
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pv->grad[j] += self.grad[static_cast<int64_t>(i) * n + j];
    }
  }));
}

Var mul_rowvec(const Var& x, const Var& v) {
  const int m = x.rows(), n = x.cols();
  if (v.value().size() != n) throw ShapeError("mul_rowvec: vector length mismatch");
  Tensor out = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] *= v.value()[j];
  auto px = x.node(), pv = v.node();
  return Var(make_node(std::move(out), {px, pv}, [px, pv, m, n](Node& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) px->grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(i) * n + j] * pv->value[j];
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pv->grad[j] += self.grad[static_cast<int64_t>(i) * n + j] * px->value[static_cast<int64_t>(i) * n + j];
    }
  }));
}

Var mul_colvec(const Var& x, const Var& v) {
  const int m = x.rows(), n = x.cols();
  if (v.value().size() != m) throw ShapeError("mul_colvec: vector length mismatch");
  Tensor out = x.value();
  for (int i = 0; i < m; ++i) {
    const double vi = v.value()[i];
    for (int j = 0; j < n; ++j) out[static_cast<int64_t>(i) * n + j] *= vi;
  }
  auto px = x.node(), pv = v.node();
  return Var(make_node(std::move(out), {px, pv}, [px, pv, m, n](Node& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double vi = pv->value[i];
        for (int j = 0; j < n; ++j) px->grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(i) * n + j] * vi;
      }
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += self.grad[static_cast<int64_t>(i) * n + j] * px->value[static_cast<int64_t>(i) * n + j];
        pv->grad[i] += acc;
      }
    }
  }));
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + a.value().shape_str() + " * " + b.value().shape_str());
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  auto pa = a.node(), pb = b.node();
  return Var(make_node(std::move(out), {pa, pb}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) {
      const bool fresh = pa->ensure_grad_fresh();
      // dA = g * B^T via an explicit transpose; the nn kernel runs much
      // faster than a strided nt loop and B is small in every hot path.
      Tensor bt({n, k});
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < n; ++j) bt[static_cast<int64_t>(j) * k + i] = pb->value[static_cast<int64_t>(i) * n + j];
      gemm_nn(self.grad.data(), bt.data(), pa->grad.data(), m, n, k, !fresh);
    }
    if (pb->requires_grad) {
      const bool fresh = pb->ensure_grad_fresh();
      gemm_tn(pa->value.data(), self.grad.data(), pb->grad.data(), m, k, n, !fresh);
    }
  }));
}

Var transpose(const Var& a) {
  const int m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa, m, n](Node& self) {
    pa->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) pa->grad[static_cast<int64_t>(i) * n + j] += self.grad[static_cast<int64_t>(j) * m + i];
  }));
}

Var reshape(const Var& a, std::vector<int> shape) {
  if (numel(shape) != a.value().size()) throw ShapeError("reshape: element count mismatch");
  Tensor out = a.value();
  out = Tensor(std::move(shape), std::vector<double>(out.data(), out.data() + out.size()));
  auto pa = a.node();
  return Var(make_node(std::move(out), {pa}, [pa](Node& self) {
    pa->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  }));
}

Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx, std::vector<int> out_shape) {
  if (static_cast<int64_t>(idx->size()) != numel(out_shape)) throw ShapeError("gather: index count mismatch");
  Tensor out(std::move(out_shape));
  const auto& xv = x.value();
  for (size_t i = 0; i < idx->size(); ++i) {
    const int64_t src = (*idx)[i];
    out[static_cast<int64_t>(i)] = src >= 0 ? xv[src] : 0.0;
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, idx](Node& self) {
    px->ensure_grad();
    for (size_t i = 0; i < idx->size(); ++i) {
      const int64_t src = (*idx)[i];
      if (src >= 0) px->grad[src] += self.grad[static_cast<int64_t>(i)];
    }
  }));
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const int n = parts[0].cols();
  int m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    m += p.rows();
  }
  Tensor out({m, n});
  int row = 0;
  std::vector<NodePtr> parents;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + static_cast<size_t>(row) * n);
    parents.push_back(p.node());
    offsets.push_back(row);
    row += p.rows();
  }
  return Var(make_node(std::move(out), parents, [parents, offsets, n](Node& self) {
    for (size_t k = 0; k < parents.size(); ++k) {
      if (!parents[k]->requires_grad) continue;
      parents[k]->ensure_grad();
      const int64_t cnt = parents[k]->value.size();
      const double* g = self.grad.data() + static_cast<size_t>(offsets[k]) * n;
      for (int64_t i = 0; i < cnt; ++i) parents[k]->grad[i] += g[i];
    }
  }));
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const int m = parts[0].rows();
  int n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    n += p.cols();
  }
  Tensor out({m, n});
  std::vector<NodePtr> parents;
  std::vector<int> offsets, widths;
  int col = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, col + j) = p.value().at(i, j);
    parents.push_back(p.node());
    offsets.push_back(col);
    widths.push_back(w);
    col += w;
  }
  return Var(make_node(std::move(out), parents, [parents, offsets, widths, m, n](Node& self) {
    for (size_t k = 0; k < parents.size(); ++k) {
      if (!parents[k]->requires_grad) continue;
      parents[k]->ensure_grad();
      const int w = widths[k], off = offsets[k];
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) parents[k]->grad[static_cast<int64_t>(i) * w + j] += self.grad[static_cast<int64_t>(i) * n + off + j];
    }
  }));
}

Var slice_rows(const Var& x, int r0, int r1) {
  const int n = x.cols();
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
  Tensor out({r1 - r0, n});
  std::copy(x.value().data() + static_cast<size_t>(r0) * n, x.value().data() + static_cast<size_t>(r1) * n, out.data());
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, r0, n](Node& self) {
    px->ensure_grad();
    double* g = px->grad.data() + static_cast<size_t>(r0) * n;
    for (int64_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  }));
}

Var slice_cols(const Var& x, int c0, int c1) {
  const int m = x.rows(), n = x.cols();
  if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
  const int w = c1 - c0;
  Tensor out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.value().at(i, c0 + j);
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, c0, m, n, w](Node& self) {
    px->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) px->grad[static_cast<int64_t>(i) * n + c0 + j] += self.grad[static_cast<int64_t>(i) * w + j];
  }));
}

Var softmax_rows(const Var& x, const std::string& probe_tag) {
  const int m = x.rows(), n = x.cols();
  Tensor out = x.value();
  for (int i = 0; i < m; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) {
      // Fully masked row; callers guarantee this never happens, keep it sane.
      for (int j = 0; j < n; ++j) row[j] = 1.0 / n;
      continue;
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
  }
  if (AttnProbe::enabled && !probe_tag.empty()) AttnProbe::records.emplace_back(probe_tag, out);
  auto px = x.node();
  Tensor y = out;
  return Var(make_node(std::move(out), {px}, [px, y, m, n](Node& self) {
    px->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* yi = y.data() + static_cast<size_t>(i) * n;
      const double* gi = self.grad.data() + static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gi[j] * yi[j];
      double* oi = px->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) oi[j] += yi[j] * (gi[j] - dot);
    }
  }));
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int m = x.rows(), n = x.cols();
  if (gamma.value().size() != n || beta.value().size() != n) throw ShapeError("layer_norm_rows: affine size mismatch");
  Tensor out({m, n});
  Tensor xhat({m, n});
  Tensor inv_sigma({m});
  for (int i = 0; i < m; ++i) {
    const double* xi = x.value().data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xi[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (int j = 0; j < n; ++j) {
      const double xh = (xi[j] - mu) * is;
      xhat.at(i, j) = xh;
      out.at(i, j) = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return Var(make_node(std::move(out), {px, pg, pb}, [px, pg, pb, xhat, inv_sigma, m, n](Node& self) {
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pg->grad[j] += self.grad[static_cast<int64_t>(i) * n + j] * xhat.at(i, j);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) pb->grad[j] += self.grad[static_cast<int64_t>(i) * n + j];
    }
    if (px->requires_grad) {
      px->ensure_grad();
      for (int i = 0; i < m; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        std::vector<double> dxhat(static_cast<size_t>(n));
        for (int j = 0; j < n; ++j) {
          dxhat[static_cast<size_t>(j)] = self.grad[static_cast<int64_t>(i) * n + j] * pg->value[j];
          mean_dxhat += dxhat[static_cast<size_t>(j)];
          mean_dxhat_xhat += dxhat[static_cast<size_t>(j)] * xhat.at(i, j);
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for (int j = 0; j < n; ++j) {
          px->grad[static_cast<int64_t>(i) * n + j] +=
              inv_sigma[i] * (dxhat[static_cast<size_t>(j)] - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
        }
      }
    }
  }));
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  auto px = x.node();
  Tensor y = out;
  return Var(make_node(std::move(out), {px}, [px, y](Node& self) {
    px->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  }));
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kSqrt2OverPi = 0.7978845608028653559;  // sqrt(2/pi)
  Tensor out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) {
    const double v = out[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      const double v = px->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = 0.5 * kSqrt2OverPi * std::exp(-0.5 * v * v);
      px->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  }));
}

Var log_op(const Var& x) {
  Tensor out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] / px->value[i];
  }));
}

Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(out[i], lo), hi);
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, lo, hi](Node& self) {
    px->ensure_grad();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      const double v = px->value[i];
      if (v > lo && v < hi) px->grad[i] += self.grad[i];
    }
  }));
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.value().size(); ++i) s += x.value()[i];
  auto px = x.node();
  return Var(make_node(Tensor({1}, {s}), {px}, [px](Node& self) {
    px->ensure_grad();
    const double g = self.grad[0];
    for (int64_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
  }));
}

Var mean_all(const Var& x) { return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean_rows(const Var& x) {
  const int m = x.rows(), n = x.cols();
  Tensor out({1, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += x.value()[static_cast<int64_t>(i) * n + j];
  for (int j = 0; j < n; ++j) out[j] /= m;
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, m, n](Node& self) {
    px->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) px->grad[static_cast<int64_t>(i) * n + j] += self.grad[j] / m;
  }));
}

Var bilinear_sample(const Var& grid, int h, int w, const Var& coords) {
  const int c = grid.cols();
  const int m = coords.rows();
  if (grid.rows() != h * w) throw ShapeError("bilinear_sample: grid rows != h*w");
  if (coords.cols() != 2) throw ShapeError("bilinear_sample: coords must be [M x 2]");
  Tensor out({m, c});
  const auto& gv = grid.value();
  const auto& cv = coords.value();
  auto fetch = [&](int xi, int yi, int ch) -> double {
    if (xi < 0 || xi >= w || yi < 0 || yi >= h) return 0.0;
    return gv[(static_cast<int64_t>(yi) * w + xi) * c + ch];
  };
  for (int i = 0; i < m; ++i) {
    const double x = cv.at(i, 0), y = cv.at(i, 1);
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    for (int ch = 0; ch < c; ++ch) {
      const double v00 = fetch(x0, y0, ch), v10 = fetch(x0 + 1, y0, ch);
      const double v01 = fetch(x0, y0 + 1, ch), v11 = fetch(x0 + 1, y0 + 1, ch);
      out.at(i, ch) = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11;
    }
  }
  auto pg = grid.node(), pc = coords.node();
  return Var(make_node(std::move(out), {pg, pc}, [pg, pc, h, w, c, m](Node& self) {
    const auto& cv = pc->value;
    auto fetch = [&](int xi, int yi, int ch) -> double {
      if (xi < 0 || xi >= w || yi < 0 || yi >= h) return 0.0;
      return pg->value[(static_cast<int64_t>(yi) * w + xi) * c + ch];
    };
    if (pg->requires_grad) pg->ensure_grad();
    if (pc->requires_grad) pc->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double x = cv.at(i, 0), y = cv.at(i, 1);
      const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      const double fx = x - x0, fy = y - y0;
      double dx = 0.0, dy = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double g = self.grad[static_cast<int64_t>(i) * c + ch];
        if (g == 0.0) continue;
        if (pg->requires_grad) {
          auto scatter = [&](int xi, int yi, double wgt) {
            if (xi < 0 || xi >= w || yi < 0 || yi >= h) return;
            pg->grad[(static_cast<int64_t>(yi) * w + xi) * c + ch] += wgt * g;
          };
          scatter(x0, y0, (1 - fx) * (1 - fy));
          scatter(x0 + 1, y0, fx * (1 - fy));
          scatter(x0, y0 + 1, (1 - fx) * fy);
          scatter(x0 + 1, y0 + 1, fx * fy);
        }
        if (pc->requires_grad) {
          const double v00 = fetch(x0, y0, ch), v10 = fetch(x0 + 1, y0, ch);
          const double v01 = fetch(x0, y0 + 1, ch), v11 = fetch(x0 + 1, y0 + 1, ch);
          dx += g * ((1 - fy) * (v10 - v00) + fy * (v11 - v01));
          dy += g * ((1 - fx) * (v01 - v00) + fx * (v11 - v10));
        }
      }
      if (pc->requires_grad) {
        pc->grad[static_cast<int64_t>(i) * 2 + 0] += dx;
        pc->grad[static_cast<int64_t>(i) * 2 + 1] += dy;
      }
    }
  }));
}

Var pool_mean(const Var& x, int h, int w, int k) {
  const int c = x.cols();
  if (x.rows() != h * w) throw ShapeError("pool_mean: rows != h*w");
  if (h % k != 0 || w % k != 0) throw ShapeError("pool_mean: k must divide h and w");
  const int oh = h / k, ow = w / k;
  Tensor out({oh * ow, c});
  const double inv = 1.0 / (k * k);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* o = out.data() + (static_cast<size_t>(oy) * ow + ox) * c;
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          const double* src = x.value().data() + (static_cast<size_t>(oy * k + dy) * w + (ox * k + dx)) * c;
          for (int ch = 0; ch < c; ++ch) o[ch] += src[ch];
        }
      for (int ch = 0; ch < c; ++ch) o[ch] *= inv;
    }
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, h, w, k, c](Node& self) {
    px->ensure_grad();
    const int ow = w / k;
    const double inv = 1.0 / (k * k);
    for (int oy = 0; oy < h / k; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double* g = self.grad.data() + (static_cast<size_t>(oy) * ow + ox) * c;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            double* dst = px->grad.data() + (static_cast<size_t>(oy * k + dy) * w + (ox * k + dx)) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += g[ch] * inv;
          }
      }
  }));
}

Var upsample_bilinear(const Var& x, int h, int w, int out_h, int out_w) {
  const int c = x.cols();
  if (x.rows() != h * w) throw ShapeError("upsample_bilinear: rows != h*w");
  Tensor out({out_h * out_w, c});
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  struct Tap {
    int64_t src;
    double wgt;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(static_cast<size_t>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = oy * sy;
    const int y0 = std::min(static_cast<int>(fy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = ox * sx;
      const int x0 = std::min(static_cast<int>(fx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      auto& t = (*taps)[static_cast<size_t>(oy) * out_w + ox];
      t[0] = {static_cast<int64_t>(y0) * w + x0, (1 - wy) * (1 - wx)};
      t[1] = {static_cast<int64_t>(y0) * w + x1, (1 - wy) * wx};
      t[2] = {static_cast<int64_t>(y1) * w + x0, wy * (1 - wx)};
      t[3] = {static_cast<int64_t>(y1) * w + x1, wy * wx};
      double* o = out.data() + (static_cast<size_t>(oy) * out_w + ox) * c;
      for (const auto& tap : t) {
        if (tap.wgt == 0.0) continue;
        const double* s = x.value().data() + static_cast<size_t>(tap.src) * c;
        for (int ch = 0; ch < c; ++ch) o[ch] += tap.wgt * s[ch];
      }
    }
  }
  auto px = x.node();
  return Var(make_node(std::move(out), {px}, [px, taps, c](Node& self) {
    px->ensure_grad();
    for (size_t i = 0; i < taps->size(); ++i) {
      const double* g = self.grad.data() + i * c;
      for (const auto& tap : (*taps)[i]) {
        if (tap.wgt == 0.0) continue;
        double* dst = px->grad.data() + static_cast<size_t>(tap.src) * c;
        for (int ch = 0; ch < c; ++ch) dst[ch] += tap.wgt * g[ch];
      }
    }
  }));
}

}  // namespace omnifuse

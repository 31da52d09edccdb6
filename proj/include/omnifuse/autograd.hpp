#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "omnifuse/tensor.hpp"

namespace omnifuse {

// Reverse-mode autodiff over whole-tensor operations. Graphs are rebuilt per
// forward pass; parameter nodes persist across passes and accumulate gradients
// until zero_grad. Ops are coarse (matmul, softmax, conv lowering) so the tape
// stays small.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
  bool requires_grad = false;

  void ensure_grad();
  bool ensure_grad_fresh();  // true if the gradient buffer was just created
  void accum_grad(const Tensor& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad);
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const std::vector<int>& shape() const { return node_->value.shape(); }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }

 private:
  NodePtr node_;
};

// Runs reverse accumulation from a scalar root ([1]-shaped).
void backward(const Var& root);

// Elementwise; shapes must match.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

// Row/column broadcasts over a matrix [M x N].
Var add_rowvec(const Var& x, const Var& v);  // v: [N]
Var mul_rowvec(const Var& x, const Var& v);  // v: [N]
Var mul_colvec(const Var& x, const Var& v);  // v: [M x 1]

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);

// y.flat[i] = x.flat[idx[i]] (idx[i] < 0 reads as 0). Backward scatter-adds.
// Data movement workhorse: window partition, shifts, im2col, patch grouping.
Var gather(const Var& x, std::shared_ptr<const std::vector<int64_t>> idx, std::vector<int> out_shape);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int r0, int r1);
Var slice_cols(const Var& x, int c0, int c1);

Var softmax_rows(const Var& x, const std::string& probe_tag = std::string());
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

Var sigmoid(const Var& x);
Var gelu(const Var& x);
Var log_op(const Var& x);
Var clamp(const Var& x, double lo, double hi);

Var sum_all(const Var& x);    // -> [1]
Var mean_all(const Var& x);   // -> [1]
Var mean_rows(const Var& x);  // [M x N] -> [1 x N]

// Values sampled from a feature grid at continuous coords (x, y); zero padding
// outside. Gradients flow to both the grid and the coordinates.
Var bilinear_sample(const Var& grid, int h, int w, const Var& coords);

Var pool_mean(const Var& x, int h, int w, int k);                      // [h*w x C] -> [(h/k)*(w/k) x C]
Var upsample_bilinear(const Var& x, int h, int w, int out_h, int out_w);  // align-corners mapping

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Collects attention row-distributions produced by tagged softmax calls so
// tests can assert normalization and masking without touching layer internals.
struct AttnProbe {
  static bool enabled;
  static std::vector<std::pair<std::string, Tensor>> records;
  static void clear() { records.clear(); }
};

}  // namespace omnifuse

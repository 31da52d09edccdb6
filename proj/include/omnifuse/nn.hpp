#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "omnifuse/autograd.hpp"

namespace omnifuse {

// Owns the trainable parameters of a model. Registration order is the
// canonical order used by the optimizer and the checkpoint format.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var var;
    bool decay;  // weight matrices decay, biases and norm affines do not
  };

  Var create(const std::string& name, Tensor init, bool decay);
  void zero_grad();
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  Var* find(const std::string& name);
  int64_t count_scalars() const;

 private:
  std::vector<Entry> entries_;
};

Tensor glorot_normal(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng);

class Linear {
 public:
  Linear() = default;
  // weight_scale scales the variance-scaled init; 0 gives an exact-zero head.
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, double weight_scale = 1.0);
  Var forward(const Var& x) const { return add_rowvec(matmul(x, w), b); }
  int in_dim() const { return w.rows(); }
  int out_dim() const { return w.cols(); }
  Var w, b;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim);
  Var forward(const Var& x) const { return layer_norm_rows(x, gamma, beta); }
  Var gamma, beta;
};

// Scaled dot-product attention over full matrices, no projections. The kernel
// the cross-attention equations specify: softmax(q k^T / sqrt(d_k)) v.
Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask_bias = nullptr,
                         const std::string& probe_tag = std::string());

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int q_dim, int kv_dim, int d_model, int out_dim,
                     int heads, Rng& rng, double out_scale = 1.0);
  // q: [Nq x q_dim], kv: [Nkv x kv_dim]; optional additive pre-softmax bias
  // [Nq x Nkv] shared across heads (0 / -inf mask attention).
  Var forward(const Var& q, const Var& kv, const Tensor* mask_bias = nullptr,
              const std::string& probe_tag = std::string()) const;
  int heads() const { return heads_; }

  Linear wq, wk, wv, wo;

 private:
  int heads_ = 1;
  int d_model_ = 0;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng, double out_scale = 1.0);
  Var forward(const Var& x) const { return fc2.forward(gelu(fc1.forward(x))); }
  Linear fc1, fc2;
};

// Memoizes the gather index vector of a lowering that depends only on the
// grid geometry; safe under concurrent forward passes.
class IndexCache {
 public:
  IndexCache() = default;
  IndexCache(const IndexCache&) {}
  IndexCache& operator=(const IndexCache&) { return *this; }

  using Index = std::shared_ptr<const std::vector<int64_t>>;
  template <typename Build>
  Index get(int64_t key, Build&& build) const {
    std::lock_guard<std::mutex> lock(mutex_);
    if (!idx_ || key_ != key) {
      idx_ = build();
      key_ = key;
    }
    return idx_;
  }

 private:
  mutable std::mutex mutex_;
  mutable Index idx_;
  mutable int64_t key_ = -1;
};

// 2-D convolution on a flattened [h*w x in_ch] grid, lowered to im2col + GEMM.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng);
  Var forward(const Var& x, int h, int w) const;
  int out_h(int h) const { return (h + 2 * pad_ - k_) / stride_ + 1; }
  int out_w(int w) const { return (w + 2 * pad_ - k_) / stride_ + 1; }
  Var w, b;

 private:
  int in_ch_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  IndexCache cache_;
};

// x2 upsampling: zero-insertion followed by a 3x3 convolution. Equivalent in
// expressiveness to a stride-2 transposed convolution.
class UpsampleConv2x {
 public:
  UpsampleConv2x() = default;
  UpsampleConv2x(ParamStore& ps, const std::string& name, int in_ch, int out_ch, Rng& rng);
  Var forward(const Var& x, int h, int w) const;

 private:
  Conv2d conv_;
  int in_ch_ = 0;
  IndexCache cache_;
};

// Fixed 2-D sinusoidal grid encoding, [gh*gw x dim].
Tensor sinusoidal_grid_encoding(int gh, int gw, int dim);

}  // namespace omnifuse

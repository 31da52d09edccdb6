#pragma once

#include "omnifuse/nn.hpp"

namespace omnifuse {

// Each query position predicts K continuous offset pairs and matching
// attention logits, bilinearly samples the value projection at
// reference+offset, and mixes the samples with softmax weights. Pre-norm
// residual; out-of-bounds samples read zero.
class DeformableSelfAttention {
 public:
  DeformableSelfAttention() = default;
  DeformableSelfAttention(ParamStore& ps, const std::string& name, int dim, int heads, int k_points, Rng& rng,
                          double out_scale = 1.0);
  Var forward(const Var& grid, int gh, int gw, const std::string& probe_tag = std::string()) const;
  int k_points() const { return k_; }

  Linear offset_head, weight_head, value_proj, out_proj;
  LayerNorm norm;

 private:
  int heads_ = 1, k_ = 4, dim_ = 0;
};

// Plain pre-norm multi-head self-attention + MLP over the S spectral tokens.
class SpectralSelfAttention {
 public:
  SpectralSelfAttention() = default;
  SpectralSelfAttention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
  Var forward(const Var& tokens, const std::string& probe_tag = std::string()) const;

 private:
  LayerNorm norm1_, norm2_;
  MultiHeadAttention attn_;
  Mlp mlp_;
};

// x + proj(CrossAttn(norm(x), norm(kv))): one direction of the bidirectional
// enhancement. Residual form means a zero output projection is the identity.
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParamStore& ps, const std::string& name, int x_dim, int kv_dim, int d_model, int heads, Rng& rng,
                      double out_scale = 1.0);
  Var forward(const Var& x, const Var& kv, const std::string& probe_tag = std::string(),
              const Tensor* mask_bias = nullptr) const;

 private:
  LayerNorm norm_x_, norm_kv_;
  MultiHeadAttention attn_;
};

// Two-layer bidirectional cross-attention; within a layer both directions
// read the same layer inputs (simultaneous update).
class Enhancer {
 public:
  Enhancer() = default;
  Enhancer(ParamStore& ps, const std::string& name, int spa_dim, int spec_dim, int d_model, int heads, int n_layers,
           Rng& rng);
  std::pair<Var, Var> forward(const Var& spa, const Var& spec) const;

 private:
  std::vector<CrossAttentionBlock> spa_from_spec_, spec_from_spa_;
};

// 2x2 patch grouping + linear projection to the common token dim d for the
// spatial grid (plus a fixed sinusoidal grid encoding); per-token linear
// projection for the spectral side.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& ps, const std::string& name, int spa_dim, int spec_dim, int d, Rng& rng);
  Var spatial(const Var& grid, int gh, int gw) const;  // [gh/2*gw/2 x d]
  Var spectral(const Var& tokens) const;               // [S x d]

  Linear spa_proj, spec_proj;

 private:
  IndexCache cache_;
};

// Eq-(3) style selection: score_i = max_j (T_spa T_spec^T)_ij, keep the top
// n_q rows. Ties break toward the lower index; indices come back sorted so
// selection is order-preserving. Selection itself is non-differentiable and
// works on detached values.
std::vector<int> select_query_indices(const Tensor& spa_tokens, const Tensor& spec_tokens, int n_q);

// Row subset as a differentiable op: gradients reach selected rows only.
Var take_rows(const Var& x, const std::vector<int>& indices);

}  // namespace omnifuse

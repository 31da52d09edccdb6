#pragma once

#include "omnifuse/fusion.hpp"

namespace omnifuse {

struct PixelDecoderFeatures {
  Var mid;    // [gh*gw x d]   (H/4 resolution, F_pd)
  Var final;  // [h*w x d_out] (full resolution)
  int mid_h = 0, mid_w = 0;
  int out_h = 0, out_w = 0;
};

// Stand-in for a pretrained pixel decoder: a conv projection at H/4 exposing
// the mid feature, then two x2 upsampling stages and a projection to the
// full-resolution per-pixel embedding.
class PixelDecoder {
 public:
  PixelDecoder() = default;
  PixelDecoder(ParamStore& ps, const std::string& name, int in_dim, int d, int d_up, int d_out, Rng& rng);
  PixelDecoderFeatures forward(const Var& grid, int gh, int gw) const;

 private:
  Conv2d mid_conv_;
  UpsampleConv2x up1_, up2_;
  Linear out_proj_;
};

// Stage-1 query decoding: self-attention, cross-attention into the enhanced
// spatial grid, cross-attention into the enhanced spectral tokens, MLP; all
// pre-norm residual.
class Stage1Decoder {
 public:
  Stage1Decoder() = default;
  Stage1Decoder(ParamStore& ps, const std::string& name, int d, int spa_dim, int spec_dim, int heads, Rng& rng);
  Var forward(const Var& queries, const Var& spa_kv, const Var& spec_kv) const;

 private:
  LayerNorm norm_self_;
  MultiHeadAttention self_attn_;
  CrossAttentionBlock cross_spa_, cross_spec_;
  LayerNorm norm_mlp_;
  Mlp mlp_;
};

// logits(x,y) = < linear(mean over query rows), linear(pixel_feat(x,y)) >.
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(ParamStore& ps, const std::string& name, int query_dim, int pixel_dim, int embed_dim, Rng& rng);
  Var forward(const Var& queries, const Var& pixel_feat) const;  // [n_pixels x 1] logits

  Linear query_embed, pixel_embed;
};

// Three cross-attention layers whose pre-softmax bias admits only pixels the
// coarse mask marks foreground, then one self-attention layer over queries.
// An empty foreground set falls back to unmasked attention for that pass.
class ForegroundAttention {
 public:
  ForegroundAttention() = default;
  ForegroundAttention(ParamStore& ps, const std::string& name, int d, int pd_dim, int heads, Rng& rng);
  // fg: 0/1 per mid-resolution pixel (prob >= 0.5), detached from the graph.
  Var forward(const Var& queries, const Var& f_pd, const std::vector<uint8_t>& fg,
              const std::string& probe_tag = std::string()) const;

 private:
  struct MaskLayer {
    CrossAttentionBlock cross;
  };
  std::vector<MaskLayer> layers_;
  LayerNorm norm_self_;
  MultiHeadAttention self_attn_;
};

// Bias matrix for mask attention: 0 on foreground columns, -inf elsewhere.
Tensor foreground_bias(int n_queries, const std::vector<uint8_t>& fg);

}  // namespace omnifuse

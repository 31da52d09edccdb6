#pragma once

#include "omnifuse/datacube.hpp"
#include "omnifuse/nn.hpp"

namespace omnifuse {

struct EncoderConfig {
  int c = 64;          // spatial channel count (F_CNN / F_swin)
  int l_spec = 32;     // spectral token dim
  int window_size = 8;
  int n_heads = 4;
  int n_spatial_blocks = 2;
  int n_scan_layers = 2;

  void validate() const;
};

// [h*w x s] constant input grid for a cube; the differentiable entry point.
Var cube_to_var(const HyperspectralCube& cube);

// 1x1 band-mixing convolution (S -> C) followed by two stride-2 3x3 conv
// stages; output grid is H/4 x W/4.
class CnnStem {
 public:
  CnnStem() = default;
  CnnStem(ParamStore& ps, const std::string& name, int bands, const EncoderConfig& cfg, Rng& rng);
  Var forward(const Var& cube_grid, int h, int w) const;

 private:
  Linear band_mix_;
  Conv2d stage1_, stage2_;
};

// Pairs of (windowed, shifted-windowed) multi-head self-attention blocks with
// pre-norm residuals and MLPs. No positional terms; the conv stem upstream and
// the patch-embed encoding downstream carry location.
class SwinEncoder {
 public:
  SwinEncoder() = default;
  SwinEncoder(ParamStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng);
  Var forward(const Var& grid, int gh, int gw) const;

 private:
  struct HalfBlock {
    LayerNorm norm_attn;
    MultiHeadAttention attn;
    LayerNorm norm_mlp;
    Mlp mlp;
  };
  Var attend_windows(const HalfBlock& hb, const Var& grid, int gh, int gw, int shift, const std::string& tag) const;

  int window_ = 8;
  std::vector<HalfBlock> halves_;  // 2 per spatial block: regular, shifted
  IndexCache part_cache_[2], inv_cache_[2];  // indexed by shifted/not
};

// Bidirectional diagonal state-space scan over the band axis. The cube is
// average-pooled to the H' x W' grid, each band value lifted to l_spec dims,
// then h_t = a (*) h_{t-1} + x_t B, y_t = h_t C run in both directions with
// separate parameters; sums are residual-added and layer-normalized. The
// spatial mean gives one token per band.
class SpectralScan {
 public:
  SpectralScan() = default;
  // use_scan=false keeps only the lift (the no-Mamba ablation path).
  SpectralScan(ParamStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng, bool use_scan = true);
  Var forward(const Var& cube_grid, int h, int w, int bands) const;  // -> [S x l_spec]

  struct Direction {
    Var decay_logit;  // [l]; a = sigmoid(decay_logit)
    Var b_in, c_out;  // [l x l]
  };
  struct Layer {
    Direction fwd, bwd;
    LayerNorm norm;
  };

  const std::vector<Layer>& layers() const { return layers_; }
  bool scanning() const { return use_scan_; }

 private:
  std::vector<Var> scan_direction(const Direction& dir, const std::vector<Var>& xs, bool reverse) const;

  Linear lift_;
  std::vector<Layer> layers_;
  int l_ = 32;
  bool use_scan_ = true;
};

}  // namespace omnifuse

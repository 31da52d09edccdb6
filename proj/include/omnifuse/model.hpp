#pragma once

#include "omnifuse/decoder.hpp"
#include "omnifuse/encoders.hpp"

namespace omnifuse {

// Table-2 style module switches. A disabled module is replaced by the
// simplest shape-preserving substitute, so any combination runs end to end.
struct AblationFlags {
  bool cnn = true;    // conv stem + windowed attention (off: pooled band mix)
  bool mamba = true;  // bidirectional scan (off: lift only)
  bool cfe = true;    // deformable/spectral self-attn + bidirectional cross-attn
  bool sqs = true;    // spectral-guided selection (off: first N_q tokens)
  bool ssd = true;    // stage-1 query decoding (off: per-pixel linear coarse head)
  bool mr = true;     // mask refinement (off: bilinear upsample of the coarse logits)

  bool all_off() const { return !cnn && !mamba && !cfe && !sqs && !ssd && !mr; }
  std::string describe() const;
};

struct ModelConfig {
  int bands = 16;  // S the model is built for
  EncoderConfig enc;
  int d = 64;  // common token dim after patch embedding
  int n_q = 16;
  int k_deform = 4;
  int n_enhance_layers = 2;
  int enhance_heads = 4;
  int d_pixel = 64;  // pixel decoder mid dim
  int d_up = 32;     // pixel decoder upsampling dim
  int d_out = 16;    // pixel decoder final per-pixel dim
  int dec_heads = 4;
  AblationFlags flags;

  void validate() const;
  std::string describe() const;
};

struct ForwardResult {
  Var coarse_logits;   // [(h/4)*(w/4) x 1]
  Var refined_logits;  // [h*w x 1]
  int h = 0, w = 0;
  std::vector<int> query_indices;

  // Detached diagnostics for redundancy scoring and embedding export.
  Tensor pre_cfe_spec, post_cfe_spec;     // [S x l_spec]
  Tensor raw_spa_tokens, cfe_spa_tokens;  // [N_spa x d]
  Tensor selected_tokens, decoded_tokens;
};

class OmniFuseModel {
 public:
  OmniFuseModel(const ModelConfig& cfg, uint64_t init_seed);

  ForwardResult forward(const Var& cube_grid, int h, int w) const;
  ForwardResult forward(const HyperspectralCube& cube) const;

  static SegmentationMask threshold_mask(const Tensor& logits, int h, int w);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParamStore params_;

  CnnStem stem_;
  SwinEncoder swin_;
  Linear spatial_fallback_;
  SpectralScan scan_;
  DeformableSelfAttention deform_;
  SpectralSelfAttention spec_sa_;
  Enhancer enhancer_;
  PatchEmbed patch_embed_;
  PixelDecoder pixel_decoder_;
  Stage1Decoder stage1_;
  MaskHead coarse_head_;
  Linear coarse_pixel_head_;
  ForegroundAttention fg_attn_;
  MaskHead refine_head_;
};

}  // namespace omnifuse

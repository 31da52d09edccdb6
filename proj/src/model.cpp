#include "omnifuse/model.hpp"

#include <sstream>

namespace omnifuse {

std::string AblationFlags::describe() const {
  std::ostringstream os;
  os << "cnn=" << cnn << " mamba=" << mamba << " cfe=" << cfe << " sqs=" << sqs << " ssd=" << ssd << " mr=" << mr;
  return os.str();
}

void ModelConfig::validate() const {
  enc.validate();
  if (bands < 2) throw ParameterError("model config: bands must be >= 2");
  if (d % 4 != 0) throw ParameterError("model config: d must be a multiple of 4");
  if (d % dec_heads != 0 || d % enhance_heads != 0) throw ParameterError("model config: d must be divisible by head counts");
  if (n_q < 1) throw ParameterError("model config: n_q must be >= 1");
  if (k_deform < 1) throw ParameterError("model config: k_deform must be >= 1");
  if (n_enhance_layers < 1) throw ParameterError("model config: n_enhance_layers must be >= 1");
}

std::string ModelConfig::describe() const {
  std::ostringstream os;
  os << "bands=" << bands << " c=" << enc.c << " l_spec=" << enc.l_spec << " window=" << enc.window_size
     << " heads=" << enc.n_heads << " spatial_blocks=" << enc.n_spatial_blocks << " scan_layers=" << enc.n_scan_layers
     << " d=" << d << " n_q=" << n_q << " k_deform=" << k_deform << " enhance_layers=" << n_enhance_layers
     << " enhance_heads=" << enhance_heads << " d_pixel=" << d_pixel << " d_up=" << d_up << " d_out=" << d_out
     << " dec_heads=" << dec_heads << " " << flags.describe();
  return os.str();
}

OmniFuseModel::OmniFuseModel(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  const auto& e = cfg_.enc;

  if (cfg_.flags.cnn) {
    stem_ = CnnStem(params_, "stem", cfg_.bands, e, rng);
    swin_ = SwinEncoder(params_, "swin", e, rng);
  } else {
    spatial_fallback_ = Linear(params_, "spatial_fallback", cfg_.bands, e.c, rng);
  }
  scan_ = SpectralScan(params_, "scan", e, rng, cfg_.flags.mamba);
  if (cfg_.flags.cfe) {
    deform_ = DeformableSelfAttention(params_, "cfe.deform", e.c, e.n_heads, cfg_.k_deform, rng);
    spec_sa_ = SpectralSelfAttention(params_, "cfe.spec_sa", e.l_spec, std::min(cfg_.enhance_heads, e.l_spec), rng);
    enhancer_ = Enhancer(params_, "cfe.enhance", e.c, e.l_spec, cfg_.d, cfg_.enhance_heads, cfg_.n_enhance_layers, rng);
  }
  patch_embed_ = PatchEmbed(params_, "embed", e.c, e.l_spec, cfg_.d, rng);
  pixel_decoder_ = PixelDecoder(params_, "pd", e.c, cfg_.d_pixel, cfg_.d_up, cfg_.d_out, rng);
  if (cfg_.flags.ssd) {
    stage1_ = Stage1Decoder(params_, "ssd", cfg_.d, e.c, e.l_spec, cfg_.dec_heads, rng);
    coarse_head_ = MaskHead(params_, "coarse_head", cfg_.d, cfg_.d_pixel, cfg_.d, rng);
  } else {
    coarse_pixel_head_ = Linear(params_, "coarse_pixel_head", cfg_.d_pixel, 1, rng);
  }
  if (cfg_.flags.mr) {
    fg_attn_ = ForegroundAttention(params_, "mr", cfg_.d, cfg_.d_pixel, cfg_.dec_heads, rng);
    refine_head_ = MaskHead(params_, "refine_head", cfg_.d, cfg_.d_out, cfg_.d, rng);
  }
}

ForwardResult OmniFuseModel::forward(const Var& cube_grid, int h, int w) const {
  if (h % 8 != 0 || w % 8 != 0) {
    throw ShapeError("forward: H and W must be divisible by 8, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (cube_grid.rows() != h * w || cube_grid.cols() != cfg_.bands) {
    throw ShapeError("forward: cube grid is " + cube_grid.value().shape_str() + ", expected [" +
                     std::to_string(h * w) + " x " + std::to_string(cfg_.bands) + "]");
  }
  const int gh = h / 4, gw = w / 4;
  const int n_spa = (gh / 2) * (gw / 2);
  if (cfg_.n_q > n_spa) {
    throw ParameterError("forward: N_q=" + std::to_string(cfg_.n_q) + " exceeds N_spa=" + std::to_string(n_spa));
  }

  ForwardResult r;
  r.h = h;
  r.w = w;

  Var grid = cfg_.flags.cnn ? swin_.forward(stem_.forward(cube_grid, h, w), gh, gw)
                            : spatial_fallback_.forward(pool_mean(cube_grid, h, w, 4));
  Var spec = scan_.forward(cube_grid, h, w, cfg_.bands);
  r.pre_cfe_spec = spec.value();

  Var f2_spa = grid, f2_spec = spec;
  if (cfg_.flags.cfe) {
    Var f1_spa = deform_.forward(grid, gh, gw, "cfe.deform");
    Var f1_spec = spec_sa_.forward(spec, "cfe.spec_sa");
    auto enhanced = enhancer_.forward(f1_spa, f1_spec);
    f2_spa = enhanced.first;
    f2_spec = enhanced.second;
  }
  r.post_cfe_spec = f2_spec.value();

  Var spa_tokens = patch_embed_.spatial(f2_spa, gh, gw);
  Var spec_tokens = patch_embed_.spectral(f2_spec);
  r.raw_spa_tokens = cfg_.flags.cfe ? patch_embed_.spatial(grid, gh, gw).value() : spa_tokens.value();
  r.cfe_spa_tokens = spa_tokens.value();

  if (cfg_.flags.sqs) {
    r.query_indices = select_query_indices(spa_tokens.value(), spec_tokens.value(), cfg_.n_q);
  } else {
    r.query_indices.resize(static_cast<size_t>(cfg_.n_q));
    for (int i = 0; i < cfg_.n_q; ++i) r.query_indices[static_cast<size_t>(i)] = i;
  }
  Var queries = take_rows(spa_tokens, r.query_indices);
  r.selected_tokens = queries.value();

  PixelDecoderFeatures pd = pixel_decoder_.forward(f2_spa, gh, gw);

  Var coarse;
  if (cfg_.flags.ssd) {
    Var decoded = stage1_.forward(queries, f2_spa, f2_spec);
    r.decoded_tokens = decoded.value();
    coarse = coarse_head_.forward(decoded, pd.mid);
  } else {
    r.decoded_tokens = queries.value();
    coarse = coarse_pixel_head_.forward(pd.mid);
  }
  r.coarse_logits = coarse;

  if (cfg_.flags.mr) {
    // prob >= 0.5 is exactly logit >= 0; thresholding stays off the tape.
    std::vector<uint8_t> fg(static_cast<size_t>(gh) * gw);
    for (int i = 0; i < gh * gw; ++i) fg[static_cast<size_t>(i)] = coarse.value()[i] >= 0.0 ? 1 : 0;
    Var f_o = fg_attn_.forward(queries, pd.mid, fg, "mr");
    r.refined_logits = refine_head_.forward(f_o, pd.final);
  } else {
    r.refined_logits = upsample_bilinear(coarse, gh, gw, h, w);
  }
  return r;
}

ForwardResult OmniFuseModel::forward(const HyperspectralCube& cube) const {
  if (cube.s != cfg_.bands) {
    throw ShapeError("forward: cube has " + std::to_string(cube.s) + " bands, model expects " + std::to_string(cfg_.bands));
  }
  return forward(cube_to_var(cube), cube.h, cube.w);
}

SegmentationMask OmniFuseModel::threshold_mask(const Tensor& logits, int h, int w) {
  SegmentationMask m;
  m.h = h;
  m.w = w;
  m.data.resize(static_cast<size_t>(h) * w);
  for (int64_t i = 0; i < logits.size(); ++i) m.data[static_cast<size_t>(i)] = logits[i] >= 0.0 ? 1 : 0;
  return m;
}

}  // namespace omnifuse

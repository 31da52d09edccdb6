#include "omnifuse/decoder.hpp"

#include <limits>

namespace omnifuse {

PixelDecoder::PixelDecoder(ParamStore& ps, const std::string& name, int in_dim, int d, int d_up, int d_out, Rng& rng) {
  mid_conv_ = Conv2d(ps, name + ".mid", in_dim, d, 3, 1, 1, rng);
  up1_ = UpsampleConv2x(ps, name + ".up1", d, d_up, rng);
  up2_ = UpsampleConv2x(ps, name + ".up2", d_up, d_up, rng);
  out_proj_ = Linear(ps, name + ".out", d_up, d_out, rng);
}

PixelDecoderFeatures PixelDecoder::forward(const Var& grid, int gh, int gw) const {
  PixelDecoderFeatures f;
  f.mid = mid_conv_.forward(grid, gh, gw);
  f.mid_h = gh;
  f.mid_w = gw;
  Var x = gelu(up1_.forward(f.mid, gh, gw));
  x = gelu(up2_.forward(x, 2 * gh, 2 * gw));
  f.final = out_proj_.forward(x);
  f.out_h = 4 * gh;
  f.out_w = 4 * gw;
  return f;
}

Stage1Decoder::Stage1Decoder(ParamStore& ps, const std::string& name, int d, int spa_dim, int spec_dim, int heads,
                             Rng& rng) {
  norm_self_ = LayerNorm(ps, name + ".norm_self", d);
  self_attn_ = MultiHeadAttention(ps, name + ".self", d, d, d, d, heads, rng);
  cross_spa_ = CrossAttentionBlock(ps, name + ".cross_spa", d, spa_dim, d, heads, rng);
  cross_spec_ = CrossAttentionBlock(ps, name + ".cross_spec", d, spec_dim, d, heads, rng);
  norm_mlp_ = LayerNorm(ps, name + ".norm_mlp", d);
  mlp_ = Mlp(ps, name + ".mlp", d, 4 * d, rng);
}

Var Stage1Decoder::forward(const Var& queries, const Var& spa_kv, const Var& spec_kv) const {
  Var normed = norm_self_.forward(queries);
  Var q = add(queries, self_attn_.forward(normed, normed, nullptr, "ssd.self"));
  q = cross_spa_.forward(q, spa_kv, "ssd.cross_spa");
  q = cross_spec_.forward(q, spec_kv, "ssd.cross_spec");
  return add(q, mlp_.forward(norm_mlp_.forward(q)));
}

MaskHead::MaskHead(ParamStore& ps, const std::string& name, int query_dim, int pixel_dim, int embed_dim, Rng& rng) {
  query_embed = Linear(ps, name + ".query", query_dim, embed_dim, rng);
  pixel_embed = Linear(ps, name + ".pixel", pixel_dim, embed_dim, rng);
}

Var MaskHead::forward(const Var& queries, const Var& pixel_feat) const {
  Var e = query_embed.forward(mean_rows(queries));  // [1 x embed]
  Var p = pixel_embed.forward(pixel_feat);          // [n x embed]
  return matmul(p, transpose(e));                   // [n x 1]
}

ForegroundAttention::ForegroundAttention(ParamStore& ps, const std::string& name, int d, int pd_dim, int heads,
                                         Rng& rng) {
  for (int l = 0; l < 3; ++l) {
    MaskLayer layer;
    layer.cross = CrossAttentionBlock(ps, name + ".mask" + std::to_string(l), d, pd_dim, d, heads, rng);
    layers_.push_back(std::move(layer));
  }
  norm_self_ = LayerNorm(ps, name + ".norm_self", d);
  self_attn_ = MultiHeadAttention(ps, name + ".self", d, d, d, d, heads, rng);
}

Tensor foreground_bias(int n_queries, const std::vector<uint8_t>& fg) {
  const int n = static_cast<int>(fg.size());
  Tensor bias({n_queries, n});
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) {
    const double b = fg[static_cast<size_t>(j)] ? 0.0 : neg_inf;
    for (int i = 0; i < n_queries; ++i) bias.at(i, j) = b;
  }
  return bias;
}

Var ForegroundAttention::forward(const Var& queries, const Var& f_pd, const std::vector<uint8_t>& fg,
                                 const std::string& probe_tag) const {
  if (static_cast<int>(fg.size()) != f_pd.rows()) throw ShapeError("foreground_attention: mask/feature size mismatch");
  bool any_fg = false;
  for (uint8_t v : fg) any_fg |= v != 0;

  Tensor bias;
  if (any_fg) bias = foreground_bias(queries.rows(), fg);
  Var q = queries;
  for (size_t l = 0; l < layers_.size(); ++l) {
    const std::string tag = probe_tag.empty() ? probe_tag : probe_tag + ".mask" + std::to_string(l);
    q = layers_[l].cross.forward(q, f_pd, tag, any_fg ? &bias : nullptr);
  }
  Var normed = norm_self_.forward(q);
  return add(q, self_attn_.forward(normed, normed, nullptr, probe_tag.empty() ? probe_tag : probe_tag + ".self"));
}

}  // namespace omnifuse

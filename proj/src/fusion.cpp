#include "omnifuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace omnifuse {

DeformableSelfAttention::DeformableSelfAttention(ParamStore& ps, const std::string& name, int dim, int heads,
                                                 int k_points, Rng& rng, double out_scale)
    : heads_(heads), k_(k_points), dim_(dim) {
  if (dim % heads != 0) throw ParameterError(name + ": dim must be divisible by heads");
  norm = LayerNorm(ps, name + ".norm", dim);
  // Offsets start at zero so every sample opens at its reference point.
  offset_head = Linear(ps, name + ".offsets", dim, heads * k_points * 2, rng, 0.0);
  weight_head = Linear(ps, name + ".weights", dim, heads * k_points, rng, 0.0);
  value_proj = Linear(ps, name + ".value", dim, dim, rng);
  out_proj = Linear(ps, name + ".out", dim, dim, rng, out_scale);
}

Var DeformableSelfAttention::forward(const Var& grid, int gh, int gw, const std::string& probe_tag) const {
  const int n = gh * gw;
  if (grid.rows() != n || grid.cols() != dim_) throw ShapeError("deformable attention: bad grid shape");
  Var x = norm.forward(grid);
  Var offsets = offset_head.forward(x);                              // [n x heads*k*2]
  Var logits = weight_head.forward(x);                               // [n x heads*k]
  Var values = value_proj.forward(x);                                // [n x dim]
  const int dh = dim_ / heads_;

  Tensor ref({n, 2});
  for (int y = 0; y < gh; ++y)
    for (int xx = 0; xx < gw; ++xx) {
      ref.at(y * gw + xx, 0) = xx;
      ref.at(y * gw + xx, 1) = y;
    }

  std::vector<Var> head_outs;
  head_outs.reserve(static_cast<size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Var vh = slice_cols(values, h * dh, (h + 1) * dh);
    Var wl = slice_cols(logits, h * k_, (h + 1) * k_);
    Var weights = softmax_rows(wl, probe_tag.empty() ? probe_tag : probe_tag + ".h" + std::to_string(h));
    std::vector<Var> samples;  // each [n x dh], one per sampling point
    samples.reserve(static_cast<size_t>(k_));
    for (int k = 0; k < k_; ++k) {
      const int col = (h * k_ + k) * 2;
      Var coords = add(slice_cols(offsets, col, col + 2), Var::constant(ref));
      samples.push_back(bilinear_sample(vh, gh, gw, coords));
    }
    Var acc;
    for (int k = 0; k < k_; ++k) {
      Var weighted = mul_colvec(samples[static_cast<size_t>(k)], slice_cols(weights, k, k + 1));
      acc = k == 0 ? weighted : add(acc, weighted);
    }
    head_outs.push_back(acc);
  }
  Var merged = heads_ == 1 ? head_outs[0] : concat_cols(head_outs);
  return add(grid, out_proj.forward(merged));
}

SpectralSelfAttention::SpectralSelfAttention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng) {
  norm1_ = LayerNorm(ps, name + ".norm1", dim);
  attn_ = MultiHeadAttention(ps, name + ".attn", dim, dim, dim, dim, heads, rng);
  norm2_ = LayerNorm(ps, name + ".norm2", dim);
  mlp_ = Mlp(ps, name + ".mlp", dim, 4 * dim, rng);
}

Var SpectralSelfAttention::forward(const Var& tokens, const std::string& probe_tag) const {
  Var normed = norm1_.forward(tokens);
  Var x = add(tokens, attn_.forward(normed, normed, nullptr, probe_tag));
  return add(x, mlp_.forward(norm2_.forward(x)));
}

CrossAttentionBlock::CrossAttentionBlock(ParamStore& ps, const std::string& name, int x_dim, int kv_dim, int d_model,
                                         int heads, Rng& rng, double out_scale) {
  norm_x_ = LayerNorm(ps, name + ".norm_q", x_dim);
  norm_kv_ = LayerNorm(ps, name + ".norm_kv", kv_dim);
  attn_ = MultiHeadAttention(ps, name + ".attn", x_dim, kv_dim, d_model, x_dim, heads, rng, out_scale);
}

Var CrossAttentionBlock::forward(const Var& x, const Var& kv, const std::string& probe_tag,
                                 const Tensor* mask_bias) const {
  return add(x, attn_.forward(norm_x_.forward(x), norm_kv_.forward(kv), mask_bias, probe_tag));
}

Enhancer::Enhancer(ParamStore& ps, const std::string& name, int spa_dim, int spec_dim, int d_model, int heads,
                   int n_layers, Rng& rng) {
  for (int l = 0; l < n_layers; ++l) {
    const std::string ln = name + ".layer" + std::to_string(l);
    spa_from_spec_.emplace_back(ps, ln + ".spa_from_spec", spa_dim, spec_dim, d_model, heads, rng);
    spec_from_spa_.emplace_back(ps, ln + ".spec_from_spa", spec_dim, spa_dim, d_model, heads, rng);
  }
}

std::pair<Var, Var> Enhancer::forward(const Var& spa, const Var& spec) const {
  Var s = spa, t = spec;
  for (size_t l = 0; l < spa_from_spec_.size(); ++l) {
    // Both directions read this layer's inputs; neither sees the other's update.
    Var s_next = spa_from_spec_[l].forward(s, t, "enhance.l" + std::to_string(l) + ".spa");
    Var t_next = spec_from_spa_[l].forward(t, s, "enhance.l" + std::to_string(l) + ".spec");
    s = s_next;
    t = t_next;
  }
  return {s, t};
}

PatchEmbed::PatchEmbed(ParamStore& ps, const std::string& name, int spa_dim, int spec_dim, int d, Rng& rng) {
  spa_proj = Linear(ps, name + ".spa", 4 * spa_dim, d, rng);
  spec_proj = Linear(ps, name + ".spec", spec_dim, d, rng);
}

Var PatchEmbed::spatial(const Var& grid, int gh, int gw) const {
  if (gh % 2 != 0 || gw % 2 != 0) throw ShapeError("patch_embed: grid dims must be even, got " + std::to_string(gh) + "x" + std::to_string(gw));
  const int c = grid.cols();
  const int oh = gh / 2, ow = gw / 2;
  auto idx = cache_.get((static_cast<int64_t>(gh) * 100000 + gw) * 1000 + c % 1000, [&] {
    auto built = std::make_shared<std::vector<int64_t>>();
    built->reserve(static_cast<size_t>(oh) * ow * 4 * c);
    for (int py = 0; py < oh; ++py)
      for (int px = 0; px < ow; ++px)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            for (int ch = 0; ch < c; ++ch)
              built->push_back((static_cast<int64_t>(2 * py + dy) * gw + (2 * px + dx)) * c + ch);
    return built;
  });
  Var patches = gather(grid, idx, {oh * ow, 4 * c});
  Var tokens = spa_proj.forward(patches);
  return add(tokens, Var::constant(sinusoidal_grid_encoding(oh, ow, tokens.cols())));
}

Var PatchEmbed::spectral(const Var& tokens) const { return spec_proj.forward(tokens); }

std::vector<int> select_query_indices(const Tensor& spa_tokens, const Tensor& spec_tokens, int n_q) {
  const int n_spa = spa_tokens.rows();
  const int n_spec = spec_tokens.rows();
  const int d = spa_tokens.cols();
  if (spec_tokens.cols() != d) throw ShapeError("select_queries: token dims differ");
  if (n_q < 1 || n_q > n_spa) {
    throw ParameterError("select_queries: N_q must lie in [1, " + std::to_string(n_spa) + "], got " + std::to_string(n_q));
  }
  std::vector<double> scores(static_cast<size_t>(n_spa));
  for (int i = 0; i < n_spa; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n_spec; ++j) {
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += spa_tokens.at(i, k) * spec_tokens.at(j, k);
      best = std::max(best, dot);
    }
    scores[static_cast<size_t>(i)] = best;
  }
  std::vector<int> order(static_cast<size_t>(n_spa));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
  order.resize(static_cast<size_t>(n_q));
  std::sort(order.begin(), order.end());
  return order;
}

Var take_rows(const Var& x, const std::vector<int>& indices) {
  const int n = x.cols();
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(indices.size() * static_cast<size_t>(n));
  for (int r : indices) {
    if (r < 0 || r >= x.rows()) throw ShapeError("take_rows: index out of range");
    for (int j = 0; j < n; ++j) idx->push_back(static_cast<int64_t>(r) * n + j);
  }
  return gather(x, idx, {static_cast<int>(indices.size()), n});
}

}  // namespace omnifuse

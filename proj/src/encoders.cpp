#include "omnifuse/encoders.hpp"

#include <cmath>

namespace omnifuse {

void EncoderConfig::validate() const {
  if (c % n_heads != 0) throw ParameterError("encoder config: C must be divisible by n_heads");
  if (c < 1 || l_spec < 1 || window_size < 1 || n_spatial_blocks < 0 || n_scan_layers < 1) {
    throw ParameterError("encoder config: non-positive field");
  }
}

Var cube_to_var(const HyperspectralCube& cube) {
  Tensor t({cube.h * cube.w, cube.s});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(cube.data[static_cast<size_t>(i)]);
  return Var::constant(std::move(t));
}

CnnStem::CnnStem(ParamStore& ps, const std::string& name, int bands, const EncoderConfig& cfg, Rng& rng) {
  band_mix_ = Linear(ps, name + ".band_mix", bands, cfg.c, rng);
  stage1_ = Conv2d(ps, name + ".stage1", cfg.c, cfg.c, 3, 2, 1, rng);
  stage2_ = Conv2d(ps, name + ".stage2", cfg.c, cfg.c, 3, 2, 1, rng);
}

Var CnnStem::forward(const Var& cube_grid, int h, int w) const {
  if (h % 4 != 0 || w % 4 != 0) {
    throw ShapeError("cnn_extract: H and W must be divisible by 4, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  Var x = band_mix_.forward(cube_grid);
  x = gelu(stage1_.forward(x, h, w));
  x = gelu(stage2_.forward(x, h / 2, w / 2));
  return x;  // [h/4 * w/4, c]
}

SwinEncoder::SwinEncoder(ParamStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : window_(cfg.window_size) {
  for (int b = 0; b < cfg.n_spatial_blocks; ++b) {
    for (int half = 0; half < 2; ++half) {
      const std::string hn = name + ".b" + std::to_string(b) + (half == 0 ? ".win" : ".swin");
      HalfBlock hb;
      hb.norm_attn = LayerNorm(ps, hn + ".norm1", cfg.c);
      hb.attn = MultiHeadAttention(ps, hn + ".attn", cfg.c, cfg.c, cfg.c, cfg.c, cfg.n_heads, rng);
      hb.norm_mlp = LayerNorm(ps, hn + ".norm2", cfg.c);
      hb.mlp = Mlp(ps, hn + ".mlp", cfg.c, 4 * cfg.c, rng);
      halves_.push_back(std::move(hb));
    }
  }
}

namespace {

// Row permutation taking a [gh*gw x C] grid to window-major token order,
// after an optional cyclic shift of the grid.
std::shared_ptr<std::vector<int64_t>> window_partition_idx(int gh, int gw, int c, int win, int shift) {
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<size_t>(gh) * gw * c);
  for (int wy = 0; wy < gh / win; ++wy)
    for (int wx = 0; wx < gw / win; ++wx)
      for (int ty = 0; ty < win; ++ty)
        for (int tx = 0; tx < win; ++tx) {
          const int y = ((wy * win + ty) + shift + gh) % gh;
          const int x = ((wx * win + tx) + shift + gw) % gw;
          for (int ch = 0; ch < c; ++ch) idx->push_back((static_cast<int64_t>(y) * gw + x) * c + ch);
        }
  return idx;
}

std::shared_ptr<std::vector<int64_t>> invert_permutation(const std::vector<int64_t>& idx) {
  auto inv = std::make_shared<std::vector<int64_t>>(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) (*inv)[static_cast<size_t>(idx[i])] = static_cast<int64_t>(i);
  return inv;
}

}  // namespace

Var SwinEncoder::attend_windows(const HalfBlock& hb, const Var& grid, int gh, int gw, int shift,
                                const std::string& tag) const {
  const int c = grid.cols();
  const int win = window_;
  const int tokens_per_window = win * win;
  const int n_windows = (gh / win) * (gw / win);

  const int which = shift == 0 ? 0 : 1;
  const int64_t key = (static_cast<int64_t>(gh) * 100000 + gw) * 1000 + c % 1000;
  auto part = part_cache_[which].get(key, [&] { return window_partition_idx(gh, gw, c, win, shift); });
  auto inv = inv_cache_[which].get(key, [&] { return invert_permutation(*part); });
  Var normed = hb.norm_attn.forward(grid);
  Var windows = gather(normed, part, {gh * gw, c});
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(n_windows));
  for (int wi = 0; wi < n_windows; ++wi) {
    Var tokens = slice_rows(windows, wi * tokens_per_window, (wi + 1) * tokens_per_window);
    outs.push_back(hb.attn.forward(tokens, tokens, nullptr, tag + ".w" + std::to_string(wi)));
  }
  Var merged = n_windows == 1 ? outs[0] : concat_rows(outs);
  Var restored = gather(merged, inv, {gh * gw, c});
  Var x = add(grid, restored);
  return add(x, hb.mlp.forward(hb.norm_mlp.forward(x)));
}

Var SwinEncoder::forward(const Var& grid, int gh, int gw) const {
  if (gh % window_ != 0 || gw % window_ != 0) {
    throw ShapeError("windowed attention: window_size " + std::to_string(window_) + " must divide grid " +
                     std::to_string(gh) + "x" + std::to_string(gw));
  }
  Var x = grid;
  const int shift = window_ / 2;
  for (size_t i = 0; i < halves_.size(); ++i) {
    const bool shifted = i % 2 == 1;
    x = attend_windows(halves_[i], x, gh, gw, shifted ? shift : 0,
                       "swin.h" + std::to_string(i) + (shifted ? ".s" : ""));
  }
  return x;
}

SpectralScan::SpectralScan(ParamStore& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng, bool use_scan)
    : l_(cfg.l_spec), use_scan_(use_scan) {
  lift_ = Linear(ps, name + ".lift", 1, cfg.l_spec, rng);
  if (!use_scan_) return;
  // sigmoid(2.1972...) = 0.9: decay starts long-memoried but trainable.
  const double decay_init = std::log(0.9 / 0.1);
  for (int layer = 0; layer < cfg.n_scan_layers; ++layer) {
    const std::string ln = name + ".layer" + std::to_string(layer);
    Layer l;
    for (int d = 0; d < 2; ++d) {
      Direction& dir = d == 0 ? l.fwd : l.bwd;
      const std::string dn = ln + (d == 0 ? ".fwd" : ".bwd");
      dir.decay_logit = ps.create(dn + ".decay", Tensor::full({cfg.l_spec}, decay_init), false);
      dir.b_in = ps.create(dn + ".b", glorot_normal({cfg.l_spec, cfg.l_spec}, cfg.l_spec, cfg.l_spec, rng), true);
      dir.c_out = ps.create(dn + ".c", glorot_normal({cfg.l_spec, cfg.l_spec}, cfg.l_spec, cfg.l_spec, rng), true);
    }
    l.norm = LayerNorm(ps, ln + ".norm", cfg.l_spec);
    layers_.push_back(std::move(l));
  }
}

std::vector<Var> SpectralScan::scan_direction(const Direction& dir, const std::vector<Var>& xs, bool reverse) const {
  const int s = static_cast<int>(xs.size());
  Var a = sigmoid(dir.decay_logit);
  std::vector<Var> ys(static_cast<size_t>(s));
  Var h;
  for (int step = 0; step < s; ++step) {
    const int t = reverse ? s - 1 - step : step;
    Var bx = matmul(xs[static_cast<size_t>(t)], dir.b_in);
    h = step == 0 ? bx : add(mul_rowvec(h, a), bx);
    ys[static_cast<size_t>(t)] = matmul(h, dir.c_out);
  }
  return ys;
}

Var SpectralScan::forward(const Var& cube_grid, int h, int w, int bands) const {
  if (h % 4 != 0 || w % 4 != 0) throw ShapeError("spectral_scan: H and W must be divisible by 4");
  Var pooled = pool_mean(cube_grid, h, w, 4);  // [p x bands]
  const int p = pooled.rows();

  // Lift each band's scalar to l dims: x_t = v_t * w + b.
  std::vector<Var> xs;
  xs.reserve(static_cast<size_t>(bands));
  for (int t = 0; t < bands; ++t) xs.push_back(lift_.forward(slice_cols(pooled, t, t + 1)));

  if (use_scan_) {
    for (const auto& layer : layers_) {
      auto yf = scan_direction(layer.fwd, xs, false);
      auto yb = scan_direction(layer.bwd, xs, true);
      for (int t = 0; t < bands; ++t) {
        Var y = add(add(yf[static_cast<size_t>(t)], yb[static_cast<size_t>(t)]), xs[static_cast<size_t>(t)]);
        xs[static_cast<size_t>(t)] = layer.norm.forward(y);
      }
    }
  }

  std::vector<Var> tokens;
  tokens.reserve(static_cast<size_t>(bands));
  for (int t = 0; t < bands; ++t) tokens.push_back(mean_rows(xs[static_cast<size_t>(t)]));
  (void)p;
  return bands == 1 ? tokens[0] : concat_rows(tokens);
}

}  // namespace omnifuse

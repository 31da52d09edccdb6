#include "omnifuse/nn.hpp"

#include <cmath>
#include <limits>

namespace omnifuse {

Var ParamStore::create(const std::string& name, Tensor init, bool decay) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ParameterError("duplicate parameter name: " + name);
  }
  Var v = Var::leaf(std::move(init), true);
  entries_.push_back({name, v, decay});
  return v;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) {
    Tensor& g = e.var.node()->grad;
    if (g.size() != 0) g.fill(0.0);
  }
}

Var* ParamStore::find(const std::string& name) {
  for (auto& e : entries_) {
    if (e.name == name) return &e.var;
  }
  return nullptr;
}

int64_t ParamStore::count_scalars() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

Tensor glorot_normal(const std::vector<int>& shape, int fan_in, int fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
  return Tensor::randn(shape, rng, stddev);
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, double weight_scale) {
  Tensor wt = glorot_normal({in, out}, in, out, rng);
  for (int64_t i = 0; i < wt.size(); ++i) wt[i] *= weight_scale;
  w = ps.create(name + ".w", std::move(wt), true);
  b = ps.create(name + ".b", Tensor::zeros({out}), false);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim) {
  gamma = ps.create(name + ".gamma", Tensor::full({dim}, 1.0), false);
  beta = ps.create(name + ".beta", Tensor::zeros({dim}), false);
}

Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, const Tensor* mask_bias,
                         const std::string& probe_tag) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  Var scores = mul_scalar(matmul(q, transpose(k)), scale);
  if (mask_bias != nullptr) scores = add(scores, Var::constant(*mask_bias));
  Var probs = softmax_rows(scores, probe_tag);
  return matmul(probs, v);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, int q_dim, int kv_dim, int d_model,
                                       int out_dim, int heads, Rng& rng, double out_scale)
    : heads_(heads), d_model_(d_model) {
  if (d_model % heads != 0) throw ParameterError(name + ": d_model must be divisible by heads");
  wq = Linear(ps, name + ".wq", q_dim, d_model, rng);
  wk = Linear(ps, name + ".wk", kv_dim, d_model, rng);
  wv = Linear(ps, name + ".wv", kv_dim, d_model, rng);
  wo = Linear(ps, name + ".wo", d_model, out_dim, rng, out_scale);
}

Var MultiHeadAttention::forward(const Var& q, const Var& kv, const Tensor* mask_bias,
                                const std::string& probe_tag) const {
  const Var qp = wq.forward(q);
  const Var kp = wk.forward(kv);
  const Var vp = wv.forward(kv);
  const int dh = d_model_ / heads_;
  std::vector<Var> head_outs;
  head_outs.reserve(static_cast<size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    const Var qh = slice_cols(qp, h * dh, (h + 1) * dh);
    const Var kh = slice_cols(kp, h * dh, (h + 1) * dh);
    const Var vh = slice_cols(vp, h * dh, (h + 1) * dh);
    const std::string tag = probe_tag.empty() ? probe_tag : probe_tag + ".h" + std::to_string(h);
    head_outs.push_back(scaled_dot_attention(qh, kh, vh, mask_bias, tag));
  }
  return wo.forward(heads_ == 1 ? head_outs[0] : concat_cols(head_outs));
}

Mlp::Mlp(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng, double out_scale) {
  fc1 = Linear(ps, name + ".fc1", dim, hidden, rng);
  fc2 = Linear(ps, name + ".fc2", hidden, dim, rng, out_scale);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng)
    : in_ch_(in_ch), k_(ksize), stride_(stride), pad_(pad) {
  const int fan_in = ksize * ksize * in_ch;
  w = ps.create(name + ".w", glorot_normal({fan_in, out_ch}, fan_in, out_ch, rng), true);
  b = ps.create(name + ".b", Tensor::zeros({out_ch}), false);
}

Var Conv2d::forward(const Var& x, int h, int w_in) const {
  if (x.rows() != h * w_in || x.cols() != in_ch_) {
    throw ShapeError("Conv2d: input is " + x.value().shape_str() + ", expected [" + std::to_string(h * w_in) + " x " +
                     std::to_string(in_ch_) + "]");
  }
  const int oh = out_h(h), ow = out_w(w_in);
  auto idx = cache_.get(static_cast<int64_t>(h) * 100000 + w_in, [&] {
    auto built = std::make_shared<std::vector<int64_t>>();
    built->reserve(static_cast<size_t>(oh) * ow * k_ * k_ * in_ch_);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx) {
            const int iy = oy * stride_ + ky - pad_;
            const int ix = ox * stride_ + kx - pad_;
            const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w_in;
            for (int c = 0; c < in_ch_; ++c) {
              built->push_back(inside ? (static_cast<int64_t>(iy) * w_in + ix) * in_ch_ + c : -1);
            }
          }
        }
      }
    }
    return built;
  });
  Var cols = gather(x, idx, {oh * ow, k_ * k_ * in_ch_});
  return add_rowvec(matmul(cols, w), b);
}

UpsampleConv2x::UpsampleConv2x(ParamStore& ps, const std::string& name, int in_ch, int out_ch, Rng& rng)
    : in_ch_(in_ch) {
  conv_ = Conv2d(ps, name + ".conv", in_ch, out_ch, 3, 1, 1, rng);
}

Var UpsampleConv2x::forward(const Var& x, int h, int w) const {
  const int c = in_ch_;
  const int oh = 2 * h, ow = 2 * w;
  auto idx = cache_.get(static_cast<int64_t>(h) * 100000 + w, [&] {
    auto built = std::make_shared<std::vector<int64_t>>();
    built->reserve(static_cast<size_t>(oh) * ow * c);
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const bool hit = (y % 2 == 0) && (xx % 2 == 0);
        for (int ch = 0; ch < c; ++ch) {
          built->push_back(hit ? (static_cast<int64_t>(y / 2) * w + xx / 2) * c + ch : -1);
        }
      }
    }
    return built;
  });
  Var sparse = gather(x, idx, {oh * ow, c});
  return conv_.forward(sparse, oh, ow);
}

Tensor sinusoidal_grid_encoding(int gh, int gw, int dim) {
  if (dim % 4 != 0) throw ParameterError("sinusoidal_grid_encoding: dim must be a multiple of 4");
  Tensor enc({gh * gw, dim});
  const int quarter = dim / 4;
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      double* row = enc.data() + (static_cast<size_t>(y) * gw + x) * dim;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / (dim / 2.0));
        row[i] = std::sin(y * freq);
        row[quarter + i] = std::cos(y * freq);
        row[2 * quarter + i] = std::sin(x * freq);
        row[3 * quarter + i] = std::cos(x * freq);
      }
    }
  }
  return enc;
}

}  // namespace omnifuse

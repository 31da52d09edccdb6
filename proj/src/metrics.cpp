#include "omnifuse/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace omnifuse {

namespace {

void check_shapes(const SegmentationMask& a, const SegmentationMask& b, const char* op) {
  if (a.h != b.h || a.w != b.w) throw ShapeError(std::string(op) + ": mask shapes differ");
}

struct Overlap {
  int64_t a = 0, b = 0, inter = 0;
};

Overlap overlap(const SegmentationMask& pred, const SegmentationMask& gt) {
  Overlap o;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    o.a += pred.data[i] != 0;
    o.b += gt.data[i] != 0;
    o.inter += (pred.data[i] != 0) && (gt.data[i] != 0);
  }
  return o;
}

}  // namespace

double dsc(const SegmentationMask& pred, const SegmentationMask& gt) {
  check_shapes(pred, gt, "dsc");
  const Overlap o = overlap(pred, gt);
  if (o.a == 0 && o.b == 0) return 1.0;
  if (o.a == 0 || o.b == 0) return 0.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.a + o.b);
}

double iou(const SegmentationMask& pred, const SegmentationMask& gt) {
  check_shapes(pred, gt, "iou");
  const Overlap o = overlap(pred, gt);
  if (o.a == 0 && o.b == 0) return 1.0;
  if (o.a == 0 || o.b == 0) return 0.0;
  return static_cast<double>(o.inter) / static_cast<double>(o.a + o.b - o.inter);
}

namespace {

// Background sentinel: large but finite so the parabola intersections in the
// lower-envelope pass stay well-defined. Converted back to +inf on output.
constexpr double kFar = 1e12;

// Felzenszwalb-Huttenlocher 1-D lower envelope of parabolas.
void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + q * q) - (f[v[static_cast<size_t>(k)]] + v[static_cast<size_t>(k)] * v[static_cast<size_t>(k)])) /
               (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
    while (s <= z[static_cast<size_t>(k)]) {
      --k;
      s = ((f[q] + q * q) - (f[v[static_cast<size_t>(k)]] + v[static_cast<size_t>(k)] * v[static_cast<size_t>(k)])) /
          (2.0 * q - 2.0 * v[static_cast<size_t>(k)]);
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<size_t>(k)];
    d[q] = (q - p) * static_cast<double>(q - p) + f[p];
  }
}

}  // namespace

std::vector<double> squared_edt(const SegmentationMask& mask) {
  const int h = mask.h, w = mask.w;
  std::vector<double> dist(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < dist.size(); ++i) dist[i] = mask.data[i] ? 0.0 : kFar;

  const int n = std::max(h, w);
  std::vector<double> f(static_cast<size_t>(n)), d(static_cast<size_t>(n)), z(static_cast<size_t>(n) + 1);
  std::vector<int> v(static_cast<size_t>(n));

  for (int x = 0; x < w; ++x) {  // columns first
    for (int y = 0; y < h; ++y) f[static_cast<size_t>(y)] = dist[static_cast<size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) dist[static_cast<size_t>(y) * w + x] = d[static_cast<size_t>(y)];
  }
  for (int y = 0; y < h; ++y) {
    edt_1d(dist.data() + static_cast<size_t>(y) * w, w, d.data(), v, z);
    for (int x = 0; x < w; ++x) dist[static_cast<size_t>(y) * w + x] = d[static_cast<size_t>(x)];
  }
  for (auto& q : dist) {
    if (q >= kFar) q = std::numeric_limits<double>::infinity();
  }
  return dist;
}

double hausdorff(const SegmentationMask& pred, const SegmentationMask& gt) {
  check_shapes(pred, gt, "hausdorff");
  int64_t na = 0, nb = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    na += pred.data[i] != 0;
    nb += gt.data[i] != 0;
  }
  if (na == 0 && nb == 0) return 0.0;
  if (na == 0 || nb == 0) return std::sqrt(static_cast<double>(pred.h) * pred.h + static_cast<double>(pred.w) * pred.w);

  const auto dist_to_gt = squared_edt(gt);
  const auto dist_to_pred = squared_edt(pred);
  double worst = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    if (pred.data[i]) worst = std::max(worst, dist_to_gt[i]);
    if (gt.data[i]) worst = std::max(worst, dist_to_pred[i]);
  }
  return std::sqrt(worst);
}

double spectral_redundancy(const Tensor& tokens) {
  if (tokens.ndim() != 2) throw ShapeError("spectral_redundancy: tokens must be [S x L]");
  const int s = tokens.rows(), l = tokens.cols();
  if (s < 2) throw ParameterError("spectral_redundancy: needs at least 2 tokens");
  if (l < 2) throw ParameterError("spectral_redundancy: token dim must be >= 2");

  auto stats = [&](int row, double& mean, double& var) {
    mean = 0.0;
    for (int j = 0; j < l; ++j) mean += tokens.at(row, j);
    mean /= l;
    var = 0.0;
    for (int j = 0; j < l; ++j) var += (tokens.at(row, j) - mean) * (tokens.at(row, j) - mean);
  };

  double total = 0.0;
  for (int t = 0; t + 1 < s; ++t) {
    double m0, v0, m1, v1;
    stats(t, m0, v0);
    stats(t + 1, m1, v1);
    if (v0 <= 0.0 || v1 <= 0.0) continue;  // constant token pairs contribute 0
    double cov = 0.0;
    for (int j = 0; j < l; ++j) cov += (tokens.at(t, j) - m0) * (tokens.at(t + 1, j) - m1);
    total += std::abs(cov / std::sqrt(v0 * v1));
  }
  return total / (s - 1);
}

void export_embeddings(const std::vector<EmbeddingRow>& rows, int dim, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings CSV: " + path);
  out << "stage,token_index,label";
  for (int i = 0; i < dim; ++i) out << ",dim_" << i;
  out << "\n";
  out.precision(10);
  for (const auto& r : rows) {
    if (static_cast<int>(r.dims.size()) != dim) throw ShapeError("export_embeddings: row dim mismatch");
    out << r.stage << "," << r.token_index << "," << r.label;
    for (double v : r.dims) out << "," << v;
    out << "\n";
  }
  if (!out) throw IoError("failed writing embeddings CSV: " + path);
}

}  // namespace omnifuse

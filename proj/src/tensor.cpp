#include "omnifuse/tensor.hpp"

#include <cmath>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace omnifuse {

int64_t numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str());
  }
  data_.assign(static_cast<size_t>(numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (static_cast<int64_t>(data_.size()) != numel(shape_)) {
    throw ShapeError("value count does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(const std::vector<int>& shape) { return Tensor(shape); }

Tensor Tensor::full(const std::vector<int>& shape, double value) {
  Tensor t(shape);
  t.fill(value);
  return t;
}

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

Tensor Tensor::uniform(const std::vector<int>& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double value) { data_.assign(data_.size(), value); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

namespace {
constexpr int64_t kParallelGemmThreshold = 1 << 14;
}

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  const int64_t work = static_cast<int64_t>(m) * k * n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelGemmThreshold)
#endif
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<size_t>(i) * n;
    if (!accumulate) {
      for (int j = 0; j < n; ++j) ci[j] = 0.0;
    }
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  (void)work;
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  const int64_t work = static_cast<int64_t>(m) * k * n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelGemmThreshold)
#endif
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<size_t>(i) * n;
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
  (void)work;
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  const int64_t work = static_cast<int64_t>(m) * k * n;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelGemmThreshold)
#endif
  for (int i = 0; i < k; ++i) {
    double* ci = c + static_cast<size_t>(i) * n;
    if (!accumulate) {
      for (int j = 0; j < n; ++j) ci[j] = 0.0;
    }
    for (int p = 0; p < m; ++p) {
      const double av = a[static_cast<size_t>(p) * k + i];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  (void)work;
}

}  // namespace omnifuse

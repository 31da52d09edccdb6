#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omnifuse/common.hpp"

namespace omnifuse {

int64_t numel(const std::vector<int>& shape);

// Dense row-major tensor of doubles. Ranks stay small (<= 3); everything is
// double so finite-difference gradient checks are meaningful.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double value);
  static Tensor randn(const std::vector<int>& shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(const std::vector<int>& shape, Rng& rng, double lo, double hi);

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  // 2-D accessors; most of the math is on matrices.
  int rows() const { return shape_[0]; }
  int cols() const { return shape_[1]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double value);
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// C (+)= op(A) * op(B) with row-major operands. Deterministic under OpenMP:
// each output row is owned by exactly one thread and reduced in fixed order.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);

}  // namespace omnifuse

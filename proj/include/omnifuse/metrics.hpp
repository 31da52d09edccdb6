#pragma once

#include "omnifuse/datacube.hpp"
#include "omnifuse/tensor.hpp"

namespace omnifuse {

struct MetricReport {
  double dsc = 0.0;
  double iou = 0.0;
  double hd = 0.0;
  int n_scenes = 0;
};

// Overlap metrics on binary masks. Both-empty pairs score 1, one-empty 0.
double dsc(const SegmentationMask& pred, const SegmentationMask& gt);
double iou(const SegmentationMask& pred, const SegmentationMask& gt);

// Symmetric Hausdorff distance over foreground pixel coordinates, Euclidean.
// Both empty -> 0; exactly one empty -> image diagonal. Computed with an
// exact squared distance transform rather than the quadratic point scan.
double hausdorff(const SegmentationMask& pred, const SegmentationMask& gt);

// Exact squared Euclidean distance transform of the foreground set.
// All-background input gives +inf everywhere.
std::vector<double> squared_edt(const SegmentationMask& mask);

// Mean absolute Pearson correlation between adjacent token rows [S x L].
// Pairs touching a constant token contribute 0.
double spectral_redundancy(const Tensor& tokens);

struct EmbeddingRow {
  std::string stage;  // raw | CFE | SQS | SSD
  int token_index = 0;
  int label = 0;  // 0 background, 1 tumor
  std::vector<double> dims;
};

// CSV: stage,token_index,label,dim_0..dim_{d-1}.
void export_embeddings(const std::vector<EmbeddingRow>& rows, int dim, const std::string& path);

}  // namespace omnifuse

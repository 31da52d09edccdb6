#pragma once

#include "omnifuse/metrics.hpp"
#include "omnifuse/model.hpp"

namespace omnifuse {

struct LossWeights {
  double lambda_ce = 0.25;
  double lambda_dice = 0.75;
  double lambda_w = 0.8;
  void validate() const;
};

Tensor mask_to_tensor(const SegmentationMask& mask);  // [h*w x 1] of 0/1

// Soft Dice with epsilon 1.0: 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
Var dice_loss(const Var& prob, const Tensor& gt);
// Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].
Var ce_loss(const Var& prob, const Tensor& gt);
// lambda_ce * CE + lambda_dice * Dice on sigmoid of the logits.
Var stage_loss(const Var& logits, const Tensor& gt, const LossWeights& lw);
// lambda_w * stage1(P_c vs nearest-downsampled gt) + (1-lambda_w) * stage2.
Var total_loss(const Var& coarse_logits, const Var& refined_logits, const SegmentationMask& gt, const LossWeights& lw);

struct TrainConfig {
  double lr = 0.005;
  double weight_decay = 1e-4;
  int batch_size = 4;
  int epochs = 50;
  uint64_t seed = 0;
  double grad_clip = 1.0;
  double lr_final_ratio = 1e-5;  // cosine decay floor as a fraction of lr
  LossWeights loss;
  AugmentationSpec aug;
  void validate() const;
};

// Decoupled weight decay Adam. Decay applies to parameters flagged as
// weights; biases and norm affines are skipped.
class AdamW {
 public:
  AdamW(ParamStore& ps, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  // Scales all gradients so their global L2 norm is at most max_norm.
  double clip_global_norm(double max_norm);

 private:
  ParamStore* ps_;
  std::vector<Tensor> m_, v_;
  double wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

struct Scene {
  HyperspectralCube cube;
  SegmentationMask mask;
};

// read_envi + read_mask_pgm + per-band min-max normalization.
Scene load_scene(const SceneRecord& record);
std::vector<Scene> load_scenes(const std::vector<SceneRecord>& records);

struct MetricLogRow {
  int epoch = 0;
  std::string split;
  double dsc = 0.0, iou = 0.0, hd = 0.0, loss = 0.0;
};

void write_metric_log(const std::vector<MetricLogRow>& rows, const std::string& path);

struct TrainResult {
  std::vector<MetricLogRow> log;
  int best_epoch = -1;
  double best_val_dsc = -1.0;
  std::vector<Tensor> best_params;  // snapshot at the best validation DSC
  std::vector<Tensor> final_params;
};

TrainResult train(OmniFuseModel& model, const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                  const TrainConfig& cfg);

void snapshot_params(const ParamStore& ps, std::vector<Tensor>& out);
void restore_params(ParamStore& ps, const std::vector<Tensor>& snapshot);

MetricReport evaluate(const OmniFuseModel& model, const std::vector<Scene>& scenes, const LossWeights& lw,
                      double* mean_loss = nullptr, std::vector<MetricReport>* per_scene = nullptr);

// Raw little-endian doubles keyed by parameter name; reload is bit-exact.
void save_checkpoint(const ParamStore& ps, const std::string& path);
void load_checkpoint(ParamStore& ps, const std::string& path);
void write_checkpoint_manifest(const std::string& path, int epoch, uint64_t config_hash, double val_dsc);

uint64_t fnv1a_hash(const std::string& text);

}  // namespace omnifuse

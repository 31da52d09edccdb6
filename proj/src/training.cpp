#include "omnifuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace omnifuse {

void LossWeights::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(lambda_ce) || !in_unit(lambda_dice) || !in_unit(lambda_w)) {
    throw ParameterError("loss weights must lie in [0, 1]");
  }
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ParameterError("train config: lr must be > 0");
  if (batch_size < 1) throw ParameterError("train config: batch_size must be >= 1");
  if (epochs < 0) throw ParameterError("train config: epochs must be >= 0");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw ParameterError("train config: negative decay/clip");
  loss.validate();
  aug.validate();
}

Tensor mask_to_tensor(const SegmentationMask& mask) {
  Tensor t({mask.h * mask.w, 1});
  for (size_t i = 0; i < mask.data.size(); ++i) t[static_cast<int64_t>(i)] = mask.data[i] ? 1.0 : 0.0;
  return t;
}

Var dice_loss(const Var& prob, const Tensor& gt) {
  if (!prob.value().same_shape(gt)) {
    throw ShapeError("dice_loss: shape mismatch " + prob.value().shape_str() + " vs " + gt.shape_str());
  }
  constexpr double eps = 1.0;
  Var pg = sum_all(mul(prob, Var::constant(gt)));
  Var p_sum = sum_all(prob);
  double g_sum = 0.0;
  for (int64_t i = 0; i < gt.size(); ++i) g_sum += gt[i];
  Var numer = add_scalar(mul_scalar(pg, 2.0), eps);
  Var denom = add_scalar(p_sum, g_sum + eps);
  return add_scalar(mul_scalar(div(numer, denom), -1.0), 1.0);
}

Var ce_loss(const Var& prob, const Tensor& gt) {
  if (!prob.value().same_shape(gt)) {
    throw ShapeError("ce_loss: shape mismatch " + prob.value().shape_str() + " vs " + gt.shape_str());
  }
  Var p = clamp(prob, 1e-7, 1.0 - 1e-7);
  Tensor one_minus_gt = gt;
  for (int64_t i = 0; i < one_minus_gt.size(); ++i) one_minus_gt[i] = 1.0 - one_minus_gt[i];
  Var pos = mul(log_op(p), Var::constant(gt));
  Var neg = mul(log_op(add_scalar(mul_scalar(p, -1.0), 1.0)), Var::constant(one_minus_gt));
  return mul_scalar(mean_all(add(pos, neg)), -1.0);
}

Var stage_loss(const Var& logits, const Tensor& gt, const LossWeights& lw) {
  Var prob = sigmoid(logits);
  return add(mul_scalar(ce_loss(prob, gt), lw.lambda_ce), mul_scalar(dice_loss(prob, gt), lw.lambda_dice));
}

Var total_loss(const Var& coarse_logits, const Var& refined_logits, const SegmentationMask& gt, const LossWeights& lw) {
  const SegmentationMask coarse_gt = downsample_mask_nearest(gt, 4);
  Var s1 = stage_loss(coarse_logits, mask_to_tensor(coarse_gt), lw);
  Var s2 = stage_loss(refined_logits, mask_to_tensor(gt), lw);
  return add(mul_scalar(s1, lw.lambda_w), mul_scalar(s2, 1.0 - lw.lambda_w));
}

AdamW::AdamW(ParamStore& ps, double weight_decay, double beta1, double beta2, double eps)
    : ps_(&ps), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : ps.entries()) {
    m_.push_back(Tensor::zeros(e.var.value().shape()));
    v_.push_back(Tensor::zeros(e.var.value().shape()));
  }
}

double AdamW::clip_global_norm(double max_norm) {
  double sq = 0.0;
  for (auto& e : ps_->entries()) {
    const Tensor& g = e.var.node()->grad;
    for (int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& e : ps_->entries()) {
      Tensor& g = e.var.node()->grad;
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto& entries = ps_->entries();
  for (size_t k = 0; k < entries.size(); ++k) {
    Tensor& p = entries[k].var.node()->value;
    Tensor& g = entries[k].var.node()->grad;
    if (g.size() == 0) continue;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (int64_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      double update = mh / (std::sqrt(vh) + eps_);
      if (entries[k].decay) update += wd_ * p[i];
      p[i] -= lr * update;
    }
  }
}

Scene load_scene(const SceneRecord& record) {
  Scene s;
  s.cube = normalize_cube(read_envi(record.cube_path));
  s.cube.scene_id = record.scene_id;
  s.cube.patient_id = record.patient_id;
  s.mask = read_mask_pgm(record.mask_path);
  if (s.mask.h != s.cube.h || s.mask.w != s.cube.w) {
    throw IntegrityError("scene " + record.scene_id + ": mask shape does not match cube");
  }
  return s;
}

std::vector<Scene> load_scenes(const std::vector<SceneRecord>& records) {
  std::vector<Scene> scenes;
  scenes.reserve(records.size());
  for (const auto& r : records) scenes.push_back(load_scene(r));
  return scenes;
}

void write_metric_log(const std::vector<MetricLogRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metric log: " + path);
  out << "epoch,split,dsc,iou,hd,loss\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.epoch << "," << r.split << "," << r.dsc << "," << r.iou << "," << r.hd << "," << r.loss << "\n";
  }
}

void snapshot_params(const ParamStore& ps, std::vector<Tensor>& out) {
  out.clear();
  for (const auto& e : ps.entries()) out.push_back(e.var.value());
}

void restore_params(ParamStore& ps, const std::vector<Tensor>& snapshot) {
  if (snapshot.size() != ps.entries().size()) throw ParameterError("restore_params: snapshot size mismatch");
  for (size_t i = 0; i < snapshot.size(); ++i) ps.entries()[i].var.node()->value = snapshot[i];
}

MetricReport evaluate(const OmniFuseModel& model, const std::vector<Scene>& scenes, const LossWeights& lw,
                      double* mean_loss, std::vector<MetricReport>* per_scene) {
  MetricReport report;
  double loss_acc = 0.0;
  for (const auto& s : scenes) {
    ForwardResult r = model.forward(s.cube);
    const SegmentationMask pred = OmniFuseModel::threshold_mask(r.refined_logits.value(), r.h, r.w);
    MetricReport one;
    one.dsc = dsc(pred, s.mask);
    one.iou = iou(pred, s.mask);
    one.hd = hausdorff(pred, s.mask);
    one.n_scenes = 1;
    report.dsc += one.dsc;
    report.iou += one.iou;
    report.hd += one.hd;
    if (mean_loss != nullptr) loss_acc += total_loss(r.coarse_logits, r.refined_logits, s.mask, lw).value()[0];
    if (per_scene != nullptr) per_scene->push_back(one);
  }
  const int n = static_cast<int>(scenes.size());
  report.n_scenes = n;
  if (n > 0) {
    report.dsc /= n;
    report.iou /= n;
    report.hd /= n;
    if (mean_loss != nullptr) *mean_loss = loss_acc / n;
  }
  return report;
}

namespace {

std::string first_nonfinite_param(const ParamStore& ps) {
  for (const auto& e : ps.entries()) {
    if (!e.var.value().all_finite()) return e.name;
    const Tensor& g = e.var.node()->grad;
    for (int64_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) return e.name + " (gradient)";
    }
  }
  return "<loss only>";
}

}  // namespace

TrainResult train(OmniFuseModel& model, const std::vector<Scene>& train_scenes, const std::vector<Scene>& val_scenes,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_scenes.empty() || val_scenes.empty()) throw InsufficientDataError("train: empty train or val set");

  TrainResult result;
  Rng rng(cfg.seed);
  AdamW opt(model.params(), cfg.weight_decay);

  const int n_train = static_cast<int>(train_scenes.size());
  const int steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;
  const double lr_floor = cfg.lr * cfg.lr_final_ratio;
  int64_t step = 0;

  std::vector<int> order(static_cast<size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<size_t> pick(0, i);
      std::swap(order[i], order[pick(rng)]);
    }

    double epoch_loss = 0.0;
    MetricReport train_metrics;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int batch_n = std::min(cfg.batch_size, n_train - start);
      model.params().zero_grad();
      for (int b = 0; b < batch_n; ++b) {
        const Scene& base = train_scenes[static_cast<size_t>(order[static_cast<size_t>(start + b)])];
        const Scene* scene = &base;
        Scene augmented;
        if (cfg.aug.any_enabled()) {
          augment(base.cube, base.mask, cfg.aug, rng, augmented.cube, augmented.mask);
          scene = &augmented;
        }
        ForwardResult r = model.forward(scene->cube);
        Var loss = mul_scalar(total_loss(r.coarse_logits, r.refined_logits, scene->mask, cfg.loss), 1.0 / batch_n);
        const double loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) {
          throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is not finite; first affected parameter: " +
                                first_nonfinite_param(model.params()));
        }
        backward(loss);
        epoch_loss += loss_value * batch_n;

        const SegmentationMask pred = OmniFuseModel::threshold_mask(r.refined_logits.value(), r.h, r.w);
        train_metrics.dsc += dsc(pred, scene->mask);
        train_metrics.iou += iou(pred, scene->mask);
        train_metrics.hd += hausdorff(pred, scene->mask);
      }
      opt.clip_global_norm(cfg.grad_clip);
      const double progress = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 1.0;
      const double lr = lr_floor + 0.5 * (cfg.lr - lr_floor) * (1.0 + std::cos(M_PI * progress));
      opt.step(lr);
      ++step;
    }

    MetricLogRow train_row;
    train_row.epoch = epoch;
    train_row.split = "train";
    train_row.dsc = train_metrics.dsc / n_train;
    train_row.iou = train_metrics.iou / n_train;
    train_row.hd = train_metrics.hd / n_train;
    train_row.loss = epoch_loss / n_train;
    result.log.push_back(train_row);

    double val_loss = 0.0;
    const MetricReport val = evaluate(model, val_scenes, cfg.loss, &val_loss);
    MetricLogRow val_row;
    val_row.epoch = epoch;
    val_row.split = "val";
    val_row.dsc = val.dsc;
    val_row.iou = val.iou;
    val_row.hd = val.hd;
    val_row.loss = val_loss;
    result.log.push_back(val_row);

    if (val.dsc > result.best_val_dsc) {
      result.best_val_dsc = val.dsc;
      result.best_epoch = epoch;
      snapshot_params(model.params(), result.best_params);
    }
  }

  snapshot_params(model.params(), result.final_params);
  if (result.best_epoch < 0) {  // zero-epoch run keeps the initialization
    snapshot_params(model.params(), result.best_params);
    result.best_epoch = 0;
  }
  return result;
}

namespace {

constexpr char kCheckpointMagic[8] = {'O', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const ParamStore& ps, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  put_u32(out, static_cast<uint32_t>(ps.entries().size()));
  for (const auto& e : ps.entries()) {
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(out, static_cast<uint32_t>(e.var.value().ndim()));
    for (int i = 0; i < e.var.value().ndim(); ++i) put_u32(out, static_cast<uint32_t>(e.var.value().dim(i)));
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(e.var.value().data()), e.var.value().size() * 8);
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

void load_checkpoint(ParamStore& ps, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint file: " + path);
  const uint32_t count = get_u32(in);
  if (count != ps.entries().size()) {
    throw IntegrityError("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                         std::to_string(ps.entries().size()) + " (config mismatch?)");
  }
  for (auto& e : ps.entries()) {
    const uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != e.name) throw IntegrityError("checkpoint parameter order mismatch: got '" + name + "', expected '" + e.name + "'");
    const uint32_t ndim = get_u32(in);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u32(in));
    if (shape != e.var.value().shape()) throw IntegrityError("checkpoint shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(e.var.node()->value.data()), e.var.value().size() * 8);
  }
  if (!in) throw IntegrityError("checkpoint truncated: " + path);
}

void write_checkpoint_manifest(const std::string& path, int epoch, uint64_t config_hash, double val_dsc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint manifest: " + path);
  out.precision(10);
  out << "epoch = " << epoch << "\n";
  out << "config_hash = " << config_hash << "\n";
  out << "val_dsc = " << val_dsc << "\n";
}

uint64_t fnv1a_hash(const std::string& text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace omnifuse

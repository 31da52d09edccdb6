#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "omnifuse/gradcheck.hpp"
#include "omnifuse/metrics.hpp"
#include "omnifuse/model.hpp"
#include "omnifuse/training.hpp"

namespace fs = std::filesystem;
using namespace omnifuse;

namespace {

struct RunConfig {
  // model
  int c = 64, l_spec = 32, window = 8, heads = 4, spatial_blocks = 2, scan_layers = 2;
  int d = 64, n_q = 16, k_deform = 4, enhance_layers = 2, enhance_heads = 4;
  int d_pixel = 64, d_up = 32, d_out = 16, dec_heads = 4;
  bool no_cnn = false, no_mamba = false, no_cfe = false, no_sqs = false, no_ssd = false, no_mr = false;
  std::string input_mode = "cube";  // cube | pseudo_color
  // training
  double lr = 0.005, weight_decay = 1e-4, grad_clip = 1.0;
  int batch_size = 4, epochs = 50;
  uint64_t seed = 0;
  bool aug_rotate = false, aug_scale = false, aug_elastic = false;
  double rot_min = -15.0, rot_max = 15.0, scale_min = 0.9, scale_max = 1.1;
  double elastic_alpha = 8.0, elastic_sigma = 4.0;
  double lambda_ce = 0.25, lambda_dice = 0.75, lambda_w = 0.8;

  ModelConfig model_config(int bands) const {
    ModelConfig m;
    m.bands = bands;
    m.enc.c = c;
    m.enc.l_spec = l_spec;
    m.enc.window_size = window;
    m.enc.n_heads = heads;
    m.enc.n_spatial_blocks = spatial_blocks;
    m.enc.n_scan_layers = scan_layers;
    m.d = d;
    m.n_q = n_q;
    m.k_deform = k_deform;
    m.n_enhance_layers = enhance_layers;
    m.enhance_heads = enhance_heads;
    m.d_pixel = d_pixel;
    m.d_up = d_up;
    m.d_out = d_out;
    m.dec_heads = dec_heads;
    m.flags.cnn = !no_cnn;
    m.flags.mamba = !no_mamba;
    m.flags.cfe = !no_cfe;
    m.flags.sqs = !no_sqs;
    m.flags.ssd = !no_ssd;
    m.flags.mr = !no_mr;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr = lr;
    t.weight_decay = weight_decay;
    t.grad_clip = grad_clip;
    t.batch_size = batch_size;
    t.epochs = epochs;
    t.seed = seed;
    t.loss.lambda_ce = lambda_ce;
    t.loss.lambda_dice = lambda_dice;
    t.loss.lambda_w = lambda_w;
    t.aug.rotate_enabled = aug_rotate;
    t.aug.rotation_min_deg = rot_min;
    t.aug.rotation_max_deg = rot_max;
    t.aug.scale_enabled = aug_scale;
    t.aug.scale_min = scale_min;
    t.aug.scale_max = scale_max;
    t.aug.elastic_enabled = aug_elastic;
    t.aug.elastic_alpha = elastic_alpha;
    t.aug.elastic_sigma = elastic_sigma;
    return t;
  }
};

void add_model_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--c", rc.c, "spatial channels");
  cmd->add_option("--l-spec", rc.l_spec, "spectral token dim");
  cmd->add_option("--window", rc.window, "attention window size");
  cmd->add_option("--heads", rc.heads, "encoder attention heads");
  cmd->add_option("--spatial-blocks", rc.spatial_blocks, "windowed attention block pairs");
  cmd->add_option("--scan-layers", rc.scan_layers, "spectral scan layers");
  cmd->add_option("--d", rc.d, "token dim");
  cmd->add_option("--n-q", rc.n_q, "selected query count");
  cmd->add_option("--k-deform", rc.k_deform, "deformable sampling points");
  cmd->add_option("--enhance-layers", rc.enhance_layers, "bidirectional enhancement layers");
  cmd->add_option("--enhance-heads", rc.enhance_heads, "enhancement attention heads");
  cmd->add_option("--d-pixel", rc.d_pixel, "pixel decoder mid dim");
  cmd->add_option("--d-up", rc.d_up, "pixel decoder upsampling dim");
  cmd->add_option("--d-out", rc.d_out, "pixel decoder final dim");
  cmd->add_option("--dec-heads", rc.dec_heads, "decoder attention heads");
  cmd->add_flag("--no-cnn", rc.no_cnn, "disable conv + windowed attention stream");
  cmd->add_flag("--no-mamba", rc.no_mamba, "disable the spectral scan");
  cmd->add_flag("--no-cfe", rc.no_cfe, "disable cross-dimensional enhancement");
  cmd->add_flag("--no-sqs", rc.no_sqs, "disable spectral-guided query selection");
  cmd->add_flag("--no-ssd", rc.no_ssd, "disable stage-1 query decoding");
  cmd->add_flag("--no-mr", rc.no_mr, "disable mask refinement");
  cmd->add_option("--input", rc.input_mode, "input mode: cube | pseudo_color")
      ->check(CLI::IsMember({"cube", "pseudo_color"}));
}

void add_train_options(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--lr", rc.lr, "initial learning rate");
  cmd->add_option("--weight-decay", rc.weight_decay, "decoupled weight decay");
  cmd->add_option("--grad-clip", rc.grad_clip, "global gradient norm clip");
  cmd->add_option("--batch-size", rc.batch_size, "scenes per optimization step");
  cmd->add_option("--epochs", rc.epochs, "training epochs");
  cmd->add_option("--lambda-ce", rc.lambda_ce, "cross-entropy weight");
  cmd->add_option("--lambda-dice", rc.lambda_dice, "dice weight");
  cmd->add_option("--lambda-w", rc.lambda_w, "stage-1 weight");
  cmd->add_flag("--aug-rotate", rc.aug_rotate, "enable rotation augmentation");
  cmd->add_flag("--aug-scale", rc.aug_scale, "enable scaling augmentation");
  cmd->add_flag("--aug-elastic", rc.aug_elastic, "enable elastic deformation");
  cmd->add_option("--rot-min", rc.rot_min, "rotation range lower bound, degrees");
  cmd->add_option("--rot-max", rc.rot_max, "rotation range upper bound, degrees");
  cmd->add_option("--scale-min", rc.scale_min, "scale factor lower bound");
  cmd->add_option("--scale-max", rc.scale_max, "scale factor upper bound");
  cmd->add_option("--elastic-alpha", rc.elastic_alpha, "elastic displacement magnitude");
  cmd->add_option("--elastic-sigma", rc.elastic_sigma, "elastic smoothing sigma");
}

std::vector<Scene> load_split_scenes(const std::string& csv, const std::string& input_mode) {
  auto records = read_manifest(csv);
  std::vector<Scene> scenes;
  scenes.reserve(records.size());
  for (const auto& r : records) {
    Scene s;
    HyperspectralCube cube = read_envi(r.cube_path);
    cube.scene_id = r.scene_id;
    cube.patient_id = r.patient_id;
    if (input_mode == "pseudo_color") cube = pseudo_color_cube(cube);
    s.cube = normalize_cube(cube);
    s.mask = read_mask_pgm(r.mask_path);
    if (s.mask.h != s.cube.h || s.mask.w != s.cube.w) {
      throw IntegrityError("scene " + r.scene_id + ": mask shape does not match cube");
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

void write_resolved_config(CLI::App& app, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "resolved_config.ini");
  if (!out) throw IoError("cannot write resolved config in " + out_dir);
  out << app.config_to_str(true, true);
}

void write_prob_envi(const Tensor& logits, int h, int w, const std::string& header_path) {
  HyperspectralCube prob;
  prob.h = h;
  prob.w = w;
  prob.s = 2;  // prob + logit plane keeps the format's S >= 2 invariant
  prob.wavelengths_nm = {0.0, 1.0};
  prob.data.resize(static_cast<size_t>(h) * w * 2);
  for (int i = 0; i < h * w; ++i) {
    const double logit = logits[i];
    prob.data[static_cast<size_t>(i) * 2] = static_cast<float>(1.0 / (1.0 + std::exp(-logit)));
    prob.data[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(logit);
  }
  write_envi(prob, header_path);
}

int token_label(const SegmentationMask& mask, int token_index, int tokens_w, int patch) {
  const int ty = token_index / tokens_w, tx = token_index % tokens_w;
  int pos = 0, total = 0;
  for (int y = ty * patch; y < (ty + 1) * patch; ++y)
    for (int x = tx * patch; x < (tx + 1) * patch; ++x) {
      pos += mask.at(y, x);
      ++total;
    }
  return 2 * pos >= total ? 1 : 0;
}

void append_stage_rows(std::vector<EmbeddingRow>& rows, const std::string& stage, const Tensor& tokens,
                       const std::vector<int>* indices, const SegmentationMask& mask, int tokens_w, int patch) {
  for (int i = 0; i < tokens.rows(); ++i) {
    EmbeddingRow row;
    row.stage = stage;
    row.token_index = indices != nullptr ? (*indices)[static_cast<size_t>(i)] : i;
    row.label = token_label(mask, row.token_index, tokens_w, patch);
    row.dims.assign(tokens.data() + static_cast<size_t>(i) * tokens.cols(),
                    tokens.data() + static_cast<size_t>(i + 1) * tokens.cols());
    rows.push_back(std::move(row));
  }
}

struct TrainOutputs {
  TrainResult result;
  std::shared_ptr<OmniFuseModel> model;
  ModelConfig mc;
};

TrainOutputs run_training(const RunConfig& rc, const std::string& train_csv, const std::string& val_csv,
                          const std::string& out_dir) {
  auto train_scenes = load_split_scenes(train_csv, rc.input_mode);
  auto val_scenes = load_split_scenes(val_csv, rc.input_mode);
  if (train_scenes.empty()) throw InsufficientDataError("train split is empty");

  TrainOutputs out;
  out.mc = rc.model_config(train_scenes[0].cube.s);
  out.model = std::make_shared<OmniFuseModel>(out.mc, rc.seed);
  out.result = train(*out.model, train_scenes, val_scenes, rc.train_config());

  fs::create_directories(out_dir);
  write_metric_log(out.result.log, (fs::path(out_dir) / "metrics.csv").string());

  const uint64_t hash = fnv1a_hash(out.mc.describe());
  std::vector<Tensor> final_params;
  snapshot_params(out.model->params(), final_params);
  restore_params(out.model->params(), out.result.best_params);
  save_checkpoint(out.model->params(), (fs::path(out_dir) / "checkpoint.bin").string());
  write_checkpoint_manifest((fs::path(out_dir) / "checkpoint_manifest.txt").string(), out.result.best_epoch, hash,
                            out.result.best_val_dsc);
  restore_params(out.model->params(), final_params);
  save_checkpoint(out.model->params(), (fs::path(out_dir) / "checkpoint_final.bin").string());
  return out;
}

void write_report(const MetricReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path);
  out.precision(10);
  out << "dsc,iou,hd,n_scenes\n";
  out << report.dsc << "," << report.iou << "," << report.hd << "," << report.n_scenes << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Omni-Fuse spatial-spectral segmentation toolkit"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print help");  // frees -h for the --h option
  app.set_config("--config", "", "INI config file; command-line flags win");

  RunConfig rc;

  // synth
  std::string synth_out = "data";
  int synth_n = 16, synth_patients = 8;
  SynthParams sp;
  auto* synth = app.add_subcommand("synth", "generate synthetic scenes and a manifest");
  synth->set_help_flag("--help", "print help");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--n", synth_n, "number of scenes");
  synth->add_option("--patients", synth_patients, "number of distinct patients");
  synth->add_option("--h", sp.h, "scene height");
  synth->add_option("--w", sp.w, "scene width");
  synth->add_option("--s", sp.s, "band count");
  synth->add_option("--blobs", sp.n_blobs, "ellipse count per scene");
  synth->add_option("--noise-sigma", sp.noise_sigma, "additive noise level");
  synth->add_option("--band-corr", sp.band_correlation, "adjacent-band noise correlation");
  synth->add_option("--seed", rc.seed, "generator seed")->envname("OMNIFUSE_SEED");

  // split
  std::string split_manifest, split_out = "splits";
  auto* split = app.add_subcommand("split", "patient-centric 3:1:1 split of a manifest");
  split->add_option("--manifest", split_manifest, "manifest CSV")->required();
  split->add_option("--out", split_out, "output directory");
  split->add_option("--seed", rc.seed, "shuffle seed")->envname("OMNIFUSE_SEED");

  // train
  std::string train_csv, val_csv, train_out = "run";
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--train", train_csv, "train split CSV")->required();
  train_cmd->add_option("--val", val_csv, "val split CSV")->required();
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--seed", rc.seed, "training seed")->envname("OMNIFUSE_SEED");
  add_model_options(train_cmd, rc);
  add_train_options(train_cmd, rc);

  // eval
  std::string eval_ckpt, eval_csv, eval_out = "eval";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--split", eval_csv, "split CSV")->required();
  eval_cmd->add_option("--out", eval_out, "output directory");
  eval_cmd->add_option("--seed", rc.seed, "model construction seed")->envname("OMNIFUSE_SEED");
  add_model_options(eval_cmd, rc);

  // predict
  std::string pred_ckpt, pred_cube, pred_out = "pred";
  auto* pred_cmd = app.add_subcommand("predict", "predict masks for one cube");
  pred_cmd->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  pred_cmd->add_option("--cube", pred_cube, "ENVI header path")->required();
  pred_cmd->add_option("--out", pred_out, "output directory");
  pred_cmd->add_option("--seed", rc.seed, "model construction seed")->envname("OMNIFUSE_SEED");
  add_model_options(pred_cmd, rc);

  // diagnose
  std::string diag_ckpt, diag_csv, diag_out = "diag";
  auto* diag_cmd = app.add_subcommand("diagnose", "export embeddings and redundancy scores");
  diag_cmd->add_option("--checkpoint", diag_ckpt, "checkpoint file")->required();
  diag_cmd->add_option("--split", diag_csv, "split CSV")->required();
  diag_cmd->add_option("--out", diag_out, "output directory");
  diag_cmd->add_option("--seed", rc.seed, "model construction seed")->envname("OMNIFUSE_SEED");
  add_model_options(diag_cmd, rc);

  // ablate
  std::string abl_train, abl_val, abl_eval, abl_out = "ablation";
  std::vector<std::string> abl_combos;
  auto* abl_cmd = app.add_subcommand("ablate", "train+eval across module combinations");
  abl_cmd->add_option("--train", abl_train, "train split CSV")->required();
  abl_cmd->add_option("--val", abl_val, "val split CSV")->required();
  abl_cmd->add_option("--eval", abl_eval, "eval split CSV (defaults to the train split)");
  abl_cmd->add_option("--out", abl_out, "output directory");
  abl_cmd->add_option("--combo", abl_combos,
                      "flag combination, e.g. 'none', 'all', or 'cnn,mamba'; repeat for several rows");
  abl_cmd->add_option("--seed", rc.seed, "training seed")->envname("OMNIFUSE_SEED");
  add_model_options(abl_cmd, rc);
  add_train_options(abl_cmd, rc);

  // gradcheck (verification harness)
  std::string gc_block = "all";
  double gc_eps = 1e-5;
  uint64_t gc_seed = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of a block");
  gc_cmd->add_option("--block", gc_block, "block name or 'all'");
  gc_cmd->add_option("--eps", gc_eps, "finite-difference step");
  gc_cmd->add_option("--seed", gc_seed, "case seed")->envname("OMNIFUSE_SEED");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      if (synth_patients < 1 || synth_n < 1) throw ParameterError("synth: --n and --patients must be positive");
      fs::create_directories(synth_out);
      Rng rng(rc.seed);
      std::vector<SceneRecord> records;
      for (int i = 0; i < synth_n; ++i) {
        auto [cube, mask] = synth_scene(sp, rng);
        char id[32];
        std::snprintf(id, sizeof id, "scene_%04d", i);
        cube.scene_id = id;
        cube.patient_id = "patient_" + std::to_string(i % synth_patients);
        SceneRecord r;
        r.scene_id = cube.scene_id;
        r.patient_id = cube.patient_id;
        r.cube_path = (fs::path(synth_out) / (std::string(id) + ".hdr")).string();
        r.mask_path = (fs::path(synth_out) / (std::string(id) + ".pgm")).string();
        write_envi(cube, r.cube_path);
        write_mask_pgm(mask, r.mask_path);
        records.push_back(std::move(r));
      }
      write_manifest(records, (fs::path(synth_out) / "manifest.csv").string());
      write_resolved_config(app, synth_out);
      std::cout << "wrote " << synth_n << " scenes to " << synth_out << "\n";
    } else if (*split) {
      const auto records = read_manifest(split_manifest);
      const DatasetSplit s = patient_split(records, {3, 1, 1}, rc.seed);
      fs::create_directories(split_out);
      write_manifest(s.train, (fs::path(split_out) / "train.csv").string());
      write_manifest(s.val, (fs::path(split_out) / "val.csv").string());
      write_manifest(s.test, (fs::path(split_out) / "test.csv").string());
      write_resolved_config(app, split_out);
      std::cout << "split " << records.size() << " scenes into " << s.train.size() << "/" << s.val.size() << "/"
                << s.test.size() << "\n";
    } else if (*train_cmd) {
      TrainOutputs out = run_training(rc, train_csv, val_csv, train_out);
      write_resolved_config(app, train_out);
      std::cout << "best val dsc " << out.result.best_val_dsc << " at epoch " << out.result.best_epoch << "\n";
    } else if (*eval_cmd) {
      auto scenes = load_split_scenes(eval_csv, rc.input_mode);
      if (scenes.empty()) throw InsufficientDataError("eval split is empty");
      OmniFuseModel model(rc.model_config(scenes[0].cube.s), rc.seed);
      load_checkpoint(model.params(), eval_ckpt);
      std::vector<MetricReport> per_scene;
      const MetricReport report = evaluate(model, scenes, rc.train_config().loss, nullptr, &per_scene);
      fs::create_directories(eval_out);
      write_report(report, (fs::path(eval_out) / "report.csv").string());
      {
        auto records = read_manifest(eval_csv);
        std::ofstream ps(fs::path(eval_out) / "per_scene.csv");
        ps.precision(10);
        ps << "scene_id,dsc,iou,hd\n";
        for (size_t i = 0; i < per_scene.size(); ++i) {
          ps << records[i].scene_id << "," << per_scene[i].dsc << "," << per_scene[i].iou << "," << per_scene[i].hd << "\n";
        }
      }
      write_resolved_config(app, eval_out);
      std::cout << "dsc " << report.dsc << " iou " << report.iou << " hd " << report.hd << " over " << report.n_scenes
                << " scenes\n";
    } else if (*pred_cmd) {
      HyperspectralCube cube = read_envi(pred_cube);
      if (rc.input_mode == "pseudo_color") cube = pseudo_color_cube(cube);
      cube = normalize_cube(cube);
      OmniFuseModel model(rc.model_config(cube.s), rc.seed);
      load_checkpoint(model.params(), pred_ckpt);
      const ForwardResult r = model.forward(cube);
      fs::create_directories(pred_out);
      write_prob_envi(r.coarse_logits.value(), r.h / 4, r.w / 4, (fs::path(pred_out) / "pc.hdr").string());
      write_prob_envi(r.refined_logits.value(), r.h, r.w, (fs::path(pred_out) / "pf.hdr").string());
      write_mask_pgm(OmniFuseModel::threshold_mask(r.refined_logits.value(), r.h, r.w),
                     (fs::path(pred_out) / "label.pgm").string());
      write_resolved_config(app, pred_out);
      std::cout << "wrote predictions to " << pred_out << "\n";
    } else if (*diag_cmd) {
      auto records = read_manifest(diag_csv);
      auto scenes = load_split_scenes(diag_csv, rc.input_mode);
      if (scenes.empty()) throw InsufficientDataError("diagnose split is empty");
      OmniFuseModel model(rc.model_config(scenes[0].cube.s), rc.seed);
      load_checkpoint(model.params(), diag_ckpt);
      fs::create_directories(diag_out);
      std::ofstream red(fs::path(diag_out) / "redundancy.csv");
      red.precision(10);
      red << "scene_id,pre_cfe,post_cfe\n";
      for (size_t i = 0; i < scenes.size(); ++i) {
        const ForwardResult r = model.forward(scenes[i].cube);
        red << records[i].scene_id << "," << spectral_redundancy(r.pre_cfe_spec) << ","
            << spectral_redundancy(r.post_cfe_spec) << "\n";
        std::vector<EmbeddingRow> rows;
        const int tokens_w = r.w / 8;
        append_stage_rows(rows, "raw", r.raw_spa_tokens, nullptr, scenes[i].mask, tokens_w, 8);
        append_stage_rows(rows, "CFE", r.cfe_spa_tokens, nullptr, scenes[i].mask, tokens_w, 8);
        append_stage_rows(rows, "SQS", r.selected_tokens, &r.query_indices, scenes[i].mask, tokens_w, 8);
        append_stage_rows(rows, "SSD", r.decoded_tokens, &r.query_indices, scenes[i].mask, tokens_w, 8);
        export_embeddings(rows, r.cfe_spa_tokens.cols(),
                          (fs::path(diag_out) / ("embeddings_" + records[i].scene_id + ".csv")).string());
      }
      write_resolved_config(app, diag_out);
      std::cout << "wrote diagnostics to " << diag_out << "\n";
    } else if (*abl_cmd) {
      if (abl_combos.empty()) {
        abl_combos = {"none", "cnn", "cnn,mamba", "cnn,mamba,cfe", "cnn,mamba,cfe,sqs", "cnn,mamba,cfe,sqs,ssd", "all"};
      }
      if (abl_eval.empty()) abl_eval = abl_train;
      fs::create_directories(abl_out);
      std::ofstream table(fs::path(abl_out) / "ablation.csv");
      table.precision(10);
      table << "cnn,mamba,cfe,sqs,ssd,mr,dsc,iou,hd\n";
      for (const auto& combo : abl_combos) {
        RunConfig row_rc = rc;
        auto enabled = [&](const std::string& name) {
          if (combo == "all") return true;
          if (combo == "none") return false;
          return ("," + combo + ",").find("," + name + ",") != std::string::npos;
        };
        row_rc.no_cnn = !enabled("cnn");
        row_rc.no_mamba = !enabled("mamba");
        row_rc.no_cfe = !enabled("cfe");
        row_rc.no_sqs = !enabled("sqs");
        row_rc.no_ssd = !enabled("ssd");
        row_rc.no_mr = !enabled("mr");
        const std::string row_dir = (fs::path(abl_out) / ("combo_" + std::to_string(&combo - abl_combos.data()))).string();
        TrainOutputs out = run_training(row_rc, abl_train, abl_val, row_dir);
        auto eval_scenes = load_split_scenes(abl_eval, row_rc.input_mode);
        restore_params(out.model->params(), out.result.best_params);
        const MetricReport rep = evaluate(*out.model, eval_scenes, row_rc.train_config().loss);
        table << !row_rc.no_cnn << "," << !row_rc.no_mamba << "," << !row_rc.no_cfe << "," << !row_rc.no_sqs << ","
              << !row_rc.no_ssd << "," << !row_rc.no_mr << "," << rep.dsc << "," << rep.iou << "," << rep.hd << "\n";
        std::cout << "combo " << combo << ": dsc " << rep.dsc << "\n";
      }
      write_resolved_config(app, abl_out);
    } else if (*gc_cmd) {
      const auto names = gc_block == "all" ? gradcheck_block_names() : std::vector<std::string>{gc_block};
      double worst = 0.0;
      for (const auto& name : names) {
        const double err = gradient_check(name, gc_seed, gc_eps);
        worst = std::max(worst, err);
        std::cout << name << ": max rel err " << err << "\n";
      }
      if (worst > 1e-4) throw DivergenceError("gradient check failed: max rel err " + std::to_string(worst));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// psimap command-line interface: fit-sogmm, synth, train, render,
// bench, eval. All commands are deterministic given (seed, inputs);
// PSIMAP_THREADS pins the worker count.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "psimap/io.hpp"
#include "psimap/metrics.hpp"
#include "psimap/pipeline.hpp"
#include "psimap/synthetic.hpp"
#include "psimap/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace psimap;

namespace {

// config-file defaults with CLI override precedence: values from
// --config apply only to options the user did not pass explicitly
void apply_config_defaults(CLI::App* cmd, const std::string& config_path) {
  if (config_path.empty()) return;
  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("cannot open config file: " + config_path);
  json cfg;
  in >> cfg;
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr || opt->count() > 0) continue;
    opt->add_result(value.is_string() ? value.get<std::string>() : value.dump());
    opt->run_callback();
  }
}

void write_run_config(const std::string& out_dir, const CLI::App* cmd) {
  json j;
  for (const CLI::Option* opt : cmd->get_options()) {
    const std::string name = opt->get_name();
    if (name.rfind("--", 0) != 0) continue;
    const auto results = opt->results();
    if (results.empty()) continue;
    j[name.substr(2)] = results.size() == 1 ? json(results[0]) : json(results);
  }
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "run_config.json");
  out << j.dump(2) << "\n";
}

Binning parse_binning(const std::string& s) {
  if (s == "circle") return Binning::Circle;
  if (s == "aabb") return Binning::Aabb;
  throw std::runtime_error("unknown binning '" + s + "' (expected circle|aabb)");
}

Blending parse_blending(const std::string& s) {
  if (s == "full") return Blending::Full;
  if (s == "topk") return Blending::TopK;
  throw std::runtime_error("unknown blending '" + s + "' (expected full|topk)");
}

json loss_json(const LossReport& r) {
  json j;
  j["rgb"] = r.rgb;
  j["geo"] = r.geo;
  j["ins"] = r.ins;
  j["sem"] = r.sem;
  j["iso"] = r.iso;
  j["total"] = r.total;
  return j;
}

int run_fit_sogmm(const std::string& input, const std::string& output, double planarity,
                  int min_points, int max_depth, int em_iters) {
  const PointCloud cloud = load_ply(input);
  SogmmFitConfig cfg;
  cfg.planarity_threshold = planarity;
  cfg.min_points = min_points;
  cfg.max_depth = max_depth;
  cfg.em_iters = em_iters;
  const SogmmModel model = fit_sogmm(cloud, cfg);
  save_sogmm_model(output, model);
  std::cout << "fit-sogmm: " << cloud.size() << " points -> K=" << model.k()
            << " components, log-likelihood " << log_likelihood(model, cloud) << "\n";
  return 0;
}

int run_synth(CLI::App* cmd, const std::string& out_dir, const SyntheticSpec& spec) {
  const SyntheticScene scene = make_synthetic_scene(spec);
  save_dataset(out_dir, scene);
  write_run_config(out_dir, cmd);
  std::cout << "synth: " << scene.train_frames.size() << " train + " << scene.heldout_frames.size()
            << " heldout frames, " << scene.cloud.size() << " cloud points, "
            << scene.gt_scene.surfels.size() << " gt surfels -> " << out_dir << "\n";
  return 0;
}

struct TrainCliOptions {
  std::string dataset, out_dir;
  int steps = 2000;
  uint64_t seed = 1;
  int samples_per_component = 8;
  double queries_per_instance = 1.5;
  double planarity = 0.02;
  int min_points = 20;
  int em_iters = 10;
  int max_points_per_component = 150;
  int c_ins = 16;
  int checkpoint_every = 0;
  std::string blending = "full";
  int top_k = 16;
  // loss weights / optimizer overrides (spec defaults unless set)
  double lambda_rgb = 1.0, lambda_geo = 0.5, lambda_ins = 1.0, lambda_sem = 0.5,
         lambda_iso = 0.01;
  double lr_scale = 5e-3;
  int prune_start = 400, prune_interval = 200;
};

int run_train(CLI::App* cmd, const TrainCliOptions& opt) {
  const Dataset ds = load_dataset(opt.dataset);
  if (ds.train_frames.empty()) throw std::runtime_error("dataset has no training frames");

  SogmmFitConfig scfg;
  scfg.planarity_threshold = opt.planarity;
  scfg.min_points = opt.min_points;
  scfg.em_iters = opt.em_iters;
  scfg.max_points_per_component = opt.max_points_per_component;
  SogmmModel model = fit_sogmm(ds.cloud, scfg);

  SceneMap scene;
  scene.vocabulary = ds.vocabulary;
  scene.surfels = init_surfels(model, opt.samples_per_component,
                               static_cast<int>(ds.vocabulary.size()), opt.c_ins, opt.seed);
  init_queries_from_frame(scene, ds.train_frames[0], opt.queries_per_instance, opt.c_ins,
                          opt.seed);
  scene.attn = AttentionWeights::init(opt.c_ins, opt.c_ins, opt.seed);

  TrainConfig tcfg;
  tcfg.steps = opt.steps;
  tcfg.seed = opt.seed;
  tcfg.prune_start = opt.prune_start;
  tcfg.prune_interval = opt.prune_interval;
  tcfg.lr_scale = opt.lr_scale;
  tcfg.pipeline.raster.blending = parse_blending(opt.blending);
  tcfg.pipeline.raster.top_k = opt.top_k;
  tcfg.pipeline.weights.l_rgb = opt.lambda_rgb;
  tcfg.pipeline.weights.l_geo = opt.lambda_geo;
  tcfg.pipeline.weights.l_ins = opt.lambda_ins;
  tcfg.pipeline.weights.l_sem = opt.lambda_sem;
  tcfg.pipeline.weights.l_iso = opt.lambda_iso;

  TrainState state = TrainState::init(std::move(scene), std::move(model), tcfg);

  fs::create_directories(opt.out_dir);
  std::ofstream log_out(fs::path(opt.out_dir) / "train_log.jsonl");
  const auto on_step = [&](const TrainState& st, const StepLog& log) {
    json j;
    j["step"] = log.step;
    j["frame"] = log.frame;
    j["loss"] = loss_json(log.report);
    j["alive_queries"] = log.alive_queries;
    if (!log.prunes.empty()) {
      json prunes = json::array();
      for (const auto& p : log.prunes) {
        prunes.push_back({{"query", p.query}, {"reason", p.reason}, {"value", p.value}});
      }
      j["prunes"] = prunes;
    }
    log_out << j.dump() << "\n";
    if (opt.checkpoint_every > 0 && log.step % opt.checkpoint_every == 0) {
      save_checkpoint((fs::path(opt.out_dir) / ("checkpoint_" + std::to_string(log.step) +
                                                ".psimap")).string(),
                      st.scene);
    }
  };
  const auto logs = train(state, ds.train_frames, tcfg, on_step);

  save_checkpoint((fs::path(opt.out_dir) / "checkpoint.psimap").string(), state.scene);
  write_run_config(opt.out_dir, cmd);
  std::cout << "train: " << logs.size() << " steps, final total loss "
            << (logs.empty() ? 0.0 : logs.back().report.total) << ", alive queries "
            << state.scene.alive_query_count() << " -> " << opt.out_dir << "\n";
  return 0;
}

int run_render(CLI::App* cmd, const std::string& checkpoint, const std::string& out_dir,
               const std::string& camera_path, const std::string& dataset, int frame_idx,
               const std::string& binning, const std::string& blending, int top_k,
               const std::string& targets) {
  const SceneMap scene = load_checkpoint(checkpoint);
  Camera cam;
  if (!camera_path.empty()) {
    cam = camera_from_json_file(camera_path);
  } else if (!dataset.empty()) {
    const Dataset ds = load_dataset(dataset);
    const auto& frames = ds.heldout_frames.empty() ? ds.train_frames : ds.heldout_frames;
    if (frame_idx < 0 || frame_idx >= static_cast<int>(frames.size())) {
      throw std::runtime_error("frame index out of range");
    }
    cam = frames[frame_idx].camera;
  } else {
    throw std::runtime_error("render needs --camera or --dataset");
  }

  RasterConfig rc;
  rc.binning = parse_binning(binning);
  rc.blending = parse_blending(blending);
  rc.top_k = top_k;

  const LabelAssignment labels = assign_labels(scene.queries, nullptr, scene);
  const MatX* dist = scene.queries.empty() ? nullptr : &labels.dist;
  const RenderTargets out = render(scene, dist, cam, rc);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const bool all = targets.find("all") != std::string::npos;
  if (all || targets.find("color") != std::string::npos) {
    save_ppm((dir / "color.ppm").string(), out.color);
    save_raw((dir / "color.raw").string(), out.color);
  }
  if (all || targets.find("depth") != std::string::npos) {
    save_raw((dir / "depth.raw").string(), out.depth);
  }
  if (all || targets.find("normal") != std::string::npos) {
    save_raw((dir / "normal.raw").string(), out.normal);
  }
  if ((all || targets.find("sem") != std::string::npos) && scene.c_sem() > 0) {
    save_raw((dir / "sem_feat.raw").string(), out.sem_feat);
  }
  if ((all || targets.find("ins") != std::string::npos) && !scene.queries.empty()) {
    save_raw((dir / "ins_dist.raw").string(), out.ins_dist);
    save_raw((dir / "ins_argmax.raw").string(), out.ins_argmax);
  }
  save_raw((dir / "alpha.raw").string(), out.alpha_acc);
  write_run_config(out_dir, cmd);
  std::cout << "render: " << cam.width << "x" << cam.height << ", " << scene.surfels.size()
            << " surfels, blended " << out.blended_total << " -> " << out_dir << "\n";
  return 0;
}

int run_bench(CLI::App* cmd, const std::string& checkpoint, const std::string& camera_path,
              bool street, int street_surfels, uint64_t seed, int reps,
              const std::string& out_dir) {
  SceneMap scene;
  Camera cam;
  MatX labels;
  const MatX* labels_ptr = nullptr;
  if (street) {
    StreetSpec spec;
    spec.n_surfels = street_surfels;
    spec.seed = seed;
    StreetScene st = make_street_scene(spec);
    scene = std::move(st.scene);
    labels = std::move(st.labels);
    cam = st.camera;
    labels_ptr = &labels;
  } else {
    if (checkpoint.empty() || camera_path.empty()) {
      throw std::runtime_error("bench needs --street or both --checkpoint and --camera");
    }
    scene = load_checkpoint(checkpoint);
    cam = camera_from_json_file(camera_path);
    if (!scene.queries.empty()) {
      const LabelAssignment la = assign_labels(scene.queries, nullptr, scene);
      labels = la.dist;
      labels_ptr = &labels;
    }
  }

  RasterConfig rc;
  const BenchReport report = bench_render(scene, labels_ptr, cam, reps, rc);
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "bench.json");
    out << bench_report_to_json(report) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "bench.csv");
    out << bench_report_to_csv(report);
  }
  write_run_config(out_dir, cmd);
  for (const auto& row : report.rows) {
    std::cout << row.name << ": " << row.time_ms << " ms, " << row.fps << " fps, RN-Total "
              << row.rn_total << ", RN/Tile " << row.rn_per_tile << ", blended "
              << row.blended_total << "\n";
  }
  return 0;
}

int run_eval(CLI::App* cmd, const std::string& checkpoint, const std::string& dataset,
             const std::string& out_dir, double tau_geo, int geom_samples) {
  const SceneMap scene = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(dataset);
  if (ds.heldout_frames.empty()) throw std::runtime_error("dataset has no heldout frames");

  RasterConfig rc;
  double pq = 0, sq = 0, rq = 0, miou_sum = 0, macc_sum = 0, mcov = 0, mwcov = 0;
  const int n_classes = static_cast<int>(ds.vocabulary.size());
  std::vector<int64_t> confusion(static_cast<size_t>(n_classes) * n_classes, 0);
  for (size_t f = 0; f < ds.heldout_frames.size(); ++f) {
    const PanopticRender pred = render_panoptic(scene, ds.heldout_frames[f].camera, rc);
    const PanopticResult res =
        panoptic_quality(pred.ids, pred.classes, ds.heldout_ids[f], ds.heldout_classes[f]);
    pq += res.pq;
    sq += res.sq;
    rq += res.rq;
    macc_sum += res.macc;
    mcov += res.mcov;
    mwcov += res.mwcov;
    miou_sum += miou(pred.sem_classes, ds.heldout_classes[f]);
    for (int i = 0; i < pred.sem_classes.pixel_count(); ++i) {
      const int g = ds.heldout_classes[f].data[i];
      const int p = pred.sem_classes.data[i];
      if (g >= 0 && g < n_classes && p >= 0 && p < n_classes) {
        ++confusion[static_cast<size_t>(g) * n_classes + p];
      }
    }
  }
  const double n_f = static_cast<double>(ds.heldout_frames.size());

  const std::vector<Vec3> pred_pts = sample_surfel_points(scene, geom_samples, 0);
  const GeomResult geom = geom_metrics(pred_pts, ds.cloud.points, tau_geo);

  json j;
  j["panoptic"] = {{"pq", pq / n_f}, {"sq", sq / n_f},     {"rq", rq / n_f},
                   {"miou", miou_sum / n_f}, {"macc", macc_sum / n_f}, {"mcov", mcov / n_f},
                   {"mwcov", mwcov / n_f}};
  j["geometry"] = {{"accuracy", geom.accuracy},   {"completeness", geom.completeness},
                   {"chamfer_l1", geom.chamfer_l1}, {"precision", geom.precision},
                   {"recall", geom.recall},        {"fscore", geom.fscore},
                   {"tau", geom.tau}};
  j["heldout_frames"] = ds.heldout_frames.size();
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "metrics.json");
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "confusion.csv");
    out << "gt\\pred";
    for (const auto& name : ds.vocabulary) out << "," << name;
    out << "\n";
    for (int g = 0; g < n_classes; ++g) {
      out << ds.vocabulary[g];
      for (int p = 0; p < n_classes; ++p) {
        out << "," << confusion[static_cast<size_t>(g) * n_classes + p];
      }
      out << "\n";
    }
  }
  write_run_config(out_dir, cmd);
  std::cout << "eval: PQ " << pq / n_f << ", mIoU " << miou_sum / n_f << ", F-score "
            << geom.fscore << " -> " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psimap: SOGMM-constrained surfel mapping with query-guided panoptic learning"};
  app.require_subcommand(1);

  // fit-sogmm
  auto* fit = app.add_subcommand("fit-sogmm", "Fit a mixture model to a PLY point cloud");
  std::string fit_input, fit_output, fit_config;
  double fit_planarity = 0.02;
  int fit_min_points = 20, fit_max_depth = 16, fit_em_iters = 10;
  fit->add_option("--input", fit_input, "input PLY path")->required();
  fit->add_option("--output", fit_output, "output model path")->required();
  fit->add_option("--planarity", fit_planarity, "planarity split threshold");
  fit->add_option("--min-points", fit_min_points, "minimum points per component");
  fit->add_option("--max-depth", fit_max_depth, "maximum split depth");
  fit->add_option("--em-iters", fit_em_iters, "EM refinement iterations");
  fit->add_option("--config", fit_config, "JSON config file (CLI flags take precedence)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out, synth_config;
  SyntheticSpec spec;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--objects", spec.n_objects, "object count");
  synth->add_option("--width", spec.image_w, "image width");
  synth->add_option("--height", spec.image_h, "image height");
  synth->add_option("--train-frames", spec.n_train, "training frame count");
  synth->add_option("--heldout-frames", spec.n_heldout, "heldout frame count");
  synth->add_option("--mask-noise", spec.mask_noise, "per-(frame,instance) corruption rate");
  synth->add_option("--seed", spec.seed, "random seed");
  synth->add_option("--cloud-points", spec.cloud_points, "GT cloud size");
  synth->add_option("--config", synth_config, "JSON config file (CLI flags take precedence)");

  // train
  auto* tr = app.add_subcommand("train", "Optimize a scene on a dataset");
  TrainCliOptions topt;
  std::string train_config;
  tr->add_option("--dataset", topt.dataset, "dataset directory")->required();
  tr->add_option("--out", topt.out_dir, "output directory")->required();
  tr->add_option("--steps", topt.steps, "optimization steps");
  tr->add_option("--seed", topt.seed, "random seed");
  tr->add_option("--samples-per-component", topt.samples_per_component,
                 "surfels sampled per SOGMM component");
  tr->add_option("--queries-per-instance", topt.queries_per_instance,
                 "initial queries per first-frame instance");
  tr->add_option("--planarity", topt.planarity, "SOGMM planarity threshold");
  tr->add_option("--min-points", topt.min_points, "SOGMM min points per component");
  tr->add_option("--em-iters", topt.em_iters, "SOGMM EM iterations");
  tr->add_option("--max-points-per-component", topt.max_points_per_component,
                 "SOGMM resolution cap (0 = off)");
  tr->add_option("--c-ins", topt.c_ins, "instance feature dimension");
  tr->add_option("--checkpoint-every", topt.checkpoint_every, "periodic checkpoint interval");
  tr->add_option("--blending", topt.blending, "full|topk");
  tr->add_option("--topk", topt.top_k, "Top-K selection size");
  tr->add_option("--lambda-rgb", topt.lambda_rgb, "photometric loss weight");
  tr->add_option("--lambda-geo", topt.lambda_geo, "geometric prior loss weight");
  tr->add_option("--lambda-ins", topt.lambda_ins, "instance loss weight");
  tr->add_option("--lambda-sem", topt.lambda_sem, "semantic loss weight");
  tr->add_option("--lambda-iso", topt.lambda_iso, "isotropy loss weight");
  tr->add_option("--lr-scale", topt.lr_scale, "scale learning rate");
  tr->add_option("--prune-start", topt.prune_start, "first pruning step");
  tr->add_option("--prune-interval", topt.prune_interval, "pruning interval");
  tr->add_option("--config", train_config, "JSON config file (CLI flags take precedence)");

  // render
  auto* rd = app.add_subcommand("render", "Render a checkpoint");
  std::string rd_ckpt, rd_out, rd_cam, rd_dataset, rd_binning = "aabb", rd_blending = "full";
  std::string rd_targets = "all", rd_config;
  int rd_frame = 0, rd_topk = 16;
  rd->add_option("--checkpoint", rd_ckpt, "scene checkpoint")->required();
  rd->add_option("--out", rd_out, "output directory")->required();
  rd->add_option("--camera", rd_cam, "camera JSON file");
  rd->add_option("--dataset", rd_dataset, "dataset directory (camera source)");
  rd->add_option("--frame", rd_frame, "frame index within the dataset");
  rd->add_option("--binning", rd_binning, "circle|aabb");
  rd->add_option("--blending", rd_blending, "full|topk");
  rd->add_option("--topk", rd_topk, "Top-K selection size");
  rd->add_option("--targets", rd_targets, "comma list: color,depth,normal,sem,ins or all");
  rd->add_option("--config", rd_config, "JSON config file (CLI flags take precedence)");

  // bench
  auto* bn = app.add_subcommand("bench", "Run the four-configuration rendering ablation");
  std::string bn_ckpt, bn_cam, bn_out, bn_config;
  bool bn_street = false;
  int bn_surfels = 12000, bn_reps = 5;
  uint64_t bn_seed = 7;
  bn->add_option("--checkpoint", bn_ckpt, "scene checkpoint");
  bn->add_option("--camera", bn_cam, "camera JSON file");
  bn->add_flag("--street", bn_street, "use the built-in street-like scene");
  bn->add_option("--street-surfels", bn_surfels, "street scene surfel count");
  bn->add_option("--seed", bn_seed, "street scene seed");
  bn->add_option("--reps", bn_reps, "timed repetitions per configuration");
  bn->add_option("--out", bn_out, "output directory")->required();
  bn->add_option("--config", bn_config, "JSON config file (CLI flags take precedence)");

  // eval
  auto* ev = app.add_subcommand("eval", "Panoptic + geometric evaluation on heldout frames");
  std::string ev_ckpt, ev_dataset, ev_out, ev_config;
  double ev_tau = 0.05;
  int ev_samples = 4000;
  ev->add_option("--checkpoint", ev_ckpt, "scene checkpoint")->required();
  ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--tau-geo", ev_tau, "F-score distance threshold");
  ev->add_option("--geom-samples", ev_samples, "points sampled from surfels");
  ev->add_option("--config", ev_config, "JSON config file (CLI flags take precedence)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit->parsed()) {
      apply_config_defaults(fit, fit_config);
      return run_fit_sogmm(fit_input, fit_output, fit_planarity, fit_min_points, fit_max_depth,
                           fit_em_iters);
    }
    if (synth->parsed()) {
      apply_config_defaults(synth, synth_config);
      return run_synth(synth, synth_out, spec);
    }
    if (tr->parsed()) {
      apply_config_defaults(tr, train_config);
      return run_train(tr, topt);
    }
    if (rd->parsed()) {
      apply_config_defaults(rd, rd_config);
      return run_render(rd, rd_ckpt, rd_out, rd_cam, rd_dataset, rd_frame, rd_binning, rd_blending,
                        rd_topk, rd_targets);
    }
    if (bn->parsed()) {
      apply_config_defaults(bn, bn_config);
      return run_bench(bn, bn_ckpt, bn_cam, bn_street, bn_surfels, bn_seed, bn_reps, bn_out);
    }
    if (ev->parsed()) {
      apply_config_defaults(ev, ev_config);
      return run_eval(ev, ev_ckpt, ev_dataset, ev_out, ev_tau, ev_samples);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}

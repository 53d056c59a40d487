// Command-line front end: synth / train / render / segment / detect / eval.
// Config is a plain key=value file; any key can be overridden with --set.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "gsfield/errors.hpp"
#include "gsfield/parallel.hpp"
#include "gsfield/pipeline.hpp"
#include "gsfield/rasterizer.hpp"

namespace {

struct AppConfig {
  gsf::TrainConfig train;
  gsf::SynthSpec spec;
};

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
  std::istringstream ss(v);
  T out;
  ss >> out;
  if (ss.fail() || !ss.eof())
    throw gsf::ConfigError("bad value for '" + key + "': " + v);
  return out;
}

void apply_kv(AppConfig& c, const std::string& key, const std::string& v) {
  auto i = [&] { return parse_num<int>(v, key); };
  auto d = [&] { return parse_num<double>(v, key); };
  if (key == "phase1_iters") c.train.phase1_iters = i();
  else if (key == "phase2_iters") c.train.phase2_iters = i();
  else if (key == "lambda_ssim") c.train.lambda_ssim = d();
  else if (key == "lambda_s") c.train.lambda_s = d();
  else if (key == "lambda_c") c.train.lambda_c = d();
  else if (key == "gamma") c.train.gamma = d();
  else if (key == "tau") c.train.tau = d();
  else if (key == "knn_k") c.train.knn_k = i();
  else if (key == "t_frac") c.train.t_frac = d();
  else if (key == "sparse_loss_every") c.train.sparse_loss_every = i();
  else if (key == "recluster_every") c.train.recluster_every = i();
  else if (key == "lr_gauss") c.train.lr_gauss = d();
  else if (key == "lr_head") c.train.lr_head = d();
  else if (key == "pos_sim_threshold") c.train.pos_sim_threshold = d();
  else if (key == "feature_dim") c.train.feature_dim = i();
  else if (key == "contrastive_subsample") c.train.contrastive_subsample = i();
  else if (key == "mask_min_area") c.train.mask_min_area = i();
  else if (key == "holdout_view") c.train.holdout_view = i();
  else if (key == "n_objects") c.spec.n_objects = i();
  else if (key == "gaussians_per_object") c.spec.gaussians_per_object = i();
  else if (key == "placement_radius") c.spec.placement_radius = d();
  else if (key == "object_radius") c.spec.object_radius = d();
  else if (key == "class_dim") c.spec.class_dim = i();
  else if (key == "n_train_views") c.spec.n_train_views = i();
  else if (key == "n_test_views") c.spec.n_test_views = i();
  else if (key == "image_size") c.spec.image_size = i();
  else if (key == "teacher_stride") c.spec.teacher_stride = i();
  else if (key == "teacher_sigma") c.spec.teacher_sigma = d();
  else if (key == "separation_factor") c.spec.separation_factor = d();
  else if (key == "hard_mode") c.spec.hard_mode = i() != 0;
  else if (key == "seed") {
    uint64_t s = parse_num<uint64_t>(v, key);
    c.train.seed = s;
    c.spec.seed = s;
  } else {
    throw gsf::ConfigError("unknown config key: " + key);
  }
}

void apply_line(AppConfig& c, const std::string& line) {
  auto eq = line.find('=');
  if (eq == std::string::npos)
    throw gsf::ConfigError("expected key=value, got: " + line);
  apply_kv(c, line.substr(0, eq), line.substr(eq + 1));
}

AppConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides) {
  AppConfig c;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw gsf::IoError("cannot open config file: " + path);
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      apply_line(c, line);
    }
  }
  for (const auto& o : overrides) apply_line(c, o);
  return c;
}

gsf::SyntheticTeacher make_teacher(const gsf::Benchmark& bench) {
  return gsf::SyntheticTeacher(
      gsf::make_synthetic_truth(bench.spec, bench.truth),
      bench.spec.teacher_stride, bench.spec.teacher_sigma, bench.spec.seed);
}

gsf::Phase2Modules require_modules(gsf::Checkpoint& ck) {
  if (!ck.modules)
    throw gsf::ConfigError(
        "checkpoint has no projection head (train phase 2 first)");
  return std::move(*ck.modules);
}

const gsf::Camera& pick_camera(const gsf::Benchmark& bench, int view,
                               bool test) {
  const auto& cams = test ? bench.truth.test_cameras : bench.gt_scene.cameras;
  if (view < 0 || view >= int(cams.size()))
    throw gsf::ConfigError("view index out of range");
  return cams[size_t(view)];
}

int cmd_synth(const AppConfig& cfg, const std::string& out) {
  gsf::Scene scene;
  gsf::GroundTruth truth;
  gsf::generate(cfg.spec, scene, truth);
  gsf::PerturbConfig pc;
  pc.seed = cfg.spec.seed + 1;
  gsf::Scene init = gsf::perturb_for_training(scene, cfg.spec, pc);
  gsf::save_benchmark(out, cfg.spec, scene, init, truth);
  std::cout << "benchmark written to " << out << "\n";
  return 0;
}

int cmd_train(const AppConfig& cfg, const std::string& bench_dir,
              const std::string& out, const std::string& phase,
              const std::string& resume) {
  gsf::Benchmark bench = gsf::load_benchmark(bench_dir);
  gsf::Scene scene;
  if (!resume.empty()) {
    gsf::Checkpoint ck = gsf::load_checkpoint(resume);
    scene = std::move(ck.scene);
    scene.cameras = bench.init_scene.cameras;
    scene.train_images = bench.init_scene.train_images;
  } else {
    scene = bench.init_scene;
  }

  std::filesystem::create_directories(out);
  std::ofstream logf(std::filesystem::path(out) / "train_log.txt");
  gsf::TrainLogger log{[&](const std::string& l) { logf << l << "\n"; }};

  double psnr = 0;
  if (phase == "1" || phase == "all") {
    gsf::Phase1Result r1 = gsf::phase1_reconstruct(scene, cfg.train, log);
    psnr = r1.holdout_psnr;
    std::cout << "phase1 holdout_psnr=" << psnr << "\n";
  }
  if (phase == "2" || phase == "all") {
    gsf::SyntheticTeacher teacher = make_teacher(bench);
    gsf::Phase2Result r2 = gsf::phase2_bootstrap(scene, teacher, cfg.train, log);
    gsf::save_checkpoint(out, scene, &r2.modules);
    std::cout << "phase2 n_groups=" << r2.cluster.n_groups << "\n";
  } else {
    gsf::save_checkpoint(out, scene, nullptr);
  }
  std::cout << "checkpoint written to " << out << "\n";
  return 0;
}

int cmd_render(const std::string& ckpt, const std::string& bench_dir, int view,
               bool test, const std::string& channels,
               const std::string& out_prefix) {
  gsf::Checkpoint ck = gsf::load_checkpoint(ckpt);
  gsf::Benchmark bench = gsf::load_benchmark(bench_dir);
  const gsf::Camera& cam = pick_camera(bench, view, test);
  gsf::ClusterResult cluster = gsf::cluster_from_labels(ck.scene);

  gsf::RenderRequest req;
  req.color = channels.find("color") != std::string::npos;
  req.feature = channels.find("feature") != std::string::npos;
  req.id = channels.find("id") != std::string::npos;
  req.depth = channels.find("depth") != std::string::npos;
  req.n_groups = std::max(cluster.n_groups, 1);
  if (!req.color && !req.feature && !req.id && !req.depth)
    throw gsf::ConfigError("no channels selected");

  gsf::RenderOutput o = gsf::render(ck.scene, cam, req);
  if (req.color) {
    gsf::Image img;
    img.width = o.width;
    img.height = o.height;
    img.rgb.resize(o.color.size());
    for (size_t i = 0; i < o.color.size(); ++i)
      img.rgb[i] = float(std::clamp(o.color[i], 0.0, 1.0));
    gsf::write_ppm(out_prefix + "_color.ppm", img);
  }
  if (req.depth) {
    gsf::Tensor t = gsf::Tensor::zeros(
        gsf::Dtype::F64, {uint64_t(o.height), uint64_t(o.width)});
    std::copy(o.depth.begin(), o.depth.end(), t.as<double>().data());
    gsf::write_tensor(out_prefix + "_depth.tnsr", t);
  }
  if (req.id) {
    gsf::Tensor t = gsf::Tensor::zeros(
        gsf::Dtype::I64, {uint64_t(o.height), uint64_t(o.width)});
    std::copy(o.id_map.begin(), o.id_map.end(), t.as<int64_t>().data());
    gsf::write_tensor(out_prefix + "_id.tnsr", t);
  }
  if (req.feature) {
    gsf::Tensor t = gsf::Tensor::zeros(
        gsf::Dtype::F64,
        {uint64_t(o.height), uint64_t(o.width), uint64_t(o.feature_dim)});
    std::copy(o.feature.begin(), o.feature.end(), t.as<double>().data());
    gsf::write_tensor(out_prefix + "_feature.tnsr", t);
  }
  std::cout << "rendered view " << view << " to " << out_prefix << "_*\n";
  return 0;
}

int cmd_segment(const std::string& ckpt, const std::string& bench_dir,
                const std::string& query, const std::string& click, int view,
                bool test, const std::string& out) {
  gsf::Checkpoint ck = gsf::load_checkpoint(ckpt);
  gsf::Benchmark bench = gsf::load_benchmark(bench_dir);
  const gsf::Camera& cam = pick_camera(bench, view, test);
  gsf::ClusterResult cluster = gsf::cluster_from_labels(ck.scene);

  gsf::RenderRequest req;
  req.color = false;
  req.id = true;
  req.n_groups = std::max(cluster.n_groups, 1);
  gsf::RenderOutput o = gsf::render(ck.scene, cam, req);

  int group = -1;
  if (!query.empty()) {
    gsf::Phase2Modules modules = require_modules(ck);
    int cls = -1;
    for (size_t i = 0; i < bench.truth.class_names.size(); ++i)
      if (bench.truth.class_names[i] == query) cls = int(i);
    if (cls < 0) {
      std::string valid;
      for (const auto& n : bench.truth.class_names) valid += " " + n;
      throw gsf::ConfigError("unknown class '" + query + "'; valid:" + valid);
    }
    gsf::QueryResult q = gsf::query_text(
        ck.scene, cluster, modules.head,
        bench.truth.class_embeddings.row(cls).transpose());
    if (!q.detected) throw gsf::NumericalError("query produced no detection");
    group = q.group_id;
    for (size_t g = 0; g < q.scores.size(); ++g)
      std::printf("group %zu score %.6f%s\n", g, q.scores[g],
                  int(g) == group ? "  <- selected" : "");
  } else {
    auto comma = click.find(',');
    if (comma == std::string::npos)
      throw gsf::ConfigError("--click expects u,v");
    int u = parse_num<int>(click.substr(0, comma), "click");
    int v = parse_num<int>(click.substr(comma + 1), "click");
    gsf::QueryResult q = gsf::click_select(o.id_map, o.width, o.height, u, v);
    if (!q.detected) {
      std::cout << "no detection at (" << u << "," << v << ")\n";
      return 0;
    }
    group = q.group_id;
    std::cout << "selected group " << group << "\n";
  }

  std::vector<uint8_t> mask(o.id_map.size());
  for (size_t i = 0; i < mask.size(); ++i)
    mask[i] = o.id_map[i] == group ? 255 : 0;
  gsf::write_pgm(out, o.width, o.height, mask);
  std::cout << "mask written to " << out << "\n";
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& bench_dir,
               const std::string& out) {
  gsf::Checkpoint ck = gsf::load_checkpoint(ckpt);
  gsf::Benchmark bench = gsf::load_benchmark(bench_dir);
  gsf::Phase2Modules modules = require_modules(ck);
  gsf::ClusterResult cluster = gsf::cluster_from_labels(ck.scene);

  int nc = int(bench.truth.class_embeddings.rows());
  std::vector<std::optional<gsf::Aabb>> preds(static_cast<size_t>(nc));
  std::ostringstream rep;
  for (int c = 0; c < nc; ++c) {
    gsf::QueryResult q = gsf::query_text(
        ck.scene, cluster, modules.head,
        bench.truth.class_embeddings.row(c).transpose());
    preds[size_t(c)] = q.box;
    double iou = q.box ? gsf::iou3d(*q.box, bench.truth.boxes[size_t(c)]) : 0.0;
    char line[256];
    if (q.box)
      std::snprintf(line, sizeof line,
                    "query=%s group=%d iou=%.6f box=[%.4f,%.4f,%.4f]-[%.4f,%.4f,%.4f]\n",
                    bench.truth.class_names[size_t(c)].c_str(), q.group_id, iou,
                    q.box->min.x(), q.box->min.y(), q.box->min.z(),
                    q.box->max.x(), q.box->max.y(), q.box->max.z());
    else
      std::snprintf(line, sizeof line, "query=%s no-detection\n",
                    bench.truth.class_names[size_t(c)].c_str());
    rep << line;
  }
  char tail[128];
  std::snprintf(tail, sizeof tail, "recall25=%.6f\nrecall50=%.6f\n",
                gsf::detection_recall(preds, bench.truth.boxes, 0.25),
                gsf::detection_recall(preds, bench.truth.boxes, 0.5));
  rep << tail;
  std::ofstream f(out);
  if (!f) throw gsf::IoError("cannot write " + out);
  f << rep.str();
  std::cout << rep.str();
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& bench_dir,
             const std::string& out) {
  gsf::Checkpoint ck = gsf::load_checkpoint(ckpt);
  gsf::Benchmark bench = gsf::load_benchmark(bench_dir);
  gsf::Phase2Modules modules = require_modules(ck);
  gsf::BenchmarkMetrics m = gsf::evaluate_benchmark(ck.scene, modules, bench);
  std::string text = gsf::metrics_text(m);
  std::ofstream f(out);
  if (!f) throw gsf::IoError("cannot write " + out);
  f << text;
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"label-free semantic gaussian-splat field"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 1;
  bool deterministic = false;
  app.add_option("--config", config_path, "key=value config file")
      ->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override a config key (key=value)");
  app.add_option("--threads", threads, "worker thread count");
  app.fallthrough();
  app.add_flag("--deterministic", deterministic,
               "single-threaded, bit-reproducible mode");

  std::string out, bench_dir, ckpt, phase = "all", resume, query, click,
              channels = "color";
  int view = 0;
  bool test = false;

  auto* synth = app.add_subcommand("synth", "generate a benchmark directory");
  synth->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "run the training phases");
  train->add_option("--benchmark", bench_dir)->required();
  train->add_option("--out", out)->required();
  train->add_option("--phase", phase)->check(CLI::IsMember({"1", "2", "all"}));
  train->add_option("--in", resume, "checkpoint to resume from");

  auto* rnd = app.add_subcommand("render", "render a view from a checkpoint");
  rnd->add_option("--checkpoint", ckpt)->required();
  rnd->add_option("--benchmark", bench_dir)->required();
  rnd->add_option("--view", view);
  rnd->add_flag("--test", test, "use a test camera");
  rnd->add_option("--channels", channels, "comma list: color,depth,id,feature");
  rnd->add_option("--out", out)->required();

  auto* seg = app.add_subcommand("segment", "query a mask by text or click");
  seg->add_option("--checkpoint", ckpt)->required();
  seg->add_option("--benchmark", bench_dir)->required();
  seg->add_option("--query", query, "class name");
  seg->add_option("--click", click, "u,v pixel");
  seg->add_option("--view", view);
  seg->add_flag("--test", test);
  seg->add_option("--out", out)->required();

  auto* det = app.add_subcommand("detect", "3D boxes for every class query");
  det->add_option("--checkpoint", ckpt)->required();
  det->add_option("--benchmark", bench_dir)->required();
  det->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "full metric report");
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--benchmark", bench_dir)->required();
  ev->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    gsf::set_thread_count(deterministic ? 1 : std::max(1, threads));
    AppConfig cfg = load_config(config_path, overrides);
    if (synth->parsed()) return cmd_synth(cfg, out);
    if (train->parsed()) return cmd_train(cfg, bench_dir, out, phase, resume);
    if (rnd->parsed()) return cmd_render(ckpt, bench_dir, view, test, channels, out);
    if (seg->parsed()) {
      if (query.empty() == click.empty())
        throw gsf::ConfigError("segment needs exactly one of --query/--click");
      return cmd_segment(ckpt, bench_dir, query, click, view, test, out);
    }
    if (det->parsed()) return cmd_detect(ckpt, bench_dir, out);
    if (ev->parsed()) return cmd_eval(ckpt, bench_dir, out);
  } catch (const gsf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const gsf::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const gsf::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}

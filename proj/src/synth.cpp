#include "gsfield/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "gsfield/errors.hpp"
#include "gsfield/rasterizer.hpp"
#include "gsfield/rng.hpp"

namespace gsf {

namespace {

Eigen::Vector3f hsv_to_rgb(double h, double s, double v) {
  double r = 0, g = 0, b = 0;
  double i = std::floor(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (int(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
  }
  return Eigen::Vector3f(float(r), float(g), float(b));
}

Camera make_camera(const Eigen::Vector3f& pos, const Eigen::Vector3f& target,
                   int image_size) {
  Camera cam;
  cam.width = cam.height = image_size;
  cam.fx = cam.fy = float(image_size);  // ~53 degree fov
  cam.cx = float(image_size) / 2.f;
  cam.cy = float(image_size) / 2.f;
  Eigen::Vector3f fwd = (target - pos).normalized();
  Eigen::Vector3f world_up(0, 0, 1);
  Eigen::Vector3f right = fwd.cross(world_up).normalized();
  if (!right.allFinite() || right.norm() < 0.5f)
    right = Eigen::Vector3f(1, 0, 0);
  Eigen::Vector3f down = fwd.cross(right).normalized();
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = fwd.transpose();
  cam.translation = -cam.rotation * pos;
  return cam;
}

Image output_to_image(const RenderOutput& out) {
  Image img;
  img.width = out.width;
  img.height = out.height;
  img.rgb.resize(out.color.size());
  for (size_t i = 0; i < out.color.size(); ++i)
    img.rgb[i] = float(std::clamp(out.color[i], 0.0, 1.0));
  return img;
}

std::string fmt_name(const char* pattern, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, i);
  return buf;
}

}  // namespace

void generate(const SynthSpec& spec, Scene& scene, GroundTruth& truth) {
  if (spec.n_objects < 1 || spec.n_objects > 16)
    throw ConfigError("n_objects out of range");
  if (spec.image_size % spec.teacher_stride != 0)
    throw ConfigError("image size not divisible by teacher stride");
  if (spec.class_dim < spec.n_objects)
    throw ConfigError("class_dim must be >= n_objects");

  Rng rng = Rng(spec.seed).fork("synth");
  double sep = spec.separation_factor * (spec.hard_mode ? 0.5 : 1.0) *
               spec.object_radius;

  // rejection-sampled object centers in a flat-ish slab around the origin
  Rng prng = rng.fork("place");
  std::vector<Eigen::Vector3f> centers;
  for (int o = 0; o < spec.n_objects; ++o) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      Eigen::Vector3f c(
          float(prng.uniform(-spec.placement_radius, spec.placement_radius)),
          float(prng.uniform(-spec.placement_radius, spec.placement_radius)),
          float(prng.uniform(-0.3 * spec.placement_radius,
                             0.3 * spec.placement_radius)));
      ok = true;
      for (const auto& prev : centers)
        if ((c - prev).norm() < sep) { ok = false; break; }
      if (ok) centers.push_back(c);
    }
    if (!ok)
      throw ConfigError("object placement infeasible after 1000 tries");
  }

  // palette: evenly spaced hues; hard mode forces a shared color pair
  std::vector<Eigen::Vector3f> palette(size_t(spec.n_objects));
  for (int o = 0; o < spec.n_objects; ++o)
    palette[size_t(o)] = hsv_to_rgb(double(o) / spec.n_objects, 0.8, 0.9);
  if (spec.hard_mode && spec.n_objects >= 2) palette[1] = palette[0];

  scene = Scene{};
  truth = GroundTruth{};
  Rng grng = rng.fork("gauss");
  for (int o = 0; o < spec.n_objects; ++o) {
    // mildly anisotropic blob axes, normalized back to the RMS radius
    Eigen::Vector3d ax(grng.uniform(0.6, 1.4), grng.uniform(0.6, 1.4),
                       grng.uniform(0.6, 1.4));
    ax *= spec.object_radius / std::sqrt(ax.squaredNorm() / 3.0);
    for (int k = 0; k < spec.gaussians_per_object; ++k) {
      Gaussian g;
      for (int a = 0; a < 3; ++a) {
        // truncate at 2 sigma so blobs stay compact and neighbouring objects
        // cannot interpenetrate at the default separation
        double z = grng.normal();
        while (std::abs(z) > 2.0) z = grng.normal();
        g.position[a] = centers[size_t(o)][a] + float(ax[a] * z);
      }
      Eigen::Vector4f q(float(grng.normal()), float(grng.normal()),
                        float(grng.normal()), float(grng.normal()));
      g.rotation = q.norm() > 1e-6f ? q.normalized() : Eigen::Vector4f(1, 0, 0, 0);
      double base = 0.4 * spec.object_radius;
      for (int a = 0; a < 3; ++a)
        g.log_scale[a] = float(std::log(base * grng.uniform(0.6, 1.3)));
      g.opacity_logit = float(grng.uniform(2.0, 4.0));
      for (int a = 0; a < 3; ++a)
        g.color[a] = std::clamp(
            palette[size_t(o)][a] * float(grng.uniform(0.9, 1.1)), 0.f, 1.f);
      scene.gaussians.push_back(g);
      IdsField f;
      f.d = o;
      scene.idsf.push_back(f);
      truth.gaussian_ids.push_back(o);
    }
  }

  // class embeddings: orthogonalized random unit vectors
  Rng erng = rng.fork("embed");
  truth.class_embeddings.resize(spec.n_objects, spec.class_dim);
  for (int o = 0; o < spec.n_objects; ++o) {
    Eigen::VectorXd v(spec.class_dim);
    for (int k = 0; k < spec.class_dim; ++k) v[k] = erng.normal();
    for (int p = 0; p < o; ++p)
      v -= v.dot(truth.class_embeddings.row(p)) *
           truth.class_embeddings.row(p).transpose();
    double nrm = v.norm();
    if (nrm < 1e-9) throw NumericalError("class embedding degenerated");
    truth.class_embeddings.row(o) = v.transpose() / nrm;
    truth.class_names.push_back(fmt_name("object_%d", o));
  }

  // ground-truth boxes, same convention as group_aabb (no outlier guard)
  truth.boxes.resize(size_t(spec.n_objects));
  std::vector<bool> seen(size_t(spec.n_objects), false);
  for (size_t i = 0; i < scene.gaussians.size(); ++i) {
    int o = int(truth.gaussian_ids[i]);
    const Gaussian& g = scene.gaussians[i];
    Eigen::Vector3d p = g.position.cast<double>();
    double pad = 3.0 * double(g.scale().maxCoeff());
    Eigen::Vector3d lo = p.array() - pad, hi = p.array() + pad;
    if (!seen[size_t(o)]) {
      truth.boxes[size_t(o)].min = lo;
      truth.boxes[size_t(o)].max = hi;
      seen[size_t(o)] = true;
    } else {
      truth.boxes[size_t(o)].min = truth.boxes[size_t(o)].min.cwiseMin(lo);
      truth.boxes[size_t(o)].max = truth.boxes[size_t(o)].max.cwiseMax(hi);
    }
  }

  // ring cameras: train on one elevation, test offset on another
  double cam_r = 2.2 * (spec.placement_radius + 4.0 * spec.object_radius);
  Eigen::Vector3f target = Eigen::Vector3f::Zero();
  auto ring_camera = [&](double angle, double elevation) {
    Eigen::Vector3f pos(float(cam_r * std::cos(elevation) * std::cos(angle)),
                        float(cam_r * std::cos(elevation) * std::sin(angle)),
                        float(cam_r * std::sin(elevation)));
    return make_camera(pos, target, spec.image_size);
  };
  for (int v = 0; v < spec.n_train_views; ++v)
    scene.cameras.push_back(
        ring_camera(2.0 * M_PI * v / spec.n_train_views,
                    (v % 2 ? 0.45 : 0.25)));
  for (int v = 0; v < spec.n_test_views; ++v)
    truth.test_cameras.push_back(
        ring_camera(2.0 * M_PI * (v + 0.37) / spec.n_test_views, 0.35));

  // images from the tile renderer; GT id maps from the brute-force oracle
  RenderRequest img_req;
  RenderRequest id_req;
  id_req.color = false;
  id_req.id = true;
  id_req.n_groups = spec.n_objects;
  for (const Camera& cam : scene.cameras) {
    scene.train_images.push_back(output_to_image(render(scene, cam, img_req)));
    truth.train_id_maps.push_back(render_oracle(scene, cam, id_req).id_map);
  }
  for (const Camera& cam : truth.test_cameras) {
    truth.test_images.push_back(output_to_image(render(scene, cam, img_req)));
    truth.test_id_maps.push_back(render_oracle(scene, cam, id_req).id_map);
  }
}

Scene perturb_for_training(const Scene& scene, const SynthSpec& spec,
                           const PerturbConfig& cfg) {
  Scene out = scene;
  Rng rng = Rng(cfg.seed).fork("perturb");
  double psigma = cfg.position_sigma_frac * spec.object_radius;
  for (auto& g : out.gaussians) {
    for (int a = 0; a < 3; ++a) g.position[a] += float(psigma * rng.normal());
    for (int a = 0; a < 3; ++a)
      g.color[a] = std::clamp(g.color[a] + float(cfg.color_sigma * rng.normal()),
                              0.f, 1.f);
    g.opacity_logit = 0.f;  // alpha 0.5
  }
  for (auto& f : out.idsf) {
    f.f = Eigen::VectorXf();
    f.d = kUnassigned;
  }
  return out;
}

SyntheticTruth make_synthetic_truth(const SynthSpec& spec,
                                    const GroundTruth& truth) {
  SyntheticTruth st;
  st.width = st.height = spec.image_size;
  st.view_class_maps.reserve(truth.train_id_maps.size());
  for (const auto& ids : truth.train_id_maps) {
    std::vector<int64_t> m(ids.size());
    for (size_t i = 0; i < ids.size(); ++i)
      m[i] = (ids[i] == kUnassigned || ids[i] >= spec.n_objects) ? -1 : ids[i];
    st.view_class_maps.push_back(std::move(m));
  }
  st.class_embeddings = truth.class_embeddings;
  st.names = truth.class_names;
  return st;
}

// ------------------------------------------------------------ container

namespace {

Tensor cameras_tensor(const std::vector<Camera>& cams) {
  Tensor t = Tensor::zeros(Dtype::F64, {uint64_t(cams.size()), 20});
  auto p = t.as<double>().data();
  for (size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    double* r = p + i * 20;
    r[0] = c.fx; r[1] = c.fy; r[2] = c.cx; r[3] = c.cy;
    r[4] = c.width; r[5] = c.height; r[6] = c.znear; r[7] = c.zfar;
    for (int k = 0; k < 9; ++k) r[8 + k] = c.rotation(k / 3, k % 3);
    for (int k = 0; k < 3; ++k) r[17 + k] = c.translation[k];
  }
  return t;
}

std::vector<Camera> tensor_cameras(const Tensor& t) {
  std::vector<Camera> cams(t.dims[0]);
  auto p = t.as<double>().data();
  for (size_t i = 0; i < cams.size(); ++i) {
    Camera& c = cams[i];
    const double* r = p + i * 20;
    c.fx = float(r[0]); c.fy = float(r[1]); c.cx = float(r[2]); c.cy = float(r[3]);
    c.width = int(r[4]); c.height = int(r[5]);
    c.znear = float(r[6]); c.zfar = float(r[7]);
    for (int k = 0; k < 9; ++k) c.rotation(k / 3, k % 3) = float(r[8 + k]);
    for (int k = 0; k < 3; ++k) c.translation[k] = float(r[17 + k]);
  }
  return cams;
}

Tensor id_maps_tensor(const std::vector<std::vector<int64_t>>& maps, int hw) {
  Tensor t = Tensor::zeros(Dtype::I64, {uint64_t(maps.size()), uint64_t(hw)});
  auto p = t.as<int64_t>().data();
  for (size_t v = 0; v < maps.size(); ++v)
    std::copy(maps[v].begin(), maps[v].end(), p + v * size_t(hw));
  return t;
}

std::vector<std::vector<int64_t>> tensor_id_maps(const Tensor& t) {
  std::vector<std::vector<int64_t>> maps(t.dims[0]);
  auto p = t.as<int64_t>().data();
  for (size_t v = 0; v < maps.size(); ++v)
    maps[v].assign(p + v * t.dims[1], p + (v + 1) * t.dims[1]);
  return maps;
}

}  // namespace

void save_benchmark(const std::filesystem::path& dir, const SynthSpec& spec,
                    const Scene& gt_scene, const Scene& init_scene,
                    const GroundTruth& truth) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.txt");
    if (!m) throw IoError("cannot write manifest");
    m << "n_objects=" << spec.n_objects << "\n"
      << "gaussians_per_object=" << spec.gaussians_per_object << "\n"
      << "placement_radius=" << spec.placement_radius << "\n"
      << "object_radius=" << spec.object_radius << "\n"
      << "class_dim=" << spec.class_dim << "\n"
      << "n_train_views=" << spec.n_train_views << "\n"
      << "n_test_views=" << spec.n_test_views << "\n"
      << "image_size=" << spec.image_size << "\n"
      << "teacher_stride=" << spec.teacher_stride << "\n"
      << "teacher_sigma=" << spec.teacher_sigma << "\n"
      << "separation_factor=" << spec.separation_factor << "\n"
      << "hard_mode=" << (spec.hard_mode ? 1 : 0) << "\n"
      << "seed=" << spec.seed << "\n";
  }
  save_scene(gt_scene, dir / "scene_gt.idsf");
  save_scene(init_scene, dir / "scene_init.idsf");
  write_tensor(dir / "cameras_train.tnsr", cameras_tensor(gt_scene.cameras));
  write_tensor(dir / "cameras_test.tnsr", cameras_tensor(truth.test_cameras));
  for (size_t v = 0; v < gt_scene.train_images.size(); ++v)
    write_ppm(dir / fmt_name("train_%04d.ppm", int(v)),
              gt_scene.train_images[v]);
  for (size_t v = 0; v < truth.test_images.size(); ++v)
    write_ppm(dir / fmt_name("test_%04d.ppm", int(v)), truth.test_images[v]);

  int hw = spec.image_size * spec.image_size;
  write_tensor(dir / "ids_train.tnsr", id_maps_tensor(truth.train_id_maps, hw));
  write_tensor(dir / "ids_test.tnsr", id_maps_tensor(truth.test_id_maps, hw));

  Tensor gids = Tensor::zeros(Dtype::I64, {uint64_t(truth.gaussian_ids.size())});
  std::copy(truth.gaussian_ids.begin(), truth.gaussian_ids.end(),
            gids.as<int64_t>().data());
  write_tensor(dir / "gaussian_ids.tnsr", gids);

  Tensor emb = Tensor::zeros(
      Dtype::F64, {uint64_t(truth.class_embeddings.rows()),
                   uint64_t(truth.class_embeddings.cols())});
  auto ep = emb.as<double>().data();
  for (int i = 0; i < truth.class_embeddings.rows(); ++i)
    for (int j = 0; j < truth.class_embeddings.cols(); ++j)
      ep[size_t(i) * truth.class_embeddings.cols() + j] =
          truth.class_embeddings(i, j);
  write_tensor(dir / "class_embeddings.tnsr", emb);

  {
    std::ofstream names(dir / "vocabulary.txt");
    for (const auto& n : truth.class_names) names << n << "\n";
  }

  Tensor boxes = Tensor::zeros(Dtype::F64, {uint64_t(truth.boxes.size()), 6});
  auto bp = boxes.as<double>().data();
  for (size_t i = 0; i < truth.boxes.size(); ++i) {
    for (int k = 0; k < 3; ++k) bp[i * 6 + k] = truth.boxes[i].min[k];
    for (int k = 0; k < 3; ++k) bp[i * 6 + 3 + k] = truth.boxes[i].max[k];
  }
  write_tensor(dir / "boxes.tnsr", boxes);
}

Benchmark load_benchmark(const std::filesystem::path& dir) {
  Benchmark b;
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw IoError("cannot read manifest: " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(m, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw MalformedHeaderError("bad manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto geti = [&](const char* k) { return std::stoi(kv.at(k)); };
  auto getd = [&](const char* k) { return std::stod(kv.at(k)); };
  b.spec.n_objects = geti("n_objects");
  b.spec.gaussians_per_object = geti("gaussians_per_object");
  b.spec.placement_radius = getd("placement_radius");
  b.spec.object_radius = getd("object_radius");
  b.spec.class_dim = geti("class_dim");
  b.spec.n_train_views = geti("n_train_views");
  b.spec.n_test_views = geti("n_test_views");
  b.spec.image_size = geti("image_size");
  b.spec.teacher_stride = geti("teacher_stride");
  b.spec.teacher_sigma = getd("teacher_sigma");
  b.spec.separation_factor = getd("separation_factor");
  b.spec.hard_mode = geti("hard_mode") != 0;
  b.spec.seed = uint64_t(std::stoull(kv.at("seed")));

  b.gt_scene = load_scene(dir / "scene_gt.idsf");
  b.init_scene = load_scene(dir / "scene_init.idsf");
  b.gt_scene.cameras = tensor_cameras(read_tensor(dir / "cameras_train.tnsr"));
  b.init_scene.cameras = b.gt_scene.cameras;
  b.truth.test_cameras = tensor_cameras(read_tensor(dir / "cameras_test.tnsr"));
  for (int v = 0; v < b.spec.n_train_views; ++v)
    b.gt_scene.train_images.push_back(
        read_ppm(dir / fmt_name("train_%04d.ppm", v)));
  b.init_scene.train_images = b.gt_scene.train_images;
  for (int v = 0; v < b.spec.n_test_views; ++v)
    b.truth.test_images.push_back(read_ppm(dir / fmt_name("test_%04d.ppm", v)));

  b.truth.train_id_maps = tensor_id_maps(read_tensor(dir / "ids_train.tnsr"));
  b.truth.test_id_maps = tensor_id_maps(read_tensor(dir / "ids_test.tnsr"));

  Tensor gids = read_tensor(dir / "gaussian_ids.tnsr");
  b.truth.gaussian_ids.assign(gids.as<int64_t>().data(),
                              gids.as<int64_t>().data() + gids.numel());

  Tensor emb = read_tensor(dir / "class_embeddings.tnsr");
  b.truth.class_embeddings.resize(int(emb.dims[0]), int(emb.dims[1]));
  auto ep = emb.as<double>().data();
  for (int i = 0; i < b.truth.class_embeddings.rows(); ++i)
    for (int j = 0; j < b.truth.class_embeddings.cols(); ++j)
      b.truth.class_embeddings(i, j) = ep[size_t(i) * emb.dims[1] + j];

  std::ifstream names(dir / "vocabulary.txt");
  while (std::getline(names, line))
    if (!line.empty()) b.truth.class_names.push_back(line);

  Tensor boxes = read_tensor(dir / "boxes.tnsr");
  b.truth.boxes.resize(boxes.dims[0]);
  auto bp = boxes.as<double>().data();
  for (size_t i = 0; i < b.truth.boxes.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      b.truth.boxes[i].min[k] = bp[i * 6 + k];
      b.truth.boxes[i].max[k] = bp[i * 6 + 3 + k];
    }
  return b;
}

}  // namespace gsf

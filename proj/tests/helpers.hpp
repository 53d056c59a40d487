#pragma once

// Shared builders for the test suites: randomized scenes, pre-projected
// splat sets, and a central-difference driver.

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "gsfield/rasterizer.hpp"
#include "gsfield/rng.hpp"
#include "gsfield/scene.hpp"

namespace testutil {

inline gsf::Camera simple_camera(int width, int height, float focal = 0.f) {
  gsf::Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = focal > 0 ? focal : float(width);
  cam.fy = focal > 0 ? focal : float(width);
  cam.cx = 0.5f * float(width);
  cam.cy = 0.5f * float(height);
  cam.znear = 0.01f;
  cam.zfar = 100.f;
  return cam;  // identity pose, looking down +z
}

inline gsf::Gaussian random_gaussian(gsf::Rng& rng) {
  gsf::Gaussian g;
  for (int k = 0; k < 3; ++k) g.position[k] = float(rng.uniform(-1.2, 1.2));
  g.position.z() = float(rng.uniform(2.5, 6.0));
  Eigen::Vector4f q;
  for (int k = 0; k < 4; ++k) q[k] = float(rng.normal());
  g.rotation = q.normalized();
  for (int k = 0; k < 3; ++k) g.log_scale[k] = float(rng.uniform(-2.8, -1.2));
  g.opacity_logit = float(rng.uniform(-1.0, 2.5));
  for (int k = 0; k < 3; ++k) g.color[k] = float(rng.uniform(0.0, 1.0));
  return g;
}

inline gsf::Scene random_scene(gsf::Rng rng, int n, int feature_dim = 0,
                               int n_groups = 0) {
  gsf::Scene s;
  for (int i = 0; i < n; ++i) {
    s.gaussians.push_back(random_gaussian(rng));
    gsf::IdsField f;
    if (feature_dim > 0) {
      f.f.resize(feature_dim);
      for (int k = 0; k < feature_dim; ++k) f.f[k] = float(rng.normal());
    }
    if (n_groups > 0) f.d = int64_t(rng.uniform_index(uint64_t(n_groups + 1)));
    if (f.d == n_groups) f.d = gsf::kUnassigned;
    s.idsf.push_back(std::move(f));
  }
  return s;
}

// Random render-ready splats covering an width x height frame.
inline std::vector<gsf::ProjSplat> random_splats(gsf::Rng rng, int n, int width,
                                                 int height, int feature_dim = 0,
                                                 int n_groups = 0) {
  std::vector<gsf::ProjSplat> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    gsf::ProjSplat s;
    s.mean2d.x() = rng.uniform(-2.0, width + 2.0);
    s.mean2d.y() = rng.uniform(-2.0, height + 2.0);
    // random SPD covariance a few pixels wide
    double a = rng.uniform(0.6, 6.0), b = rng.uniform(0.6, 6.0);
    double th = rng.uniform(0.0, 3.14159);
    double c = std::cos(th), sn = std::sin(th);
    s.cxx = c * c * a + sn * sn * b + 0.3;
    s.cyy = sn * sn * a + c * c * b + 0.3;
    s.cxy = c * sn * (a - b);
    s.depth = rng.uniform(0.5, 20.0);
    s.alpha = rng.uniform(0.05, 0.995);
    for (int k = 0; k < 3; ++k) s.color[k] = rng.uniform(0.0, 1.0);
    if (feature_dim > 0) {
      s.feature.resize(feature_dim);
      for (int k = 0; k < feature_dim; ++k) s.feature[k] = rng.normal();
    }
    s.id_channel = n_groups > 0 ? int(rng.uniform_index(uint64_t(n_groups + 1)))
                                : 0;
    s.source_index = i;
    out.push_back(std::move(s));
  }
  return out;
}

// Central finite difference of a scalar functional.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double eps = 1e-4) {
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace testutil

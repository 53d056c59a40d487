#include "gsfield/scene.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "gsfield/errors.hpp"

namespace gsf {

Eigen::Matrix3f Gaussian::rotation_matrix() const {
  Eigen::Vector4f q = unit_rotation();
  float w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3f r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Eigen::Matrix3f Gaussian::covariance() const {
  Eigen::Matrix3f r = rotation_matrix();
  Eigen::Vector3f s2 = scale().array().square();
  return r * s2.asDiagonal() * r.transpose();
}

Eigen::MatrixXf Scene::feature_matrix() const {
  Eigen::MatrixXf f(idsf.size(), feature_dim());
  for (size_t i = 0; i < idsf.size(); ++i) f.row(i) = idsf[i].f.transpose();
  return f;
}

void Scene::set_feature_matrix(const Eigen::MatrixXf& f) {
  for (size_t i = 0; i < idsf.size(); ++i) idsf[i].f = f.row(i).transpose();
}

namespace {
constexpr double kCovRegularizer = 0.3;  // anti-aliasing floor on cov2d
}

std::optional<Splat2D> project_gaussian(const Gaussian& g, const Camera& cam) {
  Eigen::Vector3d t = cam.to_camera(g.position).cast<double>();
  if (t.z() <= cam.znear) return std::nullopt;

  double fx = cam.fx, fy = cam.fy;
  double iz = 1.0 / t.z();

  Splat2D out;
  out.mean2d = {fx * t.x() * iz + cam.cx, fy * t.y() * iz + cam.cy};
  out.depth = t.z();

  Eigen::Matrix<double, 2, 3> jac;
  jac << fx * iz, 0, -fx * t.x() * iz * iz,
         0, fy * iz, -fy * t.y() * iz * iz;
  Eigen::Matrix<double, 2, 3> jw = jac * cam.rotation.cast<double>();
  Eigen::Matrix3d sigma = g.covariance().cast<double>();
  out.cov2d = jw * sigma * jw.transpose();
  out.cov2d(0, 0) += kCovRegularizer;
  out.cov2d(1, 1) += kCovRegularizer;
  return out;
}

ProjectionGrads project_gaussian_backward(const Gaussian& g, const Camera& cam,
                                          const Eigen::Vector2d& d_mean2d,
                                          const Eigen::Matrix2d& d_cov2d_in,
                                          double d_depth) {
  ProjectionGrads out;
  Eigen::Matrix3d w = cam.rotation.cast<double>();
  Eigen::Vector3d t = cam.to_camera(g.position).cast<double>();
  double fx = cam.fx, fy = cam.fy;
  double iz = 1.0 / t.z();

  // symmetric upstream on cov2d
  Eigen::Matrix2d gc = 0.5 * (d_cov2d_in + d_cov2d_in.transpose());

  Eigen::Matrix<double, 2, 3> jac;
  jac << fx * iz, 0, -fx * t.x() * iz * iz,
         0, fy * iz, -fy * t.y() * iz * iz;
  Eigen::Matrix<double, 2, 3> jw = jac * w;

  Eigen::Vector4f qs = g.unit_rotation();
  double qw = qs[0], qx = qs[1], qy = qs[2], qz = qs[3];
  Eigen::Matrix3d r = g.rotation_matrix().cast<double>();
  Eigen::Vector3d s = g.scale().cast<double>();
  Eigen::Matrix3d sigma = r * s.array().square().matrix().asDiagonal() * r.transpose();

  // mean2d and depth -> camera-space point
  Eigen::Vector3d d_t = jac.transpose() * d_mean2d;
  d_t.z() += d_depth;

  // cov2d = (JW) Sigma (JW)^T
  Eigen::Matrix3d d_sigma = jw.transpose() * gc * jw;
  Eigen::Matrix<double, 2, 3> d_jw = 2.0 * gc * jw * sigma;
  Eigen::Matrix<double, 2, 3> d_jac = d_jw * w.transpose();

  // J entries depend on the camera-space point
  double iz2 = iz * iz, iz3 = iz2 * iz;
  d_t.x() += d_jac(0, 2) * (-fx * iz2);
  d_t.y() += d_jac(1, 2) * (-fy * iz2);
  d_t.z() += d_jac(0, 0) * (-fx * iz2) + d_jac(1, 1) * (-fy * iz2) +
             d_jac(0, 2) * (2 * fx * t.x() * iz3) +
             d_jac(1, 2) * (2 * fy * t.y() * iz3);

  out.d_position = (w.transpose() * d_t).cast<float>();

  // Sigma = R diag(s^2) R^T
  Eigen::Matrix3d d_sigma_sym = 0.5 * (d_sigma + d_sigma.transpose());
  Eigen::Matrix3d d_r =
      2.0 * d_sigma_sym * r * s.array().square().matrix().asDiagonal();
  Eigen::Matrix3d rtar = r.transpose() * d_sigma_sym * r;
  for (int k = 0; k < 3; ++k) {
    double d_sk = rtar(k, k) * 2.0 * s[k];
    out.d_log_scale[k] = float(d_sk * s[k]);  // chain through s = exp(log s)
  }

  // rotation matrix -> unit quaternion
  auto frob = [&](const Eigen::Matrix3d& a) { return (d_r.array() * a.array()).sum(); };
  Eigen::Matrix3d dw_m, dx_m, dy_m, dz_m;
  dw_m << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
  dx_m << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
  dy_m << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
  dz_m << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
  Eigen::Vector4d d_unit(2 * frob(dw_m), 2 * frob(dx_m), 2 * frob(dy_m),
                         2 * frob(dz_m));

  // unit quaternion -> stored (unnormalized) quaternion
  Eigen::Vector4d q_hat = qs.cast<double>();
  double norm = g.rotation.cast<double>().norm();
  Eigen::Vector4d d_q = (d_unit - q_hat.dot(d_unit) * q_hat) / norm;
  out.d_rotation = d_q.cast<float>();
  return out;
}

namespace {
constexpr char kSceneMagic[4] = {'I', 'D', 'S', 'F'};
constexpr uint32_t kSceneVersion = 1;
}  // namespace

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  uint32_t version = kSceneVersion;
  uint32_t count = uint32_t(scene.size());
  uint32_t dim = uint32_t(scene.feature_dim());
  os.write(kSceneMagic, 4);
  os.write(reinterpret_cast<const char*>(&version), 4);
  os.write(reinterpret_cast<const char*>(&count), 4);
  os.write(reinterpret_cast<const char*>(&dim), 4);

  auto put = [&](const float* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), std::streamsize(n * 4));
  };
  for (const auto& g : scene.gaussians) put(g.position.data(), 3);
  for (const auto& g : scene.gaussians) put(g.rotation.data(), 4);
  for (const auto& g : scene.gaussians) put(g.log_scale.data(), 3);
  for (const auto& g : scene.gaussians) put(&g.opacity_logit, 1);
  for (const auto& g : scene.gaussians) put(g.color.data(), 3);
  for (const auto& e : scene.idsf) put(e.f.data(), dim);
  for (const auto& e : scene.idsf)
    os.write(reinterpret_cast<const char*>(&e.d), 8);
  if (!os) throw IoError("short write: " + path.string());
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kSceneMagic, 4) != 0)
    throw MalformedHeaderError("bad scene magic: " + path.string());
  uint32_t version = 0, count = 0, dim = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&count), 4);
  is.read(reinterpret_cast<char*>(&dim), 4);
  if (!is) throw MalformedHeaderError("scene header short: " + path.string());
  if (version != kSceneVersion)
    throw VersionMismatchError("scene version " + std::to_string(version) +
                               ": " + path.string());

  Scene scene;
  scene.gaussians.resize(count);
  scene.idsf.resize(count);
  auto get = [&](float* p, size_t n) {
    is.read(reinterpret_cast<char*>(p), std::streamsize(n * 4));
    if (size_t(is.gcount()) != n * 4)
      throw TruncatedPayloadError("scene payload short: " + path.string());
  };
  for (auto& g : scene.gaussians) get(g.position.data(), 3);
  for (auto& g : scene.gaussians) get(g.rotation.data(), 4);
  for (auto& g : scene.gaussians) get(g.log_scale.data(), 3);
  for (auto& g : scene.gaussians) get(&g.opacity_logit, 1);
  for (auto& g : scene.gaussians) get(g.color.data(), 3);
  for (auto& e : scene.idsf) {
    e.f.resize(dim);
    get(e.f.data(), dim);
  }
  for (auto& e : scene.idsf) {
    is.read(reinterpret_cast<char*>(&e.d), 8);
    if (is.gcount() != 8)
      throw TruncatedPayloadError("scene index array short: " + path.string());
  }
  return scene;
}

}  // namespace gsf

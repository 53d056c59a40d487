#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

#include "gsfield/tensor.hpp"

namespace gsf {

// Reserved instance index for Gaussians outside every cluster. Lives at the
// top of the index range so it never collides with group labels.
inline constexpr int64_t kUnassigned = std::numeric_limits<int64_t>::max();

// Geometry + appearance primitive. Scale is stored as log-scale and opacity
// as a pre-sigmoid logit so the optimizer works on unconstrained values; the
// rotation is renormalized on read.
struct Gaussian {
  Eigen::Vector3f position = Eigen::Vector3f::Zero();
  Eigen::Vector4f rotation = Eigen::Vector4f(1, 0, 0, 0);  // w, x, y, z
  Eigen::Vector3f log_scale = Eigen::Vector3f::Zero();
  float opacity_logit = 0.f;
  Eigen::Vector3f color = Eigen::Vector3f::Zero();  // view-independent RGB

  Eigen::Vector3f scale() const { return log_scale.array().exp(); }
  float opacity() const { return 1.f / (1.f + std::exp(-opacity_logit)); }
  Eigen::Vector4f unit_rotation() const { return rotation.normalized(); }
  Eigen::Matrix3f rotation_matrix() const;
  // Sigma = R diag(s^2) R^T
  Eigen::Matrix3f covariance() const;
};

// Per-Gaussian semantic feature and view-consistent instance index.
struct IdsField {
  Eigen::VectorXf f;            // learned embedding, dim D
  int64_t d = kUnassigned;      // group label in [0, N_g) or kUnassigned
};

struct Camera {
  float fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  float znear = 0.01f, zfar = 100.f;
  Eigen::Matrix3f rotation = Eigen::Matrix3f::Identity();  // world -> camera
  Eigen::Vector3f translation = Eigen::Vector3f::Zero();

  Eigen::Vector3f to_camera(const Eigen::Vector3f& p) const {
    return rotation * p + translation;
  }
};

struct Scene {
  std::vector<Gaussian> gaussians;
  std::vector<IdsField> idsf;  // same ordering as gaussians
  std::vector<Camera> cameras;
  std::vector<Image> train_images;

  size_t size() const { return gaussians.size(); }
  int feature_dim() const { return idsf.empty() ? 0 : int(idsf[0].f.size()); }

  // N x D view of all features (copy).
  Eigen::MatrixXf feature_matrix() const;
  void set_feature_matrix(const Eigen::MatrixXf& f);
};

struct Splat2D {
  Eigen::Vector2d mean2d;        // pixels
  Eigen::Matrix2d cov2d;         // pixels^2, SPD
  double depth = 0;              // camera-space z
};

// Perspective projection of one Gaussian; empty if the center is at or
// behind the near plane (caller culls).
std::optional<Splat2D> project_gaussian(const Gaussian& g, const Camera& cam);

// Reverse-mode of project_gaussian. d_cov2d must be symmetric (the off-
// diagonal entry carries the combined sensitivity of both positions).
struct ProjectionGrads {
  Eigen::Vector3f d_position = Eigen::Vector3f::Zero();
  Eigen::Vector4f d_rotation = Eigen::Vector4f::Zero();   // w.r.t. stored quat
  Eigen::Vector3f d_log_scale = Eigen::Vector3f::Zero();
};
ProjectionGrads project_gaussian_backward(const Gaussian& g, const Camera& cam,
                                          const Eigen::Vector2d& d_mean2d,
                                          const Eigen::Matrix2d& d_cov2d,
                                          double d_depth);

// Scene container: magic "IDSF", u32 version, u32 count, u32 feature dim,
// then contiguous little-endian f32 field arrays in declared order
// (position, rotation, log_scale, opacity_logit, color, feature), then the
// i64 index array. Cameras/images live in the benchmark directory, not here.
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

}  // namespace gsf

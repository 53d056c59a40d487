#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "gsfield/scene.hpp"

namespace gsf {

// Blending constants shared by the tile renderer and the brute-force oracle
// so both paths skip/clamp identically.
inline constexpr double kAlphaClamp = 0.99;
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr int kTileSize = 16;
// Splats are binned into tiles within this many deviations of the center;
// beyond it alpha falls under the 1/255 skip threshold for any opacity.
inline constexpr double kBinRadiusSigma = 3.45;

struct RenderRequest {
  bool color = true;
  bool feature = false;
  bool id = false;
  bool depth = false;
  int n_groups = 0;       // required when id is set
  bool early_exit = true; // stop a pixel once transmittance < 1e-4
};

// A projected, render-ready splat. Tests build these directly to probe the
// blending math without going through camera projection.
struct ProjSplat {
  Eigen::Vector2d mean2d;
  double cxx = 1, cxy = 0, cyy = 1;  // 2D covariance (regularized)
  double depth = 0;
  double alpha = 0;                  // post-sigmoid opacity
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  Eigen::VectorXd feature;           // dim D (may be empty)
  int id_channel = 0;                // group id, or n_groups for unassigned
  int source_index = -1;             // index into the scene's Gaussian array
};

struct RenderOutput {
  int width = 0, height = 0;
  int feature_dim = 0;
  int id_channels = 0;               // n_groups + 1 (last = unassigned)
  std::vector<double> color;         // H*W*3
  std::vector<double> feature;       // H*W*D
  std::vector<double> id_weights;    // H*W*id_channels
  std::vector<int64_t> id_map;       // H*W, group id or kUnassigned
  std::vector<double> depth;         // H*W
  std::vector<double> final_transmittance;  // H*W

  size_t pix(int y, int x) const { return size_t(y) * width + x; }
};

// Saved forward state consumed by render_backward.
struct ForwardContext {
  std::vector<ProjSplat> splats;          // culled, render order = input order
  std::vector<std::vector<int>> tile_lists;  // per tile, depth-sorted splat ids
  int tiles_x = 0, tiles_y = 0;
  int width = 0, height = 0;
  RenderRequest request;
  std::vector<double> final_transmittance;  // per pixel
  std::vector<int> n_contrib;               // per pixel, splats consumed
  size_t scene_size = 0;                    // 0 when built from raw splats
};

struct RenderGrads {
  // Aligned 1:1 with ForwardContext::splats.
  std::vector<Eigen::Vector3d> d_color;
  std::vector<Eigen::VectorXd> d_feature;
  std::vector<double> d_alpha;
  std::vector<Eigen::Vector2d> d_mean2d;
  std::vector<Eigen::Vector3d> d_cov2d;  // (d_cxx, d_cxy, d_cyy)
};

// Tile-based forward over pre-projected splats.
RenderOutput render_splats(const std::vector<ProjSplat>& splats, int width,
                           int height, double zfar, const RenderRequest& req,
                           ForwardContext* ctx = nullptr);

// Projects the scene through cam and rasterizes. EmptyFrustum simply yields
// the background (black / zero feature / unassigned / far depth).
RenderOutput render(const Scene& scene, const Camera& cam,
                    const RenderRequest& req, ForwardContext* ctx = nullptr);

// Per-pixel brute force over all splats, globally depth-sorted, no tiling.
// Same blending contract as render (including the transmittance cutoff
// unless req.early_exit is cleared).
RenderOutput render_oracle_splats(const std::vector<ProjSplat>& splats,
                                  int width, int height, double zfar,
                                  const RenderRequest& req);
RenderOutput render_oracle(const Scene& scene, const Camera& cam,
                           const RenderRequest& req);

// Analytic gradients of the composite w.r.t. splat attributes, via
// back-to-front re-traversal of the saved forward state. upstream gradients
// may be empty when that channel was not rendered (treated as zero).
RenderGrads render_backward(const ForwardContext& ctx,
                            const std::vector<double>& d_color,
                            const std::vector<double>& d_feature,
                            size_t expected_scene_size = 0);

// Convenience wrapper for Eq. 5: blended one-hot weights + argmax map.
RenderOutput render_id_map(const Scene& scene, const Camera& cam, int n_groups);

std::vector<ProjSplat> project_scene(const Scene& scene, const Camera& cam,
                                     const RenderRequest& req);

}  // namespace gsf

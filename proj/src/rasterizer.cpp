#include "gsfield/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gsfield/errors.hpp"
#include "gsfield/parallel.hpp"

namespace gsf {

namespace {

struct InvCov {
  double a, b, c;  // [[a b];[b c]]
};

InvCov invert_cov(const ProjSplat& s) {
  double det = s.cxx * s.cyy - s.cxy * s.cxy;
  double idet = 1.0 / det;
  return {s.cyy * idet, -s.cxy * idet, s.cxx * idet};
}

double bin_radius(const ProjSplat& s) {
  double mid = 0.5 * (s.cxx + s.cyy);
  double det = s.cxx * s.cyy - s.cxy * s.cxy;
  double lam_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
  return kBinRadiusSigma * std::sqrt(lam_max);
}

RenderOutput make_output(int width, int height, const RenderRequest& req,
                         int feature_dim, double zfar) {
  RenderOutput out;
  out.width = width;
  out.height = height;
  size_t np = size_t(width) * height;
  if (req.color) out.color.assign(np * 3, 0.0);
  if (req.feature) {
    out.feature_dim = feature_dim;
    out.feature.assign(np * feature_dim, 0.0);
  }
  if (req.id) {
    out.id_channels = req.n_groups + 1;
    out.id_weights.assign(np * out.id_channels, 0.0);
    out.id_map.assign(np, kUnassigned);
  }
  if (req.depth) out.depth.assign(np, 0.0);
  out.final_transmittance.assign(np, 1.0);
  return out;
}

// Shared per-pixel compositor; identical math in the tile path and oracle.
template <typename SplatAt>
void composite_pixel(int px, int py, size_t pix, int count, SplatAt splat_at,
                     const RenderRequest& req, double zfar, RenderOutput& out,
                     int* n_contrib) {
  double t = 1.0;
  double cx = px + 0.5, cy = py + 0.5;
  double* color = req.color ? &out.color[pix * 3] : nullptr;
  double* feat = req.feature ? &out.feature[pix * out.feature_dim] : nullptr;
  double* idw = req.id ? &out.id_weights[pix * out.id_channels] : nullptr;
  int consumed = 0;
  for (int k = 0; k < count; ++k) {
    const ProjSplat& s = splat_at(k);
    ++consumed;
    double dx = cx - s.mean2d.x(), dy = cy - s.mean2d.y();
    InvCov ic = invert_cov(s);
    double power = -0.5 * (ic.a * dx * dx + ic.c * dy * dy) - ic.b * dx * dy;
    if (power > 0) continue;
    double alpha = std::min(kAlphaClamp, s.alpha * std::exp(power));
    if (alpha < kAlphaSkip) continue;
    double weight = t * alpha;
    if (color)
      for (int c = 0; c < 3; ++c) color[c] += weight * s.color[c];
    if (feat)
      for (int c = 0; c < out.feature_dim; ++c) feat[c] += weight * s.feature[c];
    if (idw) idw[s.id_channel] += weight;
    if (req.depth) out.depth[pix] += weight * s.depth;
    t *= 1.0 - alpha;
    if (req.early_exit && t < kTransmittanceCutoff) break;
  }
  out.final_transmittance[pix] = t;
  if (req.depth) out.depth[pix] += t * zfar;  // residual falls to far plane
  if (idw) {
    idw[out.id_channels - 1] += t;  // residual routed to unassigned
    int best = 0;
    for (int c = 1; c < out.id_channels; ++c)
      if (idw[c] > idw[best]) best = c;  // lower index wins ties
    out.id_map[pix] = (best == out.id_channels - 1) ? kUnassigned : best;
  }
  if (n_contrib) *n_contrib = consumed;
}

}  // namespace

std::vector<ProjSplat> project_scene(const Scene& scene, const Camera& cam,
                                     const RenderRequest& req) {
  std::vector<ProjSplat> splats;
  splats.reserve(scene.size());
  for (size_t i = 0; i < scene.size(); ++i) {
    const Gaussian& g = scene.gaussians[i];
    double alpha = g.opacity();
    if (alpha < kAlphaSkip) continue;
    auto proj = project_gaussian(g, cam);
    if (!proj) continue;
    ProjSplat s;
    s.mean2d = proj->mean2d;
    s.cxx = proj->cov2d(0, 0);
    s.cxy = proj->cov2d(0, 1);
    s.cyy = proj->cov2d(1, 1);
    s.depth = proj->depth;
    s.alpha = alpha;
    if (req.color) s.color = g.color.cast<double>();
    if (req.feature) s.feature = scene.idsf[i].f.cast<double>();
    if (req.id) {
      int64_t d = scene.idsf[i].d;
      s.id_channel =
          (d >= 0 && d < req.n_groups) ? int(d) : req.n_groups;
    }
    s.source_index = int(i);
    splats.push_back(std::move(s));
  }
  return splats;
}

RenderOutput render_splats(const std::vector<ProjSplat>& splats, int width,
                           int height, double zfar, const RenderRequest& req,
                           ForwardContext* ctx) {
  int feature_dim = 0;
  if (req.feature)
    for (const auto& s : splats) {
      feature_dim = int(s.feature.size());
      break;
    }
  RenderOutput out = make_output(width, height, req, feature_dim, zfar);

  int tiles_x = (width + kTileSize - 1) / kTileSize;
  int tiles_y = (height + kTileSize - 1) / kTileSize;
  std::vector<std::vector<int>> tile_lists(size_t(tiles_x) * tiles_y);

  for (int i = 0; i < int(splats.size()); ++i) {
    const ProjSplat& s = splats[i];
    double r = bin_radius(s);
    int x0 = std::max(0, int(std::floor(s.mean2d.x() - r)) - 1);
    int x1 = std::min(width - 1, int(std::ceil(s.mean2d.x() + r)) + 1);
    int y0 = std::max(0, int(std::floor(s.mean2d.y() - r)) - 1);
    int y1 = std::min(height - 1, int(std::ceil(s.mean2d.y() + r)) + 1);
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
      for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
        tile_lists[size_t(ty) * tiles_x + tx].push_back(i);
  }
  // stable by depth: ties keep input order, matching the oracle's global sort
  for (auto& list : tile_lists)
    std::stable_sort(list.begin(), list.end(), [&](int a, int b) {
      return splats[a].depth < splats[b].depth;
    });

  std::vector<int> n_contrib(size_t(width) * height, 0);
  int n_tiles = tiles_x * tiles_y;
  parallel_for(n_tiles, [&](int64_t lo, int64_t hi, int) {
    for (int64_t tile = lo; tile < hi; ++tile) {
      int tx = int(tile % tiles_x), ty = int(tile / tiles_x);
      const auto& list = tile_lists[size_t(tile)];
      int y_end = std::min(height, (ty + 1) * kTileSize);
      int x_end = std::min(width, (tx + 1) * kTileSize);
      for (int py = ty * kTileSize; py < y_end; ++py)
        for (int px = tx * kTileSize; px < x_end; ++px) {
          size_t pix = size_t(py) * width + px;
          composite_pixel(
              px, py, pix, int(list.size()),
              [&](int k) -> const ProjSplat& { return splats[list[size_t(k)]]; },
              req, zfar, out, &n_contrib[pix]);
        }
    }
  });

  if (ctx) {
    ctx->splats = splats;
    ctx->tile_lists = std::move(tile_lists);
    ctx->tiles_x = tiles_x;
    ctx->tiles_y = tiles_y;
    ctx->width = width;
    ctx->height = height;
    ctx->request = req;
    ctx->final_transmittance = out.final_transmittance;
    ctx->n_contrib = std::move(n_contrib);
  }
  return out;
}

RenderOutput render(const Scene& scene, const Camera& cam,
                    const RenderRequest& req, ForwardContext* ctx) {
  auto splats = project_scene(scene, cam, req);
  RenderOutput out =
      render_splats(splats, cam.width, cam.height, cam.zfar, req, ctx);
  if (ctx) ctx->scene_size = scene.size();
  return out;
}

RenderOutput render_oracle_splats(const std::vector<ProjSplat>& splats,
                                  int width, int height, double zfar,
                                  const RenderRequest& req) {
  int feature_dim = 0;
  if (req.feature && !splats.empty()) feature_dim = int(splats[0].feature.size());
  RenderOutput out = make_output(width, height, req, feature_dim, zfar);

  std::vector<int> order(splats.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return splats[size_t(a)].depth < splats[size_t(b)].depth;
  });

  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      size_t pix = size_t(py) * width + px;
      composite_pixel(
          px, py, pix, int(order.size()),
          [&](int k) -> const ProjSplat& { return splats[size_t(order[size_t(k)])]; },
          req, zfar, out, nullptr);
    }
  return out;
}

RenderOutput render_oracle(const Scene& scene, const Camera& cam,
                           const RenderRequest& req) {
  auto splats = project_scene(scene, cam, req);
  return render_oracle_splats(splats, cam.width, cam.height, cam.zfar, req);
}

RenderOutput render_id_map(const Scene& scene, const Camera& cam, int n_groups) {
  RenderRequest req;
  req.color = false;
  req.id = true;
  req.n_groups = n_groups;
  return render(scene, cam, req);
}

RenderGrads render_backward(const ForwardContext& ctx,
                            const std::vector<double>& d_color,
                            const std::vector<double>& d_feature,
                            size_t expected_scene_size) {
  if (expected_scene_size != 0 && ctx.scene_size != 0 &&
      expected_scene_size != ctx.scene_size)
    throw StaleStateError("forward context does not match the scene");

  int width = ctx.width, height = ctx.height;
  size_t n_splats = ctx.splats.size();
  int fdim = 0;
  if (!d_feature.empty() && n_splats > 0) fdim = int(ctx.splats[0].feature.size());
  bool use_color = !d_color.empty();
  bool use_feat = !d_feature.empty();

  struct Acc {
    std::vector<Eigen::Vector3d> d_color;
    std::vector<Eigen::VectorXd> d_feature;
    std::vector<double> d_alpha;
    std::vector<Eigen::Vector2d> d_mean2d;
    std::vector<Eigen::Vector3d> d_cov2d;
    void init(size_t n, int fd) {
      d_color.assign(n, Eigen::Vector3d::Zero());
      d_feature.assign(n, Eigen::VectorXd::Zero(fd));
      d_alpha.assign(n, 0.0);
      d_mean2d.assign(n, Eigen::Vector2d::Zero());
      d_cov2d.assign(n, Eigen::Vector3d::Zero());
    }
  };

  int nt = std::max(1, thread_count());
  std::vector<Acc> accs(static_cast<size_t>(nt));
  for (auto& a : accs) a.init(n_splats, fdim);

  int n_tiles = ctx.tiles_x * ctx.tiles_y;
  parallel_for(n_tiles, [&](int64_t lo, int64_t hi, int thread_idx) {
    Acc& acc = accs[size_t(thread_idx)];
    std::vector<double> s_col(3), s_feat(static_cast<size_t>(fdim));
    for (int64_t tile = lo; tile < hi; ++tile) {
      int tx = int(tile % ctx.tiles_x), ty = int(tile / ctx.tiles_x);
      const auto& list = ctx.tile_lists[size_t(tile)];
      if (list.empty()) continue;
      int y_end = std::min(height, (ty + 1) * kTileSize);
      int x_end = std::min(width, (tx + 1) * kTileSize);
      for (int py = ty * kTileSize; py < y_end; ++py)
        for (int px = tx * kTileSize; px < x_end; ++px) {
          size_t pix = size_t(py) * width + px;
          const double* uc = use_color ? &d_color[pix * 3] : nullptr;
          const double* uf = use_feat ? &d_feature[pix * size_t(fdim)] : nullptr;
          double cx = px + 0.5, cy = py + 0.5;
          double t_behind = ctx.final_transmittance[pix];
          std::fill(s_col.begin(), s_col.end(), 0.0);
          std::fill(s_feat.begin(), s_feat.end(), 0.0);
          // back-to-front re-traversal over the splats the forward consumed
          for (int k = ctx.n_contrib[pix] - 1; k >= 0; --k) {
            int sid = list[size_t(k)];
            const ProjSplat& s = ctx.splats[size_t(sid)];
            double dx = cx - s.mean2d.x(), dy = cy - s.mean2d.y();
            InvCov ic = invert_cov(s);
            double power =
                -0.5 * (ic.a * dx * dx + ic.c * dy * dy) - ic.b * dx * dy;
            if (power > 0) continue;
            double g = std::exp(power);
            double a_raw = s.alpha * g;
            bool clamped = a_raw > kAlphaClamp;
            double alpha = clamped ? kAlphaClamp : a_raw;
            if (alpha < kAlphaSkip) continue;
            double t_i = t_behind / (1.0 - alpha);
            double w = t_i * alpha;

            double d_alpha_eff = 0.0;
            if (uc) {
              for (int c = 0; c < 3; ++c) {
                acc.d_color[size_t(sid)][c] += w * uc[c];
                d_alpha_eff += uc[c] * (t_i * s.color[c] - s_col[size_t(c)] / (1.0 - alpha));
                s_col[size_t(c)] += w * s.color[c];
              }
            }
            if (uf) {
              auto& df = acc.d_feature[size_t(sid)];
              for (int c = 0; c < fdim; ++c) {
                df[c] += w * uf[c];
                d_alpha_eff +=
                    uf[c] * (t_i * s.feature[c] - s_feat[size_t(c)] / (1.0 - alpha));
                s_feat[size_t(c)] += w * s.feature[c];
              }
            }
            t_behind = t_i;
            if (clamped) continue;  // flat region of the clamp
            acc.d_alpha[size_t(sid)] += g * d_alpha_eff;
            double d_power = a_raw * d_alpha_eff;  // d alpha/d power = alpha*G'
            double d_dx = (-ic.a * dx - ic.b * dy) * d_power;
            double d_dy = (-ic.c * dy - ic.b * dx) * d_power;
            acc.d_mean2d[size_t(sid)] += Eigen::Vector2d(-d_dx, -d_dy);
            // gradient w.r.t. inverse covariance entries
            double d_ia = -0.5 * dx * dx * d_power;
            double d_ib = -dx * dy * d_power;
            double d_ic_ = -0.5 * dy * dy * d_power;
            // chain to covariance: dSigma = -M dM M with M = Sigma^{-1}
            Eigen::Matrix2d m;
            m << ic.a, ic.b, ic.b, ic.c;
            Eigen::Matrix2d dm;
            dm << d_ia, 0.5 * d_ib, 0.5 * d_ib, d_ic_;
            Eigen::Matrix2d dcov = -m * dm * m;
            acc.d_cov2d[size_t(sid)] +=
                Eigen::Vector3d(dcov(0, 0), dcov(0, 1) + dcov(1, 0), dcov(1, 1));
          }
        }
    }
  });

  RenderGrads out;
  out.d_color.assign(n_splats, Eigen::Vector3d::Zero());
  out.d_feature.assign(n_splats, Eigen::VectorXd::Zero(fdim));
  out.d_alpha.assign(n_splats, 0.0);
  out.d_mean2d.assign(n_splats, Eigen::Vector2d::Zero());
  out.d_cov2d.assign(n_splats, Eigen::Vector3d::Zero());
  for (const auto& a : accs)
    for (size_t i = 0; i < n_splats; ++i) {
      out.d_color[i] += a.d_color[i];
      out.d_feature[i] += a.d_feature[i];
      out.d_alpha[i] += a.d_alpha[i];
      out.d_mean2d[i] += a.d_mean2d[i];
      out.d_cov2d[i] += a.d_cov2d[i];
    }
  return out;
}

}  // namespace gsf

#include "gsfield/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "gsfield/errors.hpp"
#include "gsfield/rasterizer.hpp"

namespace gsf {

// ------------------------------------------------------------ optimizer

void adam_step(Eigen::Map<Eigen::ArrayXd> params, const Eigen::ArrayXd& grad,
               AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (params.size() != grad.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  if (!grad.isFinite().all()) {
    ++state.skipped;
    return;
  }
  state.ensure(params.size());
  ++state.t;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.square();
  double bc1 = 1.0 - std::pow(beta1, double(state.t));
  double bc2 = 1.0 - std::pow(beta2, double(state.t));
  params -= lr * (state.m / bc1) / ((state.v / bc2).sqrt() + eps);
}

// ------------------------------------------------------------ Eq. 2

double l1_loss(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("l1_loss: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return a.empty() ? 0.0 : s / double(a.size());
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // dynamic range 1
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kSsimWindow>& ssim_kernel() {
  static const std::array<double, kSsimWindow> k = [] {
    std::array<double, kSsimWindow> out{};
    double sum = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
      double d = i - (kSsimWindow - 1) / 2.0;
      out[size_t(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
      sum += out[size_t(i)];
    }
    for (auto& v : out) v /= sum;
    return out;
  }();
  return k;
}

// separable 11-tap Gaussian, zero padding; values are exact wherever the
// full window fits, and only those pixels enter the SSIM mean
void gauss_filter(const double* in, double* out, int w, int h, int channels,
                  std::vector<double>& tmp) {
  const auto& k = ssim_kernel();
  const int r = kSsimWindow / 2;
  tmp.assign(size_t(w) * h * channels, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          int xx = x + i;
          if (xx < 0 || xx >= w) continue;
          acc += k[size_t(i + r)] * in[(size_t(y) * w + xx) * channels + c];
        }
        tmp[(size_t(y) * w + x) * channels + c] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          int yy = y + i;
          if (yy < 0 || yy >= h) continue;
          acc += k[size_t(i + r)] * tmp[(size_t(yy) * w + x) * channels + c];
        }
        out[(size_t(y) * w + x) * channels + c] = acc;
      }
}

}  // namespace

double ssim(const std::vector<double>& img, const std::vector<double>& ref,
            int width, int height, int channels, std::vector<double>* d_img) {
  if (img.size() != ref.size() ||
      img.size() != size_t(width) * height * channels)
    throw std::invalid_argument("ssim: shape mismatch");
  const int r = kSsimWindow / 2;
  if (width < kSsimWindow || height < kSsimWindow) {
    // no full window fits; treat as perfect (no gradient signal)
    if (d_img) d_img->assign(img.size(), 0.0);
    return 1.0;
  }
  size_t n = img.size();
  std::vector<double> xx(n), yy(n), xy(n);
  for (size_t i = 0; i < n; ++i) {
    xx[i] = img[i] * img[i];
    yy[i] = ref[i] * ref[i];
    xy[i] = img[i] * ref[i];
  }
  std::vector<double> mu_x(n), mu_y(n), m_xx(n), m_yy(n), m_xy(n), tmp;
  gauss_filter(img.data(), mu_x.data(), width, height, channels, tmp);
  gauss_filter(ref.data(), mu_y.data(), width, height, channels, tmp);
  gauss_filter(xx.data(), m_xx.data(), width, height, channels, tmp);
  gauss_filter(yy.data(), m_yy.data(), width, height, channels, tmp);
  gauss_filter(xy.data(), m_xy.data(), width, height, channels, tmp);

  int64_t valid = int64_t(width - 2 * r) * (height - 2 * r) * channels;
  double total = 0;
  std::vector<double> g1, g2, g3;
  if (d_img) {
    g1.assign(n, 0.0);
    g2.assign(n, 0.0);
    g3.assign(n, 0.0);
  }
  for (int y = r; y < height - r; ++y)
    for (int x = r; x < width - r; ++x)
      for (int c = 0; c < channels; ++c) {
        size_t i = (size_t(y) * width + x) * channels + c;
        double mx = mu_x[i], my = mu_y[i];
        double sx = m_xx[i] - mx * mx;
        double sy = m_yy[i] - my * my;
        double sxy = m_xy[i] - mx * my;
        double a1 = 2 * mx * my + kC1, a2 = 2 * sxy + kC2;
        double b1 = mx * mx + my * my + kC1, b2 = sx + sy + kC2;
        double s = (a1 * a2) / (b1 * b2);
        total += s;
        if (!d_img) continue;
        // dS w.r.t. the window statistics, then into the g-fields that get
        // convolved back onto pixels
        double d_a1 = a2 / (b1 * b2);
        double d_a2 = a1 / (b1 * b2);
        double d_b1 = -s / b1;
        double d_b2 = -s / b2;
        double d_mx = 2 * my * d_a1 + 2 * mx * d_b1;
        double d_sx = d_b2;
        double d_sxy = 2 * d_a2;
        g1[i] = d_mx - 2 * mx * d_sx - my * d_sxy;
        g2[i] = 2 * d_sx;
        g3[i] = d_sxy;
      }
  double mean = total / double(valid);
  if (d_img) {
    std::vector<double> c1(n), c2(n), c3(n);
    gauss_filter(g1.data(), c1.data(), width, height, channels, tmp);
    gauss_filter(g2.data(), c2.data(), width, height, channels, tmp);
    gauss_filter(g3.data(), c3.data(), width, height, channels, tmp);
    d_img->assign(n, 0.0);
    double inv = 1.0 / double(valid);
    for (size_t i = 0; i < n; ++i)
      (*d_img)[i] = inv * (c1[i] + img[i] * c2[i] + ref[i] * c3[i]);
  }
  return mean;
}

double reconstruction_loss(const std::vector<double>& img,
                           const std::vector<double>& ref, int width,
                           int height, double lambda,
                           std::vector<double>* d_img) {
  double l1 = l1_loss(img, ref);
  std::vector<double> d_ssim;
  double s = ssim(img, ref, width, height, 3, d_img ? &d_ssim : nullptr);
  double loss = (1.0 - lambda) * l1 + lambda * (1.0 - s);
  if (d_img) {
    d_img->assign(img.size(), 0.0);
    double inv = (1.0 - lambda) / double(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
      double d = img[i] - ref[i];
      (*d_img)[i] = (d > 0 ? inv : (d < 0 ? -inv : 0.0)) - lambda * d_ssim[i];
    }
  }
  return loss;
}

// ------------------------------------------------------------ Eq. 3

double smoothing_loss(const Eigen::MatrixXf& features,
                      const std::vector<std::vector<int>>& knn,
                      int sample_count, Rng rng, Eigen::MatrixXd* d_features) {
  int64_t n = features.rows();
  if (n == 0 || knn.empty() || int(knn[0].size()) >= n) return 0.0;
  int k = int(knn[0].size());
  sample_count = std::max(1, std::min<int>(sample_count, int(n)));
  double total = 0;
  double scale = 1.0 / (double(sample_count) * k);
  for (int t = 0; t < sample_count; ++t) {
    int i = int(rng.uniform_index(uint64_t(n)));
    Eigen::VectorXd fi = features.row(i).cast<double>();
    double ni = fi.norm();
    for (int j : knn[size_t(i)]) {
      Eigen::VectorXd fj = features.row(j).cast<double>();
      double nj = fj.norm();
      if (ni < 1e-12 || nj < 1e-12) {
        total += 1.0;  // undefined similarity counts as fully dissimilar
        continue;
      }
      double cos = fi.dot(fj) / (ni * nj);
      total += 1.0 - cos;
      if (d_features) {
        // d(1-cos)/dfi = -(fj/(|fi||fj|) - cos*fi/|fi|^2)
        Eigen::VectorXd gi = -(fj / (ni * nj) - cos * fi / (ni * ni));
        Eigen::VectorXd gj = -(fi / (ni * nj) - cos * fj / (nj * nj));
        d_features->row(i) += scale * gi.transpose();
        d_features->row(j) += scale * gj.transpose();
      }
    }
  }
  return total * scale;
}

// ------------------------------------------------------------ Eq. 8

namespace {

// sample up to `cap` distinct values from [0,n) (identity when n <= cap)
std::vector<int> subsample_indices(int n, int cap, Rng& rng) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= cap) return idx;
  for (int i = 0; i < cap; ++i) {
    int j = i + int(rng.uniform_index(uint64_t(n - i)));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  idx.resize(size_t(cap));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

ContrastiveGroups build_contrastive_groups(
    const ClusterResult& cluster, const Scene& scene, const FeatMap& rendered,
    const InstanceMasks& masks, double pos_sim_threshold, int subsample_cap,
    Rng rng) {
  ContrastiveGroups out;
  int ng = cluster.n_groups;
  if (ng == 0) return out;

  // per-group pixel lists for the 2D side
  std::vector<std::vector<int>> group_pixels(static_cast<size_t>(ng));
  for (size_t k = 0; k < masks.masks.size(); ++k) {
    int g = masks.group_ids[k];
    if (g < 0 || g >= ng) continue;
    for (int p = 0; p < masks.width * masks.height; ++p)
      if (masks.masks[k].m[size_t(p)]) group_pixels[size_t(g)].push_back(p);
  }

  for (int i = 0; i < ng; ++i) {
    ContrastiveGroup g;
    g.group_id = i;
    Eigen::VectorXd mean_i =
        cluster.mean_feature.row(i).cast<double>().normalized();

    const auto& memb = cluster.members[size_t(i)];
    auto pick3d = subsample_indices(int(memb.size()), subsample_cap, rng);
    for (int m : pick3d) {
      ContrastiveMember cm;
      cm.gaussian = memb[size_t(m)];
      cm.f = scene.idsf[size_t(cm.gaussian)].f.cast<double>();
      g.members.push_back(std::move(cm));
    }
    const auto& pixels = group_pixels[size_t(i)];
    auto pick2d = subsample_indices(int(pixels.size()), subsample_cap, rng);
    for (int m : pick2d) {
      int p = pixels[size_t(m)];
      ContrastiveMember cm;
      cm.pixel = p;
      const double* f = rendered.v.data() + size_t(p) * rendered.channels;
      cm.f = Eigen::Map<const Eigen::VectorXd>(f, rendered.channels);
      g.members.push_back(std::move(cm));
    }

    std::vector<int> pos{i}, neg;
    for (int j = 0; j < ng; ++j) {
      if (j == i) continue;
      Eigen::VectorXd mean_j =
          cluster.mean_feature.row(j).cast<double>().normalized();
      (mean_i.dot(mean_j) > pos_sim_threshold ? pos : neg).push_back(j);
    }
    g.positive_means.resize(int(pos.size()), cluster.mean_feature.cols());
    for (int r = 0; r < int(pos.size()); ++r)
      g.positive_means.row(r) =
          cluster.mean_feature.row(pos[size_t(r)]).cast<double>().normalized();
    g.negative_means.resize(int(neg.size()), cluster.mean_feature.cols());
    for (int r = 0; r < int(neg.size()); ++r)
      g.negative_means.row(r) =
          cluster.mean_feature.row(neg[size_t(r)]).cast<double>().normalized();
    out.groups.push_back(std::move(g));
  }
  return out;
}

double contrastive_loss(const ContrastiveGroups& groups, double tau,
                        std::vector<std::vector<Eigen::VectorXd>>* d_members) {
  if (d_members) {
    d_members->assign(groups.groups.size(), {});
    for (size_t gi = 0; gi < groups.groups.size(); ++gi)
      (*d_members)[gi].assign(groups.groups[gi].members.size(),
                              Eigen::VectorXd());
  }
  // a group enters the average only with >=1 negative and >=1 member
  int included = 0;
  for (const auto& g : groups.groups)
    if (g.negative_means.rows() > 0 && !g.members.empty()) ++included;
  if (included == 0) return 0.0;

  double total = 0;
  for (size_t gi = 0; gi < groups.groups.size(); ++gi) {
    const auto& g = groups.groups[gi];
    if (g.negative_means.rows() == 0 || g.members.empty()) continue;
    double inv_m = 1.0 / double(g.members.size());
    for (size_t mi = 0; mi < g.members.size(); ++mi) {
      const Eigen::VectorXd& f = g.members[mi].f;
      double fn = f.norm();
      if (fn < 1e-12) continue;  // zero feature: no similarity, no gradient
      Eigen::VectorXd fhat = f / fn;
      double psum = 0, nsum = 0;
      Eigen::VectorXd d_fhat = Eigen::VectorXd::Zero(f.size());
      std::vector<double> pw(size_t(g.positive_means.rows()));
      std::vector<double> nw(size_t(g.negative_means.rows()));
      for (int r = 0; r < g.positive_means.rows(); ++r) {
        pw[size_t(r)] = std::exp(fhat.dot(g.positive_means.row(r)) / tau);
        psum += pw[size_t(r)];
      }
      for (int r = 0; r < g.negative_means.rows(); ++r) {
        nw[size_t(r)] = std::exp(fhat.dot(g.negative_means.row(r)) / tau);
        nsum += nw[size_t(r)];
      }
      total += -std::log(psum / nsum) * inv_m / double(included);
      if (!d_members) continue;
      for (int r = 0; r < g.positive_means.rows(); ++r)
        d_fhat -= (pw[size_t(r)] / (psum * tau)) *
                  g.positive_means.row(r).transpose();
      for (int r = 0; r < g.negative_means.rows(); ++r)
        d_fhat += (nw[size_t(r)] / (nsum * tau)) *
                  g.negative_means.row(r).transpose();
      d_fhat *= inv_m / double(included);
      // normalize backward: d_f = (I - fhat fhat^T)/|f| d_fhat
      (*d_members)[gi][mi] = (d_fhat - fhat * fhat.dot(d_fhat)) / fn;
    }
  }
  return total;
}

// ------------------------------------------------------------ phase 1

namespace {

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::vector<double> image_to_buffer(const Image& img) {
  std::vector<double> out(img.rgb.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = img.rgb[i];
  return out;
}

double psnr_on_view(const Scene& scene, int view) {
  RenderRequest req;
  RenderOutput out = render(scene, scene.cameras[size_t(view)], req);
  const Image& ref = scene.train_images[size_t(view)];
  double mse = 0;
  for (size_t i = 0; i < out.color.size(); ++i) {
    double d = out.color[i] - ref.rgb[i];
    mse += d * d;
  }
  mse /= double(out.color.size());
  if (mse <= 0) return 99.0;
  return -10.0 * std::log10(mse);
}

}  // namespace

Phase1Result phase1_reconstruct(Scene& scene, const TrainConfig& cfg,
                                const TrainLogger& log) {
  if (scene.cameras.size() != scene.train_images.size() || scene.cameras.empty())
    throw ConfigError("phase 1 needs training views");
  int64_t n = int64_t(scene.size());
  if (n == 0) throw ConfigError("phase 1 on empty scene");
  int n_views = int(scene.cameras.size());
  int holdout = cfg.holdout_view < 0 ? n_views - 1 : cfg.holdout_view;
  if (holdout >= n_views) throw ConfigError("holdout view out of range");

  // master copies in double; the scene carries the working float values
  Eigen::ArrayXd pos(3 * n), rot(4 * n), lsc(3 * n), opa(n), col(3 * n);
  for (int64_t i = 0; i < n; ++i) {
    const Gaussian& g = scene.gaussians[size_t(i)];
    for (int k = 0; k < 3; ++k) pos[3 * i + k] = g.position[k];
    for (int k = 0; k < 4; ++k) rot[4 * i + k] = g.rotation[k];
    for (int k = 0; k < 3; ++k) lsc[3 * i + k] = g.log_scale[k];
    opa[i] = g.opacity_logit;
    for (int k = 0; k < 3; ++k) col[3 * i + k] = g.color[k];
  }
  auto write_back = [&] {
    for (int64_t i = 0; i < n; ++i) {
      Gaussian& g = scene.gaussians[size_t(i)];
      for (int k = 0; k < 3; ++k) g.position[k] = float(pos[3 * i + k]);
      for (int k = 0; k < 4; ++k) g.rotation[k] = float(rot[4 * i + k]);
      for (int k = 0; k < 3; ++k) g.log_scale[k] = float(lsc[3 * i + k]);
      g.opacity_logit = float(opa[i]);
      for (int k = 0; k < 3; ++k) g.color[k] = float(col[3 * i + k]);
    }
  };

  AdamState st_pos, st_rot, st_lsc, st_opa, st_col;
  Rng rng = Rng(cfg.seed).fork("phase1");
  std::vector<int> train_views;
  for (int v = 0; v < n_views; ++v)
    if (v != holdout || n_views == 1) train_views.push_back(v);

  RenderRequest req;  // color only
  double last_loss = 0;
  for (int it = 0; it < cfg.phase1_iters; ++it) {
    int view = train_views[rng.uniform_index(train_views.size())];
    const Camera& cam = scene.cameras[size_t(view)];
    ForwardContext ctx;
    RenderOutput out = render(scene, cam, req, &ctx);

    std::vector<double> ref = image_to_buffer(scene.train_images[size_t(view)]);
    std::vector<double> d_img;
    double loss = reconstruction_loss(out.color, ref, cam.width, cam.height,
                                      cfg.lambda_ssim, &d_img);
    if (!std::isfinite(loss))
      throw NumericalError(fmt("phase 1 diverged at iter %d (loss not finite)", it));
    last_loss = loss;

    RenderGrads rg = render_backward(ctx, d_img, {}, scene.size());

    Eigen::ArrayXd g_pos = Eigen::ArrayXd::Zero(3 * n);
    Eigen::ArrayXd g_rot = Eigen::ArrayXd::Zero(4 * n);
    Eigen::ArrayXd g_lsc = Eigen::ArrayXd::Zero(3 * n);
    Eigen::ArrayXd g_opa = Eigen::ArrayXd::Zero(n);
    Eigen::ArrayXd g_col = Eigen::ArrayXd::Zero(3 * n);
    for (size_t s = 0; s < ctx.splats.size(); ++s) {
      int64_t src = ctx.splats[s].source_index;
      const Gaussian& g = scene.gaussians[size_t(src)];
      Eigen::Matrix2d dcov;
      dcov << rg.d_cov2d[s][0], 0.5 * rg.d_cov2d[s][1],
              0.5 * rg.d_cov2d[s][1], rg.d_cov2d[s][2];
      ProjectionGrads pg =
          project_gaussian_backward(g, cam, rg.d_mean2d[s], dcov, 0.0);
      for (int k = 0; k < 3; ++k) g_pos[3 * src + k] += pg.d_position[k];
      for (int k = 0; k < 4; ++k) g_rot[4 * src + k] += pg.d_rotation[k];
      for (int k = 0; k < 3; ++k) g_lsc[3 * src + k] += pg.d_log_scale[k];
      double a = ctx.splats[s].alpha;
      g_opa[src] += rg.d_alpha[s] * a * (1.0 - a);
      for (int k = 0; k < 3; ++k) g_col[3 * src + k] += rg.d_color[s][k];
    }

    adam_step(Eigen::Map<Eigen::ArrayXd>(pos.data(), pos.size()), g_pos, st_pos, cfg.lr_gauss);
    adam_step(Eigen::Map<Eigen::ArrayXd>(rot.data(), rot.size()), g_rot, st_rot, cfg.lr_gauss);
    adam_step(Eigen::Map<Eigen::ArrayXd>(lsc.data(), lsc.size()), g_lsc, st_lsc, cfg.lr_gauss);
    adam_step(Eigen::Map<Eigen::ArrayXd>(opa.data(), opa.size()), g_opa, st_opa, cfg.lr_gauss);
    adam_step(Eigen::Map<Eigen::ArrayXd>(col.data(), col.size()), g_col, st_col, cfg.lr_gauss);
    write_back();

    if (it % 100 == 0 || it + 1 == cfg.phase1_iters)
      log.log(fmt("phase1 iter=%d loss=%.6f view=%d", it, loss, view));
  }

  Phase1Result res;
  res.final_loss = last_loss;
  res.holdout_psnr = psnr_on_view(scene, holdout);
  log.log(fmt("phase1 done loss=%.6f holdout_psnr=%.2f", res.final_loss,
              res.holdout_psnr));
  return res;
}

// ------------------------------------------------------------ phase 2

namespace {

// rows of `raw` pushed through the head only where a splat actually landed;
// untouched pixels share one constant output (and rank-1 weight-gradient
// corrections on the way back)
struct HeadOnMap {
  std::vector<int> active;           // pixel indices with coverage
  Eigen::MatrixXd active_in;         // |active| x D
  Eigen::VectorXd bg_out;            // head(0)
  FeatMap projected;                 // H x W x D_t

  static HeadOnMap run(const ProjectionHead& head, const FeatMap& raw,
                       const std::vector<int>& n_contrib) {
    HeadOnMap r;
    int hw = raw.height * raw.width, d = raw.channels;
    for (int p = 0; p < hw; ++p)
      if (n_contrib[size_t(p)] > 0) r.active.push_back(p);
    r.active_in.resize(int(r.active.size()), d);
    for (int a = 0; a < int(r.active.size()); ++a)
      r.active_in.row(a) = Eigen::Map<const Eigen::VectorXd>(
          raw.v.data() + size_t(r.active[size_t(a)]) * d, d);
    Eigen::MatrixXd act_out = head.forward(r.active_in);
    r.bg_out = head.forward(Eigen::MatrixXd::Zero(1, d)).row(0);
    r.projected = FeatMap(raw.height, raw.width, int(r.bg_out.size()));
    int dt = int(r.bg_out.size());
    for (int p = 0; p < hw; ++p)
      for (int c = 0; c < dt; ++c) r.projected.v[size_t(p) * dt + c] = r.bg_out[c];
    for (int a = 0; a < int(r.active.size()); ++a)
      for (int c = 0; c < dt; ++c)
        r.projected.v[size_t(r.active[size_t(a)]) * dt + c] = act_out(a, c);
    return r;
  }
};

struct HeadGrads {
  Eigen::MatrixXd d_w1, d_w2;
  Eigen::VectorXd d_b1, d_b2;
  void add(const ProjectionHead::Backward& b) {
    if (d_w1.size() == 0) {
      d_w1 = b.d_w1; d_w2 = b.d_w2; d_b1 = b.d_b1; d_b2 = b.d_b2;
    } else {
      d_w1 += b.d_w1; d_w2 += b.d_w2; d_b1 += b.d_b1; d_b2 += b.d_b2;
    }
  }
};

// backward through HeadOnMap: returns gradient w.r.t. raw rendered features
// on active pixels (background pixels have no raw-feature path) and adds the
// exact weight gradients including the background rows' contribution
FeatMap head_on_map_backward(const ProjectionHead& head, const HeadOnMap& fwd,
                             const FeatMap& d_projected, HeadGrads& hg,
                             int raw_dim) {
  int dt = int(fwd.bg_out.size());
  int hw = d_projected.height * d_projected.width;
  Eigen::MatrixXd d_act(int(fwd.active.size()), dt);
  std::vector<char> is_active(size_t(hw), 0);
  for (int a = 0; a < int(fwd.active.size()); ++a) {
    is_active[size_t(fwd.active[size_t(a)])] = 1;
    d_act.row(a) = Eigen::Map<const Eigen::VectorXd>(
        d_projected.v.data() + size_t(fwd.active[size_t(a)]) * dt, dt);
  }
  ProjectionHead::Backward act_bwd = head.backward(fwd.active_in, d_act);
  hg.add(act_bwd);

  // background pixels: input is all-zero, so only bias/weight paths remain
  Eigen::VectorXd bg_sum = Eigen::VectorXd::Zero(dt);
  for (int p = 0; p < hw; ++p) {
    if (is_active[size_t(p)]) continue;
    bg_sum += Eigen::Map<const Eigen::VectorXd>(
        d_projected.v.data() + size_t(p) * dt, dt);
  }
  Eigen::VectorXd act_bg = head.b1.cwiseMax(0.0);
  hg.d_b2 += bg_sum;
  hg.d_w2 += bg_sum * act_bg.transpose();
  Eigen::VectorXd d_h_bg = head.w2.transpose() * bg_sum;
  for (int i = 0; i < d_h_bg.size(); ++i)
    if (head.b1[i] <= 0.0) d_h_bg[i] = 0.0;
  hg.d_b1 += d_h_bg;
  // d_w1 contribution is d_h_bg * 0^T = 0; no raw-feature gradient either

  FeatMap d_raw(d_projected.height, d_projected.width, raw_dim);
  for (int a = 0; a < int(fwd.active.size()); ++a)
    Eigen::Map<Eigen::VectorXd>(
        d_raw.v.data() + size_t(fwd.active[size_t(a)]) * raw_dim, raw_dim) =
        act_bwd.d_in.row(a);
  return d_raw;
}

}  // namespace

Phase2Result phase2_bootstrap(Scene& scene, const Teacher& teacher,
                              const TrainConfig& cfg, const TrainLogger& log) {
  if (scene.cameras.empty() || scene.train_images.empty())
    throw ConfigError("phase 2 needs training views");
  int64_t n = int64_t(scene.size());
  if (n == 0) throw ConfigError("phase 2 on empty scene");
  int n_views = int(scene.cameras.size());
  int holdout = cfg.holdout_view < 0 ? n_views - 1 : cfg.holdout_view;

  Rng rng = Rng(cfg.seed).fork("phase2");

  // feature init: uniform on the unit sphere when the field is absent
  int d = cfg.feature_dim;
  bool need_init = scene.feature_dim() != d;
  if (!need_init) {
    double nrm = 0;
    for (const auto& t : scene.idsf) nrm += t.f.norm();
    need_init = nrm < 1e-9;
  }
  if (need_init) {
    Rng frng = rng.fork("feat-init");
    scene.idsf.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
      Eigen::VectorXf f(d);
      float nrm = 0;
      do {
        for (int k = 0; k < d; ++k) f[k] = float(frng.normal());
        nrm = f.norm();
      } while (nrm < 1e-6f);
      scene.idsf[size_t(i)].f = f / nrm;
      scene.idsf[size_t(i)].d = kUnassigned;
    }
  }

  int stride = scene.cameras[0].height / teacher.map_height();
  if (stride < 1 || stride * teacher.map_height() != scene.cameras[0].height ||
      stride * teacher.map_width() != scene.cameras[0].width)
    throw ConfigError("render resolution not divisible to the teacher grid");

  ProjectionHead head = ProjectionHead::init(d, teacher.dim(), rng.fork("head"));
  Downsampler down = Downsampler::init(teacher.dim(), stride, rng.fork("down"));

  // geometry is frozen; the neighbor graph holds for the whole phase
  Eigen::MatrixXf positions(n, 3);
  for (int64_t i = 0; i < n; ++i)
    positions.row(i) = scene.gaussians[size_t(i)].position.transpose();
  std::vector<std::vector<int>> knn;
  if (n > cfg.knn_k) knn = knn_graph(positions, cfg.knn_k);

  ClusterConfig ccfg;
  ClusterResult cluster = cluster_scene(scene, ccfg);
  if (cluster.n_groups == 0)
    log.log("warning: initial clustering found no groups");

  // master feature copy in double + optimizer state
  Eigen::ArrayXd feat(n * d);
  for (int64_t i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) feat[i * d + k] = scene.idsf[size_t(i)].f[k];
  auto write_feat = [&] {
    for (int64_t i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k)
        scene.idsf[size_t(i)].f[k] = float(feat[i * d + k]);
  };
  AdamState st_feat, st_w1, st_w2, st_b1, st_b2, st_dw, st_db;

  std::vector<int> train_views;
  for (int v = 0; v < n_views; ++v)
    if (v != holdout || n_views == 1) train_views.push_back(v);

  // the 0.1% sampling rate degenerates on small scenes, so floor the draw
  // count; the floor is inactive at the scale the rate was tuned for
  int sample_count = std::max(32, int(std::llround(cfg.t_frac * double(n))));
  sample_count = int(std::min<int64_t>(sample_count, n));
  Phase2Result res;
  int t_total = std::max(1, cfg.phase2_iters);

  for (int it = 0; it < t_total; ++it) {
    if (it > 0 && cfg.recluster_every > 0 && it % cfg.recluster_every == 0) {
      ClusterResult next = cluster_scene(scene, ccfg);
      if (next.n_groups == 0)
        log.log(fmt("warning: clustering at iter %d found no groups; keeping "
                    "previous labels", it));
      else
        cluster = std::move(next);
    }

    int view = train_views[rng.uniform_index(train_views.size())];
    const Camera& cam = scene.cameras[size_t(view)];

    RenderRequest req;
    req.color = false;
    req.feature = true;
    req.id = true;
    req.n_groups = std::max(cluster.n_groups, 1);
    ForwardContext ctx;
    RenderOutput rout = render(scene, cam, req, &ctx);

    FeatMap raw(cam.height, cam.width, d);
    raw.v = rout.feature;

    InstanceMasks masks = extract_masks(rout.id_map, cam.width, cam.height,
                                        cluster.n_groups, cfg.mask_min_area);

    HeadOnMap hm = HeadOnMap::run(head, raw, ctx.n_contrib);
    FeatMap f_hat = down.forward(hm.projected);
    FeatMap f_pix = teacher.pix_features(view);
    FeatMap f_ins = instance_feature_map(scene.train_images[size_t(view)],
                                         masks, teacher, view);

    double lf = multilevel_loss(f_hat, f_pix, hm.projected, f_ins, masks,
                                cfg.gamma);
    MultilevelGrads mg = multilevel_loss_backward(f_hat, f_pix, hm.projected,
                                                  f_ins, masks, cfg.gamma);
    Downsampler::Backward db = down.backward(hm.projected, mg.d_f_hat);
    FeatMap d_projected = mg.d_f_full;
    for (size_t i = 0; i < d_projected.v.size(); ++i)
      d_projected.v[i] += db.d_in.v[i];

    HeadGrads hg;
    FeatMap d_raw = head_on_map_backward(head, hm, d_projected, hg, d);

    Eigen::ArrayXd g_feat = Eigen::ArrayXd::Zero(n * d);
    double ls = 0, lc = 0;
    bool sparse = (it % cfg.sparse_loss_every == 0);
    if (sparse) {
      // Eq. 3 straight on the 3D field
      if (!knn.empty()) {
        Eigen::MatrixXd d_feat3d = Eigen::MatrixXd::Zero(n, d);
        Eigen::MatrixXf fm(n, d);
        for (int64_t i = 0; i < n; ++i)
          for (int k = 0; k < d; ++k) fm(i, k) = float(feat[i * d + k]);
        ls = smoothing_loss(fm, knn, sample_count, rng.fork("smooth").fork(uint64_t(it)),
                            &d_feat3d);
        for (int64_t i = 0; i < n; ++i)
          for (int k = 0; k < d; ++k)
            g_feat[i * d + k] += cfg.lambda_s * d_feat3d(i, k);
      }
      // Eq. 8 on the joint 2D/3D members
      if (cluster.n_groups >= 2) {
        ContrastiveGroups cg = build_contrastive_groups(
            cluster, scene, raw, masks, cfg.pos_sim_threshold,
            cfg.contrastive_subsample, rng.fork("contrast").fork(uint64_t(it)));
        std::vector<std::vector<Eigen::VectorXd>> dm;
        lc = contrastive_loss(cg, cfg.tau, &dm);
        for (size_t gi = 0; gi < cg.groups.size(); ++gi)
          for (size_t mi = 0; mi < cg.groups[gi].members.size(); ++mi) {
            const auto& grad = dm[gi][mi];
            if (grad.size() == 0) continue;
            const auto& m = cg.groups[gi].members[mi];
            if (m.gaussian >= 0) {
              for (int k = 0; k < d; ++k)
                g_feat[int64_t(m.gaussian) * d + k] += cfg.lambda_c * grad[k];
            } else if (m.pixel >= 0) {
              for (int k = 0; k < d; ++k)
                d_raw.v[size_t(m.pixel) * d + k] += cfg.lambda_c * grad[k];
            }
          }
      }
    }

    // rendered-feature gradients back to the per-Gaussian field
    RenderGrads rg = render_backward(ctx, {}, d_raw.v, scene.size());
    for (size_t s = 0; s < ctx.splats.size(); ++s) {
      int64_t src = ctx.splats[s].source_index;
      if (rg.d_feature[s].size() == 0) continue;
      for (int k = 0; k < d; ++k)
        g_feat[src * d + k] += rg.d_feature[s][k];
    }

    double total = lf + cfg.lambda_c * lc + cfg.lambda_s * ls;
    if (!std::isfinite(total))
      throw NumericalError(fmt("phase 2 diverged at iter %d", it));

    adam_step(Eigen::Map<Eigen::ArrayXd>(feat.data(), feat.size()), g_feat,
              st_feat, cfg.lr_gauss);
    write_feat();

    auto step_mat = [&](Eigen::MatrixXd& m, const Eigen::MatrixXd& g,
                        AdamState& st) {
      Eigen::ArrayXd gv = Eigen::Map<const Eigen::ArrayXd>(g.data(), g.size());
      adam_step(Eigen::Map<Eigen::ArrayXd>(m.data(), m.size()), gv, st,
                cfg.lr_head);
    };
    step_mat(head.w1, hg.d_w1, st_w1);
    step_mat(head.w2, hg.d_w2, st_w2);
    adam_step(Eigen::Map<Eigen::ArrayXd>(head.b1.data(), head.b1.size()),
              hg.d_b1.array(), st_b1, cfg.lr_head);
    adam_step(Eigen::Map<Eigen::ArrayXd>(head.b2.data(), head.b2.size()),
              hg.d_b2.array(), st_b2, cfg.lr_head);
    adam_step(Eigen::Map<Eigen::ArrayXd>(down.weight.data(),
                                         int64_t(down.weight.size())),
              Eigen::Map<const Eigen::ArrayXd>(db.d_weight.data(),
                                               int64_t(db.d_weight.size())),
              st_dw, cfg.lr_head);
    adam_step(Eigen::Map<Eigen::ArrayXd>(down.bias.data(), down.bias.size()),
              db.d_bias.array(), st_db, cfg.lr_head);

    res.last_lf = lf;
    if (sparse) {
      res.last_lc = lc;
      res.last_ls = ls;
    }
    if (it % 50 == 0 || it + 1 == t_total)
      log.log(fmt("phase2 iter=%d lf=%.6f lc=%.6f ls=%.6f total=%.6f ng=%d",
                  it, lf, lc, ls, total, cluster.n_groups));
  }

  // final pass so labels reflect the converged features
  ClusterResult final_cluster = cluster_scene(scene, ccfg);
  if (final_cluster.n_groups > 0) cluster = std::move(final_cluster);
  res.cluster = std::move(cluster);
  res.modules.head = std::move(head);
  res.modules.down = std::move(down);
  return res;
}

// ------------------------------------------------------------ checkpoints

namespace {

Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros(Dtype::F64, {uint64_t(m.rows()), uint64_t(m.cols())});
  auto p = t.as<double>().data();
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) p[size_t(i) * m.cols() + j] = m(i, j);
  return t;
}

Eigen::MatrixXd tensor_matrix(const Tensor& t) {
  Eigen::MatrixXd m(int(t.dims[0]), int(t.dims[1]));
  auto p = t.as<double>().data();
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = p[size_t(i) * m.cols() + j];
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Scene& scene,
                     const Phase2Modules* modules) {
  std::filesystem::create_directories(dir);
  save_scene(scene, dir / "scene.idsf");
  if (!modules) return;
  write_tensor(dir / "head_w1.tnsr", matrix_tensor(modules->head.w1));
  write_tensor(dir / "head_w2.tnsr", matrix_tensor(modules->head.w2));
  write_tensor(dir / "head_b1.tnsr", matrix_tensor(modules->head.b1));
  write_tensor(dir / "head_b2.tnsr", matrix_tensor(modules->head.b2));
  Tensor dw = Tensor::zeros(
      Dtype::F64, {uint64_t(modules->down.channels), uint64_t(modules->down.channels),
                   uint64_t(modules->down.stride), uint64_t(modules->down.stride)});
  std::copy(modules->down.weight.begin(), modules->down.weight.end(),
            dw.as<double>().data());
  write_tensor(dir / "down_w.tnsr", dw);
  write_tensor(dir / "down_b.tnsr", matrix_tensor(modules->down.bias));
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.scene = load_scene(dir / "scene.idsf");
  if (!std::filesystem::exists(dir / "head_w1.tnsr")) return ck;
  Phase2Modules m;
  m.head.w1 = tensor_matrix(read_tensor(dir / "head_w1.tnsr"));
  m.head.w2 = tensor_matrix(read_tensor(dir / "head_w2.tnsr"));
  m.head.b1 = tensor_matrix(read_tensor(dir / "head_b1.tnsr")).col(0);
  m.head.b2 = tensor_matrix(read_tensor(dir / "head_b2.tnsr")).col(0);
  Tensor dw = read_tensor(dir / "down_w.tnsr");
  m.down.channels = int(dw.dims[0]);
  m.down.stride = int(dw.dims[2]);
  m.down.weight.assign(dw.as<double>().data(), dw.as<double>().data() + dw.numel());
  m.down.bias = tensor_matrix(read_tensor(dir / "down_b.tnsr")).col(0);
  ck.modules = std::move(m);
  return ck;
}

}  // namespace gsf

#include "gsfield/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "gsfield/scene.hpp"

#include "gsfield/errors.hpp"

namespace gsf {

// ------------------------------------------------------------ teachers

SyntheticTeacher::SyntheticTeacher(SyntheticTruth truth, int stride,
                                   double sigma_noise, uint64_t seed)
    : truth_(std::move(truth)), stride_(stride), sigma_noise_(sigma_noise),
      seed_(seed) {
  if (truth_.width % stride_ != 0 || truth_.height % stride_ != 0)
    throw ConfigError("image size not divisible by teacher stride");
}

FeatMap SyntheticTeacher::pix_features(int view) const {
  const auto& cls = truth_.view_class_maps.at(size_t(view));
  int ht = map_height(), wt = map_width();
  int dt = dim();
  int n_classes = int(truth_.class_embeddings.rows());

  // dominant true class per stride block (ties -> lower class, bg wins only
  // when it is the strict majority candidate with the lowest id = -1 handled
  // as its own bucket)
  std::vector<int> block_cls(size_t(ht) * wt, -1);
  std::vector<int> counts(size_t(n_classes) + 1);
  for (int by = 0; by < ht; ++by)
    for (int bx = 0; bx < wt; ++bx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int dy = 0; dy < stride_; ++dy)
        for (int dx = 0; dx < stride_; ++dx) {
          int64_t c = cls[size_t(by * stride_ + dy) * truth_.width +
                          size_t(bx * stride_ + dx)];
          ++counts[c < 0 ? size_t(n_classes) : size_t(c)];
        }
      // majority vote; objects beat background on ties, lower id wins
      int best = -1, best_count = counts[size_t(n_classes)];
      for (int c = 0; c < n_classes; ++c)
        if (counts[size_t(c)] > best_count ||
            (counts[size_t(c)] == best_count && counts[size_t(c)] > 0 && best < 0))
          best = c, best_count = counts[size_t(c)];
      block_cls[size_t(by) * wt + bx] = best;
    }

  FeatMap clean(ht, wt, dt);
  for (int y = 0; y < ht; ++y)
    for (int x = 0; x < wt; ++x) {
      int c = block_cls[size_t(y) * wt + x];
      if (c < 0) continue;
      double* p = clean.at(y, x);
      for (int k = 0; k < dt; ++k) p[k] = truth_.class_embeddings(c, k);
    }

  // 3-px boundary blend: box blur; interior pixels are unaffected
  FeatMap out(ht, wt, dt);
  for (int y = 0; y < ht; ++y)
    for (int x = 0; x < wt; ++x) {
      double* p = out.at(y, x);
      int cnt = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = std::clamp(y + dy, 0, ht - 1);
          int xx = std::clamp(x + dx, 0, wt - 1);
          const double* q = clean.at(yy, xx);
          for (int k = 0; k < dt; ++k) p[k] += q[k];
          ++cnt;
        }
      for (int k = 0; k < dt; ++k) p[k] /= cnt;
    }

  Rng rng = Rng(seed_).fork("pix").fork(uint64_t(view));
  for (int y = 0; y < ht; ++y)
    for (int x = 0; x < wt; ++x) {
      double* p = out.at(y, x);
      if (sigma_noise_ > 0)
        for (int k = 0; k < dt; ++k) p[k] += sigma_noise_ * rng.normal();
      double norm = 0;
      for (int k = 0; k < dt; ++k) norm += p[k] * p[k];
      norm = std::sqrt(norm);
      if (norm > 1e-9)
        for (int k = 0; k < dt; ++k) p[k] /= norm;
    }
  return out;
}

Eigen::VectorXd SyntheticTeacher::embed(const Image& /*masked_crop*/, int view,
                                        const MaskImage& mask) const {
  const auto& cls = truth_.view_class_maps.at(size_t(view));
  int n_classes = int(truth_.class_embeddings.rows());
  std::vector<int64_t> counts(size_t(n_classes), 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.get(y, x)) continue;
      int64_t c = cls[size_t(y) * mask.width + x];
      if (c >= 0 && c < n_classes) ++counts[size_t(c)];
    }
  int best = -1;
  for (int c = 0; c < n_classes; ++c)
    if (counts[size_t(c)] > 0 && (best < 0 || counts[size_t(c)] > counts[size_t(best)]))
      best = c;
  if (best < 0) return Eigen::VectorXd::Zero(dim());
  Eigen::VectorXd e = truth_.class_embeddings.row(best).transpose();
  if (sigma_noise_ > 0) {
    Rng rng = Rng(seed_).fork("embed").fork(uint64_t(view) * 131071u +
                                            uint64_t(best));
    for (int k = 0; k < e.size(); ++k) e[k] += sigma_noise_ * rng.normal();
    double norm = e.norm();
    if (norm > 1e-9) e /= norm;
  }
  return e;
}

FileTeacher::FileTeacher(const std::filesystem::path& dir) : dir_(dir) {
  Tensor vocab = read_tensor(dir / "vocabulary.tnsr");
  if (vocab.dims.size() != 2)
    throw MalformedHeaderError("vocabulary must be rank 2");
  int n = int(vocab.dims[0]);
  dim_ = int(vocab.dims[1]);
  vocab_.resize(n, dim_);
  auto vals = vocab.as<float>();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim_; ++j) vocab_(i, j) = vals[size_t(i) * dim_ + j];
  std::ifstream names(dir / "vocabulary.txt");
  std::string line;
  while (std::getline(names, line))
    if (!line.empty()) names_.push_back(line);
  Tensor first = read_tensor(dir / "pix_0000.tnsr");
  map_h_ = int(first.dims[0]);
  map_w_ = int(first.dims[1]);
}

FeatMap FileTeacher::pix_features(int view) const {
  char name[32];
  std::snprintf(name, sizeof name, "pix_%04d.tnsr", view);
  Tensor t = read_tensor(dir_ / name);
  FeatMap out(int(t.dims[0]), int(t.dims[1]), int(t.dims[2]));
  auto vals = t.as<float>();
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = vals[i];
  return out;
}

Eigen::VectorXd FileTeacher::embed(const Image& /*crop*/, int view,
                                   const MaskImage& mask) const {
  // mean dense feature over the (downsampled) mask, normalized
  FeatMap pix = pix_features(view);
  int sy = mask.height / pix.height, sx = mask.width / pix.width;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
  int64_t n = 0;
  for (int y = 0; y < pix.height; ++y)
    for (int x = 0; x < pix.width; ++x) {
      if (!mask.get(std::min(mask.height - 1, y * sy), std::min(mask.width - 1, x * sx)))
        continue;
      const double* p = pix.at(y, x);
      for (int k = 0; k < dim_; ++k) acc[k] += p[k];
      ++n;
    }
  if (n == 0) return acc;
  acc /= double(n);
  double norm = acc.norm();
  if (norm > 1e-9) acc /= norm;
  return acc;
}

// ------------------------------------------------------------ head & conv

ProjectionHead ProjectionHead::init(int in_dim, int out_dim, Rng rng) {
  ProjectionHead h;
  int hidden = 2 * out_dim;
  h.w1.resize(hidden, in_dim);
  h.w2.resize(out_dim, hidden);
  h.b1 = Eigen::VectorXd::Zero(hidden);
  h.b2 = Eigen::VectorXd::Zero(out_dim);
  double s1 = 1.0 / std::sqrt(double(in_dim));
  double s2 = 1.0 / std::sqrt(double(hidden));
  for (int i = 0; i < hidden; ++i)
    for (int j = 0; j < in_dim; ++j) h.w1(i, j) = s1 * rng.normal();
  for (int i = 0; i < out_dim; ++i)
    for (int j = 0; j < hidden; ++j) h.w2(i, j) = s2 * rng.normal();
  return h;
}

Eigen::MatrixXd ProjectionHead::forward(const Eigen::MatrixXd& in) const {
  Eigen::MatrixXd h = (in * w1.transpose()).rowwise() + b1.transpose();
  h = h.cwiseMax(0.0);
  return (h * w2.transpose()).rowwise() + b2.transpose();
}

ProjectionHead::Backward ProjectionHead::backward(
    const Eigen::MatrixXd& in, const Eigen::MatrixXd& d_out) const {
  Eigen::MatrixXd pre = (in * w1.transpose()).rowwise() + b1.transpose();
  Eigen::MatrixXd act = pre.cwiseMax(0.0);
  Backward b;
  b.d_w2 = d_out.transpose() * act;
  b.d_b2 = d_out.colwise().sum().transpose();
  Eigen::MatrixXd d_h = d_out * w2;
  d_h = (pre.array() > 0.0).select(d_h, 0.0);
  b.d_w1 = d_h.transpose() * in;
  b.d_b1 = d_h.colwise().sum().transpose();
  b.d_in = d_h * w1;
  return b;
}

Downsampler Downsampler::init(int channels, int stride, Rng rng) {
  Downsampler d;
  d.channels = channels;
  d.stride = stride;
  d.weight.assign(size_t(channels) * channels * stride * stride, 0.0);
  d.bias = Eigen::VectorXd::Zero(channels);
  // start near average pooling so the distillation signal is sane at step 0
  double avg = 1.0 / double(stride * stride);
  for (int oc = 0; oc < channels; ++oc)
    for (int ic = 0; ic < channels; ++ic)
      for (int ky = 0; ky < stride; ++ky)
        for (int kx = 0; kx < stride; ++kx)
          d.w(oc, ic, ky, kx) = (oc == ic ? avg : 0.0) + 0.01 * rng.normal();
  return d;
}

FeatMap Downsampler::forward(const FeatMap& in) const {
  int oh = in.height / stride, ow = in.width / stride;
  FeatMap out(oh, ow, channels);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double* o = out.at(y, x);
      for (int oc = 0; oc < channels; ++oc) o[oc] = bias[oc];
      for (int ky = 0; ky < stride; ++ky)
        for (int kx = 0; kx < stride; ++kx) {
          const double* p = in.at(y * stride + ky, x * stride + kx);
          for (int oc = 0; oc < channels; ++oc) {
            double acc = 0;
            for (int ic = 0; ic < channels; ++ic)
              acc += w(oc, ic, ky, kx) * p[ic];
            o[oc] += acc;
          }
        }
    }
  return out;
}

Downsampler::Backward Downsampler::backward(const FeatMap& in,
                                            const FeatMap& d_out) const {
  Backward b;
  b.d_in = FeatMap(in.height, in.width, channels);
  b.d_weight.assign(weight.size(), 0.0);
  b.d_bias = Eigen::VectorXd::Zero(channels);
  int oh = in.height / stride, ow = in.width / stride;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double* g = d_out.at(y, x);
      for (int oc = 0; oc < channels; ++oc) b.d_bias[oc] += g[oc];
      for (int ky = 0; ky < stride; ++ky)
        for (int kx = 0; kx < stride; ++kx) {
          const double* p = in.at(y * stride + ky, x * stride + kx);
          double* di = b.d_in.at(y * stride + ky, x * stride + kx);
          for (int oc = 0; oc < channels; ++oc) {
            double go = g[oc];
            size_t base = ((size_t(oc) * channels) * stride + ky) * stride + kx;
            for (int ic = 0; ic < channels; ++ic) {
              b.d_weight[base + size_t(ic) * stride * stride] += go * p[ic];
              di[ic] += w(oc, ic, ky, kx) * go;
            }
          }
        }
    }
  return b;
}

// ------------------------------------------------------------ masks

namespace {

std::vector<uint8_t> erode3(const std::vector<uint8_t>& m, int w, int h) {
  std::vector<uint8_t> out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      uint8_t v = 1;
      for (int dy = -1; dy <= 1 && v; ++dy)
        for (int dx = -1; dx <= 1 && v; ++dx) {
          // out-of-bounds neighbours are ignored so the image border is not
          // eroded away (a constant map must survive open+close intact)
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (!m[size_t(yy) * w + xx]) v = 0;
        }
      out[size_t(y) * w + x] = v;
    }
  return out;
}

std::vector<uint8_t> dilate3(const std::vector<uint8_t>& m, int w, int h) {
  std::vector<uint8_t> out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      uint8_t v = 0;
      for (int dy = -1; dy <= 1 && !v; ++dy)
        for (int dx = -1; dx <= 1 && !v; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && m[size_t(yy) * w + xx])
            v = 1;
        }
      out[size_t(y) * w + x] = v;
    }
  return out;
}

}  // namespace

InstanceMasks extract_masks(const std::vector<int64_t>& id_map, int width,
                            int height, int n_groups, int min_area) {
  InstanceMasks out;
  out.width = width;
  out.height = height;
  out.owner.assign(size_t(width) * height, -1);

  std::vector<std::vector<uint8_t>> refined;
  std::vector<int> gids;
  for (int g = 0; g < n_groups; ++g) {
    std::vector<uint8_t> raw(size_t(width) * height, 0);
    int64_t area = 0;
    for (size_t i = 0; i < raw.size(); ++i)
      if (id_map[i] == g) {
        raw[i] = 1;
        ++area;
      }
    if (area == 0) continue;
    // open (speckle removal) then close (hole fill), one 3x3 iteration each
    auto m = dilate3(erode3(raw, width, height), width, height);
    m = erode3(dilate3(m, width, height), width, height);
    refined.push_back(std::move(m));
    gids.push_back(g);
  }

  // resolve overlaps: a pixel prefers its own M_id group, else the lowest
  // id; masks stay inside the labeled region
  std::vector<int> owner(size_t(width) * height, -1);
  for (size_t i = 0; i < owner.size(); ++i) {
    if (id_map[i] == kUnassigned || id_map[i] < 0) continue;
    int preferred = -1, lowest = -1;
    for (int k = 0; k < int(refined.size()); ++k) {
      if (!refined[size_t(k)][i]) continue;
      if (lowest < 0) lowest = k;
      if (gids[size_t(k)] == id_map[i]) preferred = k;
    }
    owner[i] = preferred >= 0 ? preferred : lowest;
  }

  std::vector<int64_t> areas(refined.size(), 0);
  for (int o : owner)
    if (o >= 0) ++areas[size_t(o)];

  std::vector<int> keep(refined.size(), -1);
  for (int k = 0; k < int(refined.size()); ++k) {
    if (areas[size_t(k)] < min_area) continue;
    keep[size_t(k)] = int(out.group_ids.size());
    out.group_ids.push_back(gids[size_t(k)]);
    MaskImage mi;
    mi.width = width;
    mi.height = height;
    mi.m.assign(size_t(width) * height, 0);
    out.masks.push_back(std::move(mi));
  }
  for (size_t i = 0; i < owner.size(); ++i) {
    if (owner[i] < 0) continue;
    int k = keep[size_t(owner[i])];
    if (k < 0) continue;
    out.masks[size_t(k)].m[i] = 1;
    out.owner[i] = k;
  }

  return out;
}

FeatMap instance_feature_map(const Image& image, const InstanceMasks& masks,
                             const Teacher& teacher, int view) {
  FeatMap out(masks.height, masks.width, teacher.dim());
  for (size_t k = 0; k < masks.masks.size(); ++k) {
    const MaskImage& m = masks.masks[k];
    int x0 = masks.width, x1 = -1, y0 = masks.height, y1 = -1;
    for (int y = 0; y < masks.height; ++y)
      for (int x = 0; x < masks.width; ++x)
        if (m.get(y, x)) {
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        }
    if (x1 < x0) continue;
    Image crop;  // bbox crop with off-mask pixels zeroed
    crop.width = x1 - x0 + 1;
    crop.height = y1 - y0 + 1;
    crop.rgb.assign(size_t(crop.width) * crop.height * 3, 0.f);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (m.get(y, x))
          for (int c = 0; c < 3; ++c)
            crop.at(y - y0, x - x0, c) = image.at(y, x, c);
    Eigen::VectorXd e = teacher.embed(crop, view, m);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (m.get(y, x)) {
          double* p = out.at(y, x);
          for (int c = 0; c < int(e.size()); ++c) p[c] = e[c];
        }
  }
  return out;
}

// ------------------------------------------------------------ losses

double pixel_distill_loss(const FeatMap& f_hat, const FeatMap& f_pix) {
  if (f_hat.height != f_pix.height || f_hat.width != f_pix.width ||
      f_hat.channels != f_pix.channels)
    throw std::invalid_argument("pixel_distill_loss: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < f_hat.v.size(); ++i) s += std::abs(f_pix.v[i] - f_hat.v[i]);
  return s / double(f_hat.v.size());
}

namespace {
int64_t masked_pixel_count(const InstanceMasks& masks) {
  int64_t n = 0;
  for (int o : masks.owner)
    if (o >= 0) ++n;
  return n;
}
}  // namespace

double multilevel_loss(const FeatMap& f_hat, const FeatMap& f_pix,
                       const FeatMap& f_full, const FeatMap& f_ins,
                       const InstanceMasks& masks, double gamma) {
  double loss = pixel_distill_loss(f_hat, f_pix);
  if (f_full.height != f_ins.height || f_full.width != f_ins.width ||
      f_full.channels != f_ins.channels)
    throw std::invalid_argument("multilevel_loss: instance shape mismatch");
  int64_t n_masked = masked_pixel_count(masks);
  if (n_masked > 0) {
    double s = 0;
    for (int y = 0; y < f_full.height; ++y)
      for (int x = 0; x < f_full.width; ++x) {
        if (masks.owner[size_t(y) * masks.width + x] < 0) continue;
        const double* a = f_full.at(y, x);
        const double* b = f_ins.at(y, x);
        for (int c = 0; c < f_full.channels; ++c) s += std::abs(b[c] - a[c]);
      }
    loss += gamma * s / double(n_masked * f_full.channels);
  }
  return loss;
}

MultilevelGrads multilevel_loss_backward(const FeatMap& f_hat,
                                         const FeatMap& f_pix,
                                         const FeatMap& f_full,
                                         const FeatMap& f_ins,
                                         const InstanceMasks& masks,
                                         double gamma) {
  MultilevelGrads g;
  g.d_f_hat = FeatMap(f_hat.height, f_hat.width, f_hat.channels);
  g.d_f_full = FeatMap(f_full.height, f_full.width, f_full.channels);
  double inv_n = 1.0 / double(f_hat.v.size());
  for (size_t i = 0; i < f_hat.v.size(); ++i) {
    double d = f_hat.v[i] - f_pix.v[i];
    g.d_f_hat.v[i] = d > 0 ? inv_n : (d < 0 ? -inv_n : 0.0);
  }
  int64_t n_masked = masked_pixel_count(masks);
  if (n_masked > 0) {
    double scale = gamma / double(n_masked * f_full.channels);
    for (int y = 0; y < f_full.height; ++y)
      for (int x = 0; x < f_full.width; ++x) {
        if (masks.owner[size_t(y) * masks.width + x] < 0) continue;
        const double* a = f_full.at(y, x);
        const double* b = f_ins.at(y, x);
        double* d = g.d_f_full.at(y, x);
        for (int c = 0; c < f_full.channels; ++c) {
          double diff = a[c] - b[c];
          d[c] = diff > 0 ? scale : (diff < 0 ? -scale : 0.0);
        }
      }
  }
  return g;
}

}  // namespace gsf

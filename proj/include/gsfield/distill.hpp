#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gsfield/rng.hpp"
#include "gsfield/tensor.hpp"

namespace gsf {

// Dense per-pixel feature buffer, double precision (losses and gradient
// checks run through these).
struct FeatMap {
  int height = 0, width = 0, channels = 0;
  std::vector<double> v;

  FeatMap() = default;
  FeatMap(int h, int w, int c) : height(h), width(w), channels(c), v(size_t(h) * w * c, 0.0) {}
  double* at(int y, int x) { return v.data() + (size_t(y) * width + x) * channels; }
  const double* at(int y, int x) const { return v.data() + (size_t(y) * width + x) * channels; }
};

struct MaskImage {
  int width = 0, height = 0;
  std::vector<uint8_t> m;  // nonzero = set

  bool get(int y, int x) const { return m[size_t(y) * width + x] != 0; }
};

// Teacher abstraction in the CLIP role: a dense per-view feature map, a
// patch encoder, and a query vocabulary. All embeddings unit-L2-normalized.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual int dim() const = 0;
  virtual int map_height() const = 0;
  virtual int map_width() const = 0;
  // Dense feature map for a training view (H_t x W_t x D_t).
  virtual FeatMap pix_features(int view) const = 0;
  // Embedding of a masked image crop; mask is full-resolution.
  virtual Eigen::VectorXd embed(const Image& masked_crop, int view,
                                const MaskImage& mask) const = 0;
  virtual const Eigen::MatrixXd& text_embeddings() const = 0;  // n x D_t
  virtual const std::vector<std::string>& class_names() const = 0;
};

// Ground-truth labels a synthetic teacher reads instead of running a real
// foundation model: per-view true class maps plus clean class embeddings.
struct SyntheticTruth {
  int width = 0, height = 0;
  std::vector<std::vector<int64_t>> view_class_maps;  // per view, H*W, -1 = bg
  Eigen::MatrixXd class_embeddings;                   // n_classes x D_t, unit rows
  std::vector<std::string> names;
};

class SyntheticTeacher : public Teacher {
 public:
  SyntheticTeacher(SyntheticTruth truth, int stride, double sigma_noise,
                   uint64_t seed);

  int dim() const override { return int(truth_.class_embeddings.cols()); }
  int map_height() const override { return truth_.height / stride_; }
  int map_width() const override { return truth_.width / stride_; }
  FeatMap pix_features(int view) const override;
  Eigen::VectorXd embed(const Image& masked_crop, int view,
                        const MaskImage& mask) const override;
  const Eigen::MatrixXd& text_embeddings() const override {
    return truth_.class_embeddings;
  }
  const std::vector<std::string>& class_names() const override {
    return truth_.names;
  }

 private:
  SyntheticTruth truth_;
  int stride_;
  double sigma_noise_;
  uint64_t seed_;
};

// Mounts a real teacher from files: <dir>/pix_%04d.tnsr per view,
// <dir>/vocabulary.tnsr (n x D_t) and <dir>/vocabulary.txt (one name per line).
class FileTeacher : public Teacher {
 public:
  explicit FileTeacher(const std::filesystem::path& dir);
  int dim() const override { return dim_; }
  int map_height() const override { return map_h_; }
  int map_width() const override { return map_w_; }
  FeatMap pix_features(int view) const override;
  Eigen::VectorXd embed(const Image& masked_crop, int view,
                        const MaskImage& mask) const override;
  const Eigen::MatrixXd& text_embeddings() const override { return vocab_; }
  const std::vector<std::string>& class_names() const override { return names_; }

 private:
  std::filesystem::path dir_;
  int dim_ = 0, map_h_ = 0, map_w_ = 0;
  Eigen::MatrixXd vocab_;
  std::vector<std::string> names_;
};

// Dimension-alignment head: affine -> ReLU -> affine, D -> D_t,
// hidden width 2*D_t. Rows of the input are treated as independent samples.
struct ProjectionHead {
  Eigen::MatrixXd w1, w2;  // hidden x D, D_t x hidden
  Eigen::VectorXd b1, b2;

  static ProjectionHead init(int in_dim, int out_dim, Rng rng);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& in) const;  // P x D -> P x D_t

  struct Backward {
    Eigen::MatrixXd d_in;
    Eigen::MatrixXd d_w1, d_w2;
    Eigen::VectorXd d_b1, d_b2;
  };
  Backward backward(const Eigen::MatrixXd& in, const Eigen::MatrixXd& d_out) const;
};

// Resolution alignment: single strided convolution, kernel = stride, mapping
// the full-res projected map to the teacher grid.
struct Downsampler {
  int channels = 0, stride = 0;
  std::vector<double> weight;  // [out_c][in_c][ky][kx]
  Eigen::VectorXd bias;

  static Downsampler init(int channels, int stride, Rng rng);

  double& w(int oc, int ic, int ky, int kx) {
    return weight[((size_t(oc) * channels + ic) * stride + ky) * stride + kx];
  }
  double w(int oc, int ic, int ky, int kx) const {
    return weight[((size_t(oc) * channels + ic) * stride + ky) * stride + kx];
  }

  FeatMap forward(const FeatMap& in) const;
  struct Backward {
    FeatMap d_in;
    std::vector<double> d_weight;
    Eigen::VectorXd d_bias;
  };
  Backward backward(const FeatMap& in, const FeatMap& d_out) const;
};

// Pairwise-disjoint per-instance masks pulled from an ID map, after a 3x3
// morphological open+close pass standing in for CRF refinement.
struct InstanceMasks {
  int width = 0, height = 0;
  std::vector<int> group_ids;
  std::vector<MaskImage> masks;
  // Pixel -> position in group_ids, or -1. Disjointness is by construction.
  std::vector<int> owner;
};

InstanceMasks extract_masks(const std::vector<int64_t>& id_map, int width,
                            int height, int n_groups, int min_area);

// Eq. 6: per mask, crop to bbox, zero off-mask pixels, encode, broadcast.
FeatMap instance_feature_map(const Image& image, const InstanceMasks& masks,
                             const Teacher& teacher, int view);

// Mean absolute difference over all entries; shapes must match.
double pixel_distill_loss(const FeatMap& f_hat, const FeatMap& f_pix);

// L_F = mean|F_pix - F_hat| + gamma * masked-mean|F_ins - F|. The instance
// term averages over pixels covered by some mask (zero when none).
double multilevel_loss(const FeatMap& f_hat, const FeatMap& f_pix,
                       const FeatMap& f_full, const FeatMap& f_ins,
                       const InstanceMasks& masks, double gamma);
struct MultilevelGrads {
  FeatMap d_f_hat;   // gradient w.r.t. the downsampled map
  FeatMap d_f_full;  // gradient w.r.t. the full-res projected map
};
MultilevelGrads multilevel_loss_backward(const FeatMap& f_hat,
                                         const FeatMap& f_pix,
                                         const FeatMap& f_full,
                                         const FeatMap& f_ins,
                                         const InstanceMasks& masks,
                                         double gamma);

}  // namespace gsf

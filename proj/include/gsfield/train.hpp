#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gsfield/cluster.hpp"
#include "gsfield/distill.hpp"
#include "gsfield/rng.hpp"
#include "gsfield/scene.hpp"

namespace gsf {

struct TrainConfig {
  int phase1_iters = 30000;
  int phase2_iters = 7000;
  double lambda_ssim = 0.2;     // Eq. 2 trade-off
  double lambda_s = 0.1;        // smoothing weight
  double lambda_c = 0.05;       // contrastive weight
  double gamma = 0.3;           // instance-level distillation weight
  double tau = 0.1;             // contrastive temperature
  int knn_k = 5;
  double t_frac = 0.001;        // smoothing sample fraction of N
  int sparse_loss_every = 10;   // L_S / L_C cadence
  int recluster_every = 500;
  double lr_gauss = 0.0025;
  double lr_head = 0.0001;
  double pos_sim_threshold = 0.9;
  int feature_dim = 128;
  int head_hidden_mult = 2;     // hidden width = mult * teacher dim
  int contrastive_subsample = 256;
  int mask_min_area = 24;
  uint64_t seed = 0;
  int holdout_view = -1;        // phase-1 PSNR view; -1 = last camera
};

// ---- Adam ----
struct AdamState {
  Eigen::ArrayXd m, v;
  int64_t t = 0;
  int64_t skipped = 0;  // updates dropped because of non-finite gradients

  void ensure(int64_t n) {
    if (m.size() != n) { m = Eigen::ArrayXd::Zero(n); v = Eigen::ArrayXd::Zero(n); }
  }
};

// In-place adaptive-moment step; skips the whole tensor (and counts it) when
// any gradient entry is non-finite.
void adam_step(Eigen::Map<Eigen::ArrayXd> params, const Eigen::ArrayXd& grad,
               AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// ---- Eq. 2 reconstruction ----
double l1_loss(const std::vector<double>& a, const std::vector<double>& b);
// Mean SSIM over pixels/channels, 11x11 Gaussian window (sigma 1.5).
double ssim(const std::vector<double>& img, const std::vector<double>& ref,
            int width, int height, int channels,
            std::vector<double>* d_img = nullptr);
// (1-lambda)*L1 + lambda*(1 - SSIM); fills per-pixel gradient w.r.t. img.
double reconstruction_loss(const std::vector<double>& img,
                           const std::vector<double>& ref, int width,
                           int height, double lambda,
                           std::vector<double>* d_img);

// ---- Eq. 3 smoothing ----
// Mean of (1 - cosine) between T sampled Gaussians and their K neighbors.
// Returns 0 with a warning when N <= K. d_features (N x D) is accumulated.
double smoothing_loss(const Eigen::MatrixXf& features,
                      const std::vector<std::vector<int>>& knn, int sample_count,
                      Rng rng, Eigen::MatrixXd* d_features = nullptr);

// ---- Eq. 8 contrastive ----
struct ContrastiveMember {
  Eigen::VectorXd f;
  // provenance for gradient routing: gaussian index, or pixel id (-1 unused)
  int gaussian = -1;
  int pixel = -1;
};
struct ContrastiveGroup {
  int group_id = -1;
  std::vector<ContrastiveMember> members;   // joint 2D/3D sample, <= 2*cap
  Eigen::MatrixXd positive_means;           // rows unit-norm, >= 1 row
  Eigen::MatrixXd negative_means;           // rows unit-norm; empty -> skipped
};
struct ContrastiveGroups {
  std::vector<ContrastiveGroup> groups;
};

ContrastiveGroups build_contrastive_groups(
    const ClusterResult& cluster, const Scene& scene, const FeatMap& rendered,
    const InstanceMasks& masks, double pos_sim_threshold, int subsample_cap,
    Rng rng);

// Eq. 8 as printed (negatives-only denominator), member sums averaged so
// group size does not dominate. Means are treated as constants; gradients
// flow into member features only.
double contrastive_loss(const ContrastiveGroups& groups, double tau,
                        std::vector<std::vector<Eigen::VectorXd>>* d_members = nullptr);

// ---- training phases ----
struct TrainLogger {
  std::function<void(const std::string&)> sink;  // one line per record
  void log(const std::string& line) const { if (sink) sink(line); }
};

struct Phase1Result {
  double final_loss = 0;
  double holdout_psnr = 0;
};
// Optimizes p, q, s, alpha, c on Eq. 2 over random training views.
Phase1Result phase1_reconstruct(Scene& scene, const TrainConfig& cfg,
                                const TrainLogger& log = {});

struct Phase2Modules {
  ProjectionHead head;
  Downsampler down;
};
struct Phase2Result {
  ClusterResult cluster;
  Phase2Modules modules;
  double last_lf = 0, last_lc = 0, last_ls = 0;
};
// Bootstrapping loop: alternating clustering and multi-level distillation
// plus the joint contrastive and smoothing terms. Geometry and appearance
// stay frozen; only features, head, and downsampler move.
Phase2Result phase2_bootstrap(Scene& scene, const Teacher& teacher,
                              const TrainConfig& cfg,
                              const TrainLogger& log = {});

// Checkpoint = scene container + head/downsampler weights.
void save_checkpoint(const std::filesystem::path& dir, const Scene& scene,
                     const Phase2Modules* modules);
struct Checkpoint {
  Scene scene;
  std::optional<Phase2Modules> modules;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace gsf

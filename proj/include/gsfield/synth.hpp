#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gsfield/distill.hpp"
#include "gsfield/eval.hpp"
#include "gsfield/scene.hpp"

namespace gsf {

struct SynthSpec {
  int n_objects = 4;              // 2..16
  int gaussians_per_object = 150; // 50..500
  double placement_radius = 2.0;
  double object_radius = 0.35;    // RMS blob radius
  int class_dim = 32;             // teacher embedding dim D_t
  int n_train_views = 24;
  int n_test_views = 6;
  int image_size = 128;           // must be divisible by teacher_stride
  int teacher_stride = 1;
  double teacher_sigma = 0.0;
  double separation_factor = 4.0; // min center distance in RMS radii
  bool hard_mode = false;         // halves separation, shares a color pair
  uint64_t seed = 42;
};

struct GroundTruth {
  std::vector<int64_t> gaussian_ids;               // per-Gaussian true object
  std::vector<std::vector<int64_t>> train_id_maps; // per train view, H*W
  std::vector<std::vector<int64_t>> test_id_maps;  // per test view, H*W
  Eigen::MatrixXd class_embeddings;                // n_objects x D_t, unit rows
  std::vector<std::string> class_names;
  std::vector<Aabb> boxes;                         // per object
  std::vector<Camera> test_cameras;
  std::vector<Image> test_images;
};

// Builds the ground-truth scene: one anisotropic Gaussian blob per object
// with a distinct palette color, ring cameras looking at the center, images
// rendered from the true scene, and ID maps rendered with the brute-force
// oracle over one-hot true ids. Throws after 1000 failed placement tries.
void generate(const SynthSpec& spec, Scene& scene, GroundTruth& truth);

struct PerturbConfig {
  double position_sigma_frac = 0.05;  // of object radius
  double color_sigma = 0.05;
  uint64_t seed = 1;
};
// Training start state: jittered positions/colors, opacities reset to 0.5,
// features and ids erased.
Scene perturb_for_training(const Scene& scene, const SynthSpec& spec,
                           const PerturbConfig& cfg);

// Synthetic-teacher input assembled from the ground truth (train views).
SyntheticTruth make_synthetic_truth(const SynthSpec& spec,
                                    const GroundTruth& truth);

// Benchmark directory: manifest.txt (key=value), scene_gt.idsf,
// scene_init.idsf, per-view PPM images, GT tensors.
void save_benchmark(const std::filesystem::path& dir, const SynthSpec& spec,
                    const Scene& gt_scene, const Scene& init_scene,
                    const GroundTruth& truth);
struct Benchmark {
  SynthSpec spec;
  Scene gt_scene;    // cameras + images populated (train)
  Scene init_scene;  // same cameras/images, perturbed parameters
  GroundTruth truth;
};
Benchmark load_benchmark(const std::filesystem::path& dir);

}  // namespace gsf

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "gsfield/scene.hpp"

namespace gsf {

struct ClusterConfig {
  int min_cluster_size = 0;  // 0 -> max(20, 0.2% of N)
  int min_samples = 10;
  int pca_dim = 6;
};

struct ClusterResult {
  std::vector<int64_t> labels;          // per Gaussian, [0,N_g) or kUnassigned
  int n_groups = 0;
  std::vector<std::vector<int>> members;  // per group, ascending indices
  Eigen::MatrixXf mean_feature;           // N_g x D, rows unit-norm
  bool degenerate_features = false;       // PCA warned about rank deficiency
};

// Top-`out_dim` principal components of the mean-centered rows. Rank-deficient
// input pads the missing basis columns with zeros and flags `degenerate`.
struct PcaResult {
  Eigen::MatrixXf reduced;   // N x out_dim
  Eigen::MatrixXd basis;     // D x out_dim, orthonormal columns (or zero)
  Eigen::VectorXd eigenvalues;  // descending, length out_dim
  bool degenerate = false;
};
PcaResult pca_reduce(const Eigen::MatrixXf& features, int out_dim = 6);

// Per-dimension z-score over rows; zero-variance dims map to 0.
Eigen::MatrixXf zscore_columns(const Eigen::MatrixXf& m);

// Full HDBSCAN: core distances -> mutual reachability MST -> single linkage
// -> condensed tree (min_cluster_size) -> excess-of-mass extraction.
// Noise points get kUnassigned. Labels are ordered by first appearance.
struct CondensedNode {
  int parent = -1;          // condensed cluster id
  int child = -1;           // < N: point; >= N: condensed cluster id offset
  double lambda = 0;        // 1 / mutual-reachability distance at departure
  int size = 1;
};
struct HdbscanResult {
  std::vector<int64_t> labels;
  int n_clusters = 0;
  // Introspection for the oracle cross-check: stability per selected-level
  // candidate cluster, keyed by its sorted member set at birth.
  std::vector<std::vector<int>> candidate_members;
  std::vector<double> candidate_stability;
};
HdbscanResult hdbscan(const Eigen::MatrixXd& points, int min_cluster_size,
                      int min_samples);

// Exact Euclidean K-NN over positions via a k-d tree; self excluded, ties by
// lower index. Output is N x K row-major.
std::vector<std::vector<int>> knn_graph(const Eigen::MatrixXf& positions,
                                        int k = 5);

// Union-space pipeline: z-score each subspace (position, color, PCA-reduced
// feature), concatenate to R^{3+3+6}, run HDBSCAN, relabel by descending
// member count, and write labels into the scene's IdsField.
ClusterResult cluster_scene(Scene& scene, const ClusterConfig& cfg);

}  // namespace gsf

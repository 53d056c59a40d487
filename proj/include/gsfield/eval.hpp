#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "gsfield/cluster.hpp"
#include "gsfield/distill.hpp"
#include "gsfield/scene.hpp"

namespace gsf {

struct Aabb {
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Zero();
};

// Intersection volume over union volume for axis-aligned boxes.
double iou3d(const Aabb& a, const Aabb& b);

// Componentwise min/max over member centers expanded by 3*max(scale) each,
// after dropping members beyond 3 median-absolute-deviations from the group
// centroid. Empty group -> nullopt.
std::optional<Aabb> group_aabb(const ClusterResult& cluster, const Scene& scene,
                               int group_id);

struct QueryResult {
  bool detected = false;
  int group_id = -1;
  std::vector<double> scores;        // per group relevancy
  std::optional<Aabb> box;
};

// Relevancy = cosine between the query embedding and each group's mean
// feature projected through the head into teacher space; winner = argmax
// (lower index on ties).
QueryResult query_text(const Scene& scene, const ClusterResult& cluster,
                       const ProjectionHead& head,
                       const Eigen::VectorXd& text_embedding);

// Returns the group at (u,v) in the rendered ID map; unlabeled pixels snap to
// the nearest labeled pixel within 5 px, else no-detection. Out-of-bounds
// coordinates are a hard error.
QueryResult click_select(const std::vector<int64_t>& id_map, int width,
                         int height, int u, int v);

// Mean over queries of |pred n gt| / |pred u gt|; both-empty counts as 1.
double seg_miou(const std::vector<std::vector<uint8_t>>& pred_masks,
                const std::vector<std::vector<uint8_t>>& gt_masks);

// Fraction of ground-truth boxes whose predicted box reaches the threshold.
// Queries without a prediction count as misses.
double detection_recall(const std::vector<std::optional<Aabb>>& preds,
                        const std::vector<Aabb>& gts, double threshold);

// Fraction of ground-truth-corresponding pixel pairs across two views that
// receive the same rendered instance id (unassigned never matches).
double cross_view_consistency(const std::vector<int64_t>& gt_a,
                              const std::vector<int64_t>& pred_a,
                              const std::vector<int64_t>& gt_b,
                              const std::vector<int64_t>& pred_b);

}  // namespace gsf

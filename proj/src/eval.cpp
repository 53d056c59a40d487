#include "gsfield/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace gsf {

double iou3d(const Aabb& a, const Aabb& b) {
  double inter = 1, va = 1, vb = 1;
  for (int k = 0; k < 3; ++k) {
    double lo = std::max(a.min[k], b.min[k]);
    double hi = std::min(a.max[k], b.max[k]);
    inter *= std::max(0.0, hi - lo);
    va *= std::max(0.0, a.max[k] - a.min[k]);
    vb *= std::max(0.0, b.max[k] - b.min[k]);
  }
  double uni = va + vb - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

std::optional<Aabb> group_aabb(const ClusterResult& cluster, const Scene& scene,
                               int group_id) {
  if (group_id < 0 || group_id >= cluster.n_groups) return std::nullopt;
  const auto& memb = cluster.members[size_t(group_id)];
  if (memb.empty()) return std::nullopt;

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (int i : memb)
    centroid += scene.gaussians[size_t(i)].position.cast<double>();
  centroid /= double(memb.size());

  std::vector<double> dist(memb.size());
  for (size_t k = 0; k < memb.size(); ++k)
    dist[k] = (scene.gaussians[size_t(memb[k])].position.cast<double>() -
               centroid).norm();
  std::vector<double> sorted = dist;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2,
                   sorted.end());
  double med = sorted[sorted.size() / 2];
  for (auto& v : sorted) v = std::abs(v - med);
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2,
                   sorted.end());
  double mad = sorted[sorted.size() / 2];

  Aabb box;
  bool first = true;
  for (size_t k = 0; k < memb.size(); ++k) {
    if (mad > 0 && dist[k] - med > 3.0 * mad) continue;  // outlier guard
    const Gaussian& g = scene.gaussians[size_t(memb[k])];
    Eigen::Vector3d p = g.position.cast<double>();
    double pad = 3.0 * double(g.scale().maxCoeff());
    Eigen::Vector3d lo = p.array() - pad, hi = p.array() + pad;
    if (first) {
      box.min = lo;
      box.max = hi;
      first = false;
    } else {
      box.min = box.min.cwiseMin(lo);
      box.max = box.max.cwiseMax(hi);
    }
  }
  if (first) return std::nullopt;
  return box;
}

QueryResult query_text(const Scene& scene, const ClusterResult& cluster,
                       const ProjectionHead& head,
                       const Eigen::VectorXd& text_embedding) {
  QueryResult r;
  if (cluster.n_groups == 0) return r;
  Eigen::MatrixXd means = cluster.mean_feature.cast<double>();
  Eigen::MatrixXd proj = head.forward(means);  // N_g x D_t
  double qn = text_embedding.norm();
  r.scores.resize(size_t(cluster.n_groups), 0.0);
  for (int g = 0; g < cluster.n_groups; ++g) {
    double pn = proj.row(g).norm();
    if (pn > 1e-12 && qn > 1e-12)
      r.scores[size_t(g)] = proj.row(g).dot(text_embedding) / (pn * qn);
  }
  r.group_id = 0;
  for (int g = 1; g < cluster.n_groups; ++g)
    if (r.scores[size_t(g)] > r.scores[size_t(r.group_id)]) r.group_id = g;
  r.detected = true;
  r.box = group_aabb(cluster, scene, r.group_id);
  return r;
}

QueryResult click_select(const std::vector<int64_t>& id_map, int width,
                         int height, int u, int v) {
  if (u < 0 || u >= width || v < 0 || v >= height)
    throw std::out_of_range("click_select: pixel out of bounds");
  QueryResult r;
  constexpr int kSnapRadius = 5;
  double best_d2 = double(kSnapRadius) * kSnapRadius + 0.5;
  int64_t best = -1;
  for (int dy = -kSnapRadius; dy <= kSnapRadius; ++dy)
    for (int dx = -kSnapRadius; dx <= kSnapRadius; ++dx) {
      int x = u + dx, y = v + dy;
      if (x < 0 || x >= width || y < 0 || y >= height) continue;
      int64_t id = id_map[size_t(y) * width + x];
      if (id == kUnassigned || id < 0) continue;
      double d2 = double(dx) * dx + double(dy) * dy;
      if (d2 < best_d2 || (d2 == best_d2 && id < best)) {
        best_d2 = d2;
        best = id;
      }
    }
  if (best < 0) return r;
  r.detected = true;
  r.group_id = int(best);
  return r;
}

double seg_miou(const std::vector<std::vector<uint8_t>>& pred_masks,
                const std::vector<std::vector<uint8_t>>& gt_masks) {
  if (pred_masks.size() != gt_masks.size())
    throw std::invalid_argument("seg_miou: query count mismatch");
  if (pred_masks.empty()) return 1.0;
  double total = 0;
  for (size_t q = 0; q < pred_masks.size(); ++q) {
    if (pred_masks[q].size() != gt_masks[q].size())
      throw std::invalid_argument("seg_miou: resolution mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred_masks[q].size(); ++i) {
      bool p = pred_masks[q][i] != 0, g = gt_masks[q][i] != 0;
      inter += p && g;
      uni += p || g;
    }
    total += uni == 0 ? 1.0 : double(inter) / double(uni);
  }
  return total / double(pred_masks.size());
}

double detection_recall(const std::vector<std::optional<Aabb>>& preds,
                        const std::vector<Aabb>& gts, double threshold) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("detection_recall: query count mismatch");
  if (gts.empty()) return 1.0;
  int hits = 0;
  for (size_t q = 0; q < gts.size(); ++q)
    if (preds[q] && iou3d(*preds[q], gts[q]) >= threshold) ++hits;
  return double(hits) / double(gts.size());
}

double cross_view_consistency(const std::vector<int64_t>& gt_a,
                              const std::vector<int64_t>& pred_a,
                              const std::vector<int64_t>& gt_b,
                              const std::vector<int64_t>& pred_b) {
  if (gt_a.size() != pred_a.size() || gt_b.size() != pred_b.size())
    throw std::invalid_argument("cross_view_consistency: size mismatch");
  // per-view contingency tables: for each true object c, how many of its
  // pixels carry each predicted id. A GT-corresponding pair is (pixel of c
  // in view a, pixel of c in view b); it matches when both predicted ids are
  // equal and assigned.
  auto histogram = [](const std::vector<int64_t>& gt,
                      const std::vector<int64_t>& pred) {
    std::map<int64_t, std::map<int64_t, int64_t>> h;
    std::map<int64_t, int64_t> n;
    for (size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] < 0 || gt[i] == kUnassigned) continue;
      ++n[gt[i]];
      if (pred[i] != kUnassigned && pred[i] >= 0) ++h[gt[i]][pred[i]];
    }
    return std::pair(h, n);
  };
  auto [ha, na] = histogram(gt_a, pred_a);
  auto [hb, nb] = histogram(gt_b, pred_b);

  long double matched = 0, pairs = 0;
  for (const auto& [c, count_a] : na) {
    auto itb = nb.find(c);
    if (itb == nb.end()) continue;
    pairs += (long double)(count_a) * itb->second;
    auto ia = ha.find(c);
    auto ib = hb.find(c);
    if (ia == ha.end() || ib == hb.end()) continue;
    for (const auto& [g, ca] : ia->second) {
      auto jg = ib->second.find(g);
      if (jg != ib->second.end()) matched += (long double)(ca) * jg->second;
    }
  }
  if (pairs == 0) return 1.0;
  return double(matched / pairs);
}

}  // namespace gsf

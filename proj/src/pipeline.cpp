#include "gsfield/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "gsfield/rasterizer.hpp"

namespace gsf {

ClusterResult cluster_from_labels(const Scene& scene) {
  ClusterResult r;
  int64_t ng = 0;
  for (const auto& f : scene.idsf)
    if (f.d != kUnassigned && f.d >= 0) ng = std::max(ng, f.d + 1);
  r.n_groups = int(ng);
  r.labels.resize(scene.size(), kUnassigned);
  r.members.resize(size_t(ng));
  for (size_t i = 0; i < scene.idsf.size(); ++i) {
    r.labels[i] = scene.idsf[i].d;
    if (r.labels[i] != kUnassigned && r.labels[i] >= 0)
      r.members[size_t(r.labels[i])].push_back(int(i));
  }
  int d = scene.feature_dim();
  r.mean_feature = Eigen::MatrixXf::Zero(int(ng), d);
  for (int g = 0; g < int(ng); ++g) {
    if (r.members[size_t(g)].empty()) continue;
    Eigen::VectorXf acc = Eigen::VectorXf::Zero(d);
    for (int i : r.members[size_t(g)]) acc += scene.idsf[size_t(i)].f;
    acc /= float(r.members[size_t(g)].size());
    float n = acc.norm();
    r.mean_feature.row(g) = (n > 1e-12f ? acc / n : acc).transpose();
  }
  return r;
}

namespace {

double view_psnr(const Scene& scene, const Camera& cam, const Image& ref) {
  RenderRequest req;
  RenderOutput out = render(scene, cam, req);
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

BenchmarkMetrics evaluate_benchmark(const Scene& scene,
                                    const Phase2Modules& modules,
                                    const Benchmark& bench) {
  BenchmarkMetrics m;
  ClusterResult cluster = cluster_from_labels(scene);
  m.n_groups = cluster.n_groups;

  // per-object cluster purity: each object is claimed by the cluster holding
  // the plurality of its Gaussians; purity is the fraction of that cluster's
  // members actually belonging to the object. An unclaimed object scores 0.
  m.min_purity = 1.0;
  for (int o = 0; o < bench.spec.n_objects; ++o) {
    std::map<int64_t, int> counts;
    for (size_t i = 0; i < bench.truth.gaussian_ids.size(); ++i)
      if (bench.truth.gaussian_ids[i] == o && cluster.labels[i] != kUnassigned)
        ++counts[cluster.labels[i]];
    int64_t claimed = -1;
    int best = 0;
    for (const auto& [label, c] : counts)
      if (c > best) { best = c; claimed = label; }
    if (claimed < 0) { m.min_purity = 0.0; continue; }
    int cluster_size = 0;
    for (size_t i = 0; i < bench.truth.gaussian_ids.size(); ++i)
      if (cluster.labels[i] == claimed) ++cluster_size;
    m.min_purity = std::min(
        m.min_purity, cluster_size ? double(best) / cluster_size : 0.0);
  }

  double psnr_acc = 0;
  for (size_t v = 0; v < bench.truth.test_cameras.size(); ++v)
    psnr_acc += view_psnr(scene, bench.truth.test_cameras[v],
                          bench.truth.test_images[v]);
  m.test_psnr = bench.truth.test_cameras.empty()
                    ? 0.0
                    : psnr_acc / double(bench.truth.test_cameras.size());

  // text queries, one per class
  int nc = int(bench.truth.class_embeddings.rows());
  std::vector<int> winner(size_t(nc), -1);
  std::vector<std::optional<Aabb>> pred_boxes(static_cast<size_t>(nc));
  for (int c = 0; c < nc; ++c) {
    QueryResult q = query_text(scene, cluster, modules.head,
                               bench.truth.class_embeddings.row(c).transpose());
    if (!q.detected) continue;
    winner[size_t(c)] = q.group_id;
    pred_boxes[size_t(c)] = q.box;
  }

  // 3D metrics
  double iou_acc = 0;
  for (int c = 0; c < nc; ++c)
    if (pred_boxes[size_t(c)])
      iou_acc += iou3d(*pred_boxes[size_t(c)], bench.truth.boxes[size_t(c)]);
  m.box_miou = nc ? iou_acc / nc : 0.0;
  m.recall25 = detection_recall(pred_boxes, bench.truth.boxes, 0.25);
  m.recall50 = detection_recall(pred_boxes, bench.truth.boxes, 0.5);

  // novel-view segmentation + cross-view consistency
  std::vector<std::vector<int64_t>> pred_ids;
  RenderRequest req;
  req.color = false;
  req.id = true;
  req.n_groups = std::max(cluster.n_groups, 1);
  for (const Camera& cam : bench.truth.test_cameras)
    pred_ids.push_back(render(scene, cam, req).id_map);

  std::vector<std::vector<uint8_t>> pred_masks, gt_masks;
  for (size_t v = 0; v < pred_ids.size(); ++v)
    for (int c = 0; c < nc; ++c) {
      std::vector<uint8_t> pm(pred_ids[v].size()), gm(pred_ids[v].size());
      for (size_t i = 0; i < pred_ids[v].size(); ++i) {
        pm[i] = winner[size_t(c)] >= 0 && pred_ids[v][i] == winner[size_t(c)];
        gm[i] = bench.truth.test_id_maps[v][i] == c;
      }
      pred_masks.push_back(std::move(pm));
      gt_masks.push_back(std::move(gm));
    }
  m.seg_miou = pred_masks.empty() ? 0.0 : seg_miou(pred_masks, gt_masks);

  double cons_acc = 0;
  int cons_n = 0;
  for (size_t a = 0; a < pred_ids.size(); ++a)
    for (size_t b = a + 1; b < pred_ids.size(); ++b) {
      cons_acc += cross_view_consistency(bench.truth.test_id_maps[a],
                                         pred_ids[a],
                                         bench.truth.test_id_maps[b],
                                         pred_ids[b]);
      ++cons_n;
    }
  m.consistency = cons_n ? cons_acc / cons_n : 1.0;
  return m;
}

std::string metrics_text(const BenchmarkMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "n_groups=%d\n"
                "test_psnr=%.6f\n"
                "min_purity=%.6f\n"
                "seg_miou=%.6f\n"
                "box_miou=%.6f\n"
                "recall25=%.6f\n"
                "recall50=%.6f\n"
                "consistency=%.6f\n",
                m.n_groups, m.test_psnr, m.min_purity, m.seg_miou, m.box_miou,
                m.recall25, m.recall50, m.consistency);
  return buf;
}

}  // namespace gsf

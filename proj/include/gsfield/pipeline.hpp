#pragma once

#include <string>

#include "gsfield/cluster.hpp"
#include "gsfield/eval.hpp"
#include "gsfield/synth.hpp"
#include "gsfield/train.hpp"

namespace gsf {

// Rebuilds a ClusterResult from the labels stored in the scene's IdsField
// (mean features recomputed from the current feature vectors).
ClusterResult cluster_from_labels(const Scene& scene);

struct BenchmarkMetrics {
  int n_groups = 0;
  double test_psnr = 0;
  double min_purity = 0;   // worst per-object cluster purity
  double seg_miou = 0;     // class queries x test views
  double box_miou = 0;     // mean 3D IoU over class queries
  double recall25 = 0;
  double recall50 = 0;
  double consistency = 0;  // cross-view ID consistency over test-view pairs
};

// Full metric sweep of a trained scene against its benchmark ground truth.
BenchmarkMetrics evaluate_benchmark(const Scene& scene,
                                    const Phase2Modules& modules,
                                    const Benchmark& bench);

// Fixed-format key=value report (stable across runs for determinism checks).
std::string metrics_text(const BenchmarkMetrics& m);

}  // namespace gsf

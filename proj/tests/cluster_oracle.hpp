#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

namespace testutil {

// ---- brute-force HDBSCAN oracle -----------------------------------------
// Independent route: O(N^2) mutual-reachability matrix, naive agglomerative
// single linkage (no MST), then EOM stabilities straight from the defining
// sums. Only usable for tiny N.

struct OracleCandidate {
  std::vector<int> members;  // sorted
  double stability = 0;
};

inline std::vector<OracleCandidate> oracle_condensed(const Eigen::MatrixXd& pts,
                                              int mcs, int ms) {
  const int n = int(pts.rows());
  mcs = std::max(2, mcs);
  ms = std::clamp(ms, 1, n);

  Eigen::MatrixXd dist(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) dist(i, j) = (pts.row(i) - pts.row(j)).norm();
  std::vector<double> core(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) row[size_t(j)] = dist(i, j);
    std::sort(row.begin(), row.end());
    core[size_t(i)] = row[size_t(ms - 1)];
  }
  Eigen::MatrixXd mreach(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      mreach(i, j) = std::max({core[size_t(i)], core[size_t(j)], dist(i, j)});

  // naive agglomeration: repeatedly merge the closest pair of live clusters
  struct Node {
    std::vector<int> pts;
    int left = -1, right = -1;
    double height = 0;
  };
  std::vector<Node> nodes(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) nodes[size_t(i)].pts = {i};
  std::vector<int> live(static_cast<size_t>(n));
  std::iota(live.begin(), live.end(), 0);
  while (live.size() > 1) {
    // edges carry the total order (weight, min endpoint, max endpoint); the
    // merge sequence is then unique even when mutual-reachability values tie
    double best = std::numeric_limits<double>::infinity();
    int blo = -1, bhi = -1;
    size_t bi = 0, bj = 1;
    for (size_t a = 0; a < live.size(); ++a)
      for (size_t b = a + 1; b < live.size(); ++b) {
        double d = std::numeric_limits<double>::infinity();
        int dlo = -1, dhi = -1;
        for (int p : nodes[size_t(live[a])].pts)
          for (int q : nodes[size_t(live[b])].pts) {
            double m = mreach(p, q);
            auto [lo, hi] = std::minmax(p, q);
            if (m < d || (m == d && std::tie(lo, hi) < std::tie(dlo, dhi))) {
              d = m;
              dlo = lo;
              dhi = hi;
            }
          }
        if (d < best ||
            (d == best && std::tie(dlo, dhi) < std::tie(blo, bhi))) {
          best = d;
          blo = dlo;
          bhi = dhi;
          bi = a;
          bj = b;
        }
      }
    Node merged;
    merged.left = live[bi];
    merged.right = live[bj];
    merged.height = best;
    merged.pts = nodes[size_t(live[bi])].pts;
    merged.pts.insert(merged.pts.end(), nodes[size_t(live[bj])].pts.begin(),
                      nodes[size_t(live[bj])].pts.end());
    std::sort(merged.pts.begin(), merged.pts.end());
    nodes.push_back(merged);
    live.erase(live.begin() + long(bj));
    live.erase(live.begin() + long(bi));
    live.push_back(int(nodes.size()) - 1);
  }
  int root = live[0];

  auto lam = [](double d) { return d <= 1e-12 ? 1e12 : 1.0 / d; };

  // condensed clusters by definition
  std::vector<OracleCandidate> out;
  struct Pending {
    int node;
    int cand;  // index into out
  };
  std::vector<std::vector<std::pair<double, int>>> contribs;
  std::vector<double> births;
  out.push_back({nodes[size_t(root)].pts, 0});
  contribs.push_back({});
  births.push_back(0.0);
  std::vector<Pending> stack{{root, 0}};
  while (!stack.empty()) {
    auto [node, cand] = stack.back();
    stack.pop_back();
    if (nodes[size_t(node)].left < 0) continue;  // leaf
    int l = nodes[size_t(node)].left, r = nodes[size_t(node)].right;
    double lv = lam(nodes[size_t(node)].height);
    int sl = int(nodes[size_t(l)].pts.size());
    int sr = int(nodes[size_t(r)].pts.size());
    bool lb = sl >= mcs, rb = sr >= mcs;
    if (lb && rb) {
      contribs[size_t(cand)].push_back({lv, sl});
      contribs[size_t(cand)].push_back({lv, sr});
      for (int child : {l, r}) {
        out.push_back({nodes[size_t(child)].pts, 0});
        contribs.push_back({});
        births.push_back(lv);
        stack.push_back({child, int(out.size()) - 1});
      }
    } else if (!lb && !rb) {
      for (int p : nodes[size_t(node)].pts) {
        (void)p;
        contribs[size_t(cand)].push_back({lv, 1});
      }
    } else {
      int big = lb ? l : r;
      int small = lb ? r : l;
      for (size_t k = 0; k < nodes[size_t(small)].pts.size(); ++k)
        contribs[size_t(cand)].push_back({lv, 1});
      stack.push_back({big, cand});
    }
  }
  for (size_t c = 0; c < out.size(); ++c) {
    auto& list = contribs[c];
    std::sort(list.begin(), list.end());
    double s = 0;
    for (auto& [lv, sz] : list) s += (lv - births[c]) * sz;
    out[c].stability = s;
  }
  return out;
}

// adjusted Rand index over two labelings (kUnassigned is its own class)
inline double ari(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  std::map<std::pair<int64_t, int64_t>, long> joint;
  std::map<int64_t, long> ca, cb;
  for (size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++ca[a[i]];
    ++cb[b[i]];
  }
  auto c2 = [](long m) { return double(m) * (m - 1) / 2.0; };
  double sum_joint = 0, sum_a = 0, sum_b = 0;
  for (auto& [k, v] : joint) sum_joint += c2(v);
  for (auto& [k, v] : ca) sum_a += c2(v);
  for (auto& [k, v] : cb) sum_b += c2(v);
  double total = c2(long(a.size()));
  double expected = sum_a * sum_b / total;
  double max_idx = 0.5 * (sum_a + sum_b);
  if (max_idx == expected) return 1.0;
  return (sum_joint - expected) / (max_idx - expected);
}


}  // namespace testutil

#include "gsfield/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

namespace gsf {

Eigen::MatrixXf zscore_columns(const Eigen::MatrixXf& m) {
  Eigen::MatrixXf out = m;
  const auto n = double(m.rows());
  for (int c = 0; c < m.cols(); ++c) {
    double mean = m.col(c).cast<double>().mean();
    double var = (m.col(c).cast<double>().array() - mean).square().sum() / n;
    if (var <= 1e-24) {
      out.col(c).setZero();  // zero-variance dims carry no signal
    } else {
      double inv_sd = 1.0 / std::sqrt(var);
      out.col(c) = ((m.col(c).cast<double>().array() - mean) * inv_sd).cast<float>();
    }
  }
  return out;
}

PcaResult pca_reduce(const Eigen::MatrixXf& features, int out_dim) {
  const int n = int(features.rows());
  const int d = int(features.cols());
  PcaResult res;
  res.basis = Eigen::MatrixXd::Zero(d, out_dim);
  res.eigenvalues = Eigen::VectorXd::Zero(out_dim);

  Eigen::MatrixXd x = features.cast<double>();
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / std::max(1, n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto& evals = eig.eigenvalues();  // ascending
  double ev_max = std::max(0.0, evals(d - 1));
  double tol = std::max(1e-12, 1e-10 * ev_max);

  for (int k = 0; k < out_dim; ++k) {
    int src = d - 1 - k;
    if (src < 0 || evals(src) < tol) {
      res.degenerate = true;  // rank-deficient: pad with zeros
      continue;
    }
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    // deterministic sign: largest-magnitude component positive
    int arg = 0;
    for (int i = 1; i < d; ++i)
      if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
    if (v[arg] < 0) v = -v;
    res.basis.col(k) = v;
    res.eigenvalues[k] = evals(src);
  }
  res.reduced = (x * res.basis).cast<float>();
  return res;
}

// ---------------------------------------------------------------- k-d tree

namespace {

struct KdNode {
  int point = -1;
  int dim = 0;
  int left = -1, right = -1;
};

class KdTree {
 public:
  explicit KdTree(const Eigen::MatrixXf& pts) : pts_(pts) {
    idx_.resize(pts.rows());
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(pts.rows());
    root_ = build(0, int(pts.rows()));
  }

  // k nearest by (squared distance, index), excluding `self`.
  void query(const Eigen::Vector3f& q, int k, int self,
             std::vector<int>& out) const {
    using Cand = std::pair<double, int>;
    std::priority_queue<Cand> heap;  // worst candidate on top
    search(root_, q, k, self, heap);
    out.resize(heap.size());
    for (int i = int(heap.size()) - 1; i >= 0; --i) {
      out[size_t(i)] = heap.top().second;
      heap.pop();
    }
  }

 private:
  int build(int lo, int hi) {
    if (lo >= hi) return -1;
    // split on the widest extent
    Eigen::Vector3f mn = pts_.row(idx_[size_t(lo)]).head<3>();
    Eigen::Vector3f mx = mn;
    for (int i = lo + 1; i < hi; ++i) {
      Eigen::Vector3f p = pts_.row(idx_[size_t(i)]).head<3>();
      mn = mn.cwiseMin(p);
      mx = mx.cwiseMax(p);
    }
    int dim = 0;
    (mx - mn).maxCoeff(&dim);
    int mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](int a, int b) {
                       float pa = pts_(a, dim), pb = pts_(b, dim);
                       return pa < pb || (pa == pb && a < b);
                     });
    KdNode node;
    node.point = idx_[size_t(mid)];
    node.dim = dim;
    int id = int(nodes_.size());
    nodes_.push_back(node);
    nodes_[size_t(id)].left = build(lo, mid);
    nodes_[size_t(id)].right = build(mid + 1, hi);
    return id;
  }

  void search(int nid, const Eigen::Vector3f& q, int k, int self,
              std::priority_queue<std::pair<double, int>>& heap) const {
    if (nid < 0) return;
    const KdNode& node = nodes_[size_t(nid)];
    if (node.point != self) {
      Eigen::Vector3d diff =
          (pts_.row(node.point).head<3>().transpose() - q).cast<double>();
      double d2 = diff.squaredNorm();
      std::pair<double, int> cand{d2, node.point};
      if (int(heap.size()) < k) {
        heap.push(cand);
      } else if (cand < heap.top()) {
        heap.pop();
        heap.push(cand);
      }
    }
    double delta = double(q[node.dim]) - double(pts_(node.point, node.dim));
    int near = delta < 0 ? node.left : node.right;
    int far = delta < 0 ? node.right : node.left;
    search(near, q, k, self, heap);
    // equal plane distance can still hide a lower-index tie, so only a
    // strictly greater plane distance prunes
    if (int(heap.size()) < k || delta * delta <= heap.top().first)
      search(far, q, k, self, heap);
  }

  const Eigen::MatrixXf& pts_;
  std::vector<int> idx_;
  std::vector<KdNode> nodes_;
  int root_ = -1;
};

}  // namespace

std::vector<std::vector<int>> knn_graph(const Eigen::MatrixXf& positions, int k) {
  const int n = int(positions.rows());
  KdTree tree(positions);
  std::vector<std::vector<int>> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    tree.query(positions.row(i).head<3>(), k, i, out[size_t(i)]);
  return out;
}

// ---------------------------------------------------------------- HDBSCAN

namespace {

constexpr double kLambdaMax = 1e12;

double lambda_of(double dist) {
  if (dist <= 1.0 / kLambdaMax) return kLambdaMax;
  return 1.0 / dist;
}

struct MstEdge {
  int a, b;
  double w;
};

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(size_t(n)) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[size_t(x)] != x) {
      parent[size_t(x)] = parent[size_t(parent[size_t(x)])];
      x = parent[size_t(x)];
    }
    return x;
  }
};

}  // namespace

HdbscanResult hdbscan(const Eigen::MatrixXd& points, int min_cluster_size,
                      int min_samples) {
  const int n = int(points.rows());
  HdbscanResult res;
  res.labels.assign(size_t(n), kUnassigned);
  if (n == 0) return res;
  if (n == 1) {
    res.labels[0] = kUnassigned;
    return res;
  }
  min_cluster_size = std::max(2, min_cluster_size);
  min_samples = std::clamp(min_samples, 1, n);

  // core distance: distance to the min_samples-th neighbor, self included
  std::vector<double> core(static_cast<size_t>(n));
  {
    std::vector<double> row(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) row[size_t(j)] = (points.row(i) - points.row(j)).norm();
      std::nth_element(row.begin(), row.begin() + (min_samples - 1), row.end());
      core[size_t(i)] = row[size_t(min_samples - 1)];
    }
  }

  // Prim MST over the implicit mutual-reachability graph
  std::vector<MstEdge> edges;
  edges.reserve(size_t(n - 1));
  {
    std::vector<double> best(size_t(n), std::numeric_limits<double>::infinity());
    std::vector<int> from(size_t(n), -1);
    std::vector<char> used(size_t(n), 0);
    // edges are totally ordered by (weight, min endpoint, max endpoint) so the
    // MST — and with it the dendrogram — is unique even under distance ties
    auto edge_less = [](double wa, int a0, int a1, double wb, int b0, int b1) {
      if (wa != wb) return wa < wb;
      auto [alo, ahi] = std::minmax(a0, a1);
      auto [blo, bhi] = std::minmax(b0, b1);
      return std::tie(alo, ahi) < std::tie(blo, bhi);
    };
    used[0] = 1;
    int cur = 0;
    for (int step = 1; step < n; ++step) {
      for (int j = 0; j < n; ++j) {
        if (used[size_t(j)]) continue;
        double d = (points.row(cur) - points.row(j)).norm();
        double mr = std::max({core[size_t(cur)], core[size_t(j)], d});
        if (from[size_t(j)] < 0 ||
            edge_less(mr, cur, j, best[size_t(j)], from[size_t(j)], j)) {
          best[size_t(j)] = mr;
          from[size_t(j)] = cur;
        }
      }
      int nxt = -1;
      for (int j = 0; j < n; ++j) {
        if (used[size_t(j)]) continue;
        if (nxt < 0 || edge_less(best[size_t(j)], from[size_t(j)], j,
                                 best[size_t(nxt)], from[size_t(nxt)], nxt))
          nxt = j;
      }
      edges.push_back({from[size_t(nxt)], nxt, best[size_t(nxt)]});
      used[size_t(nxt)] = 1;
      cur = nxt;
    }
  }
  std::sort(edges.begin(), edges.end(), [](const MstEdge& x, const MstEdge& y) {
    if (x.w != y.w) return x.w < y.w;
    auto xa = std::minmax(x.a, x.b), ya = std::minmax(y.a, y.b);
    return xa < ya;
  });

  // single-linkage hierarchy (scipy-style labeling: internal nodes from n up)
  int n_nodes = 2 * n - 1;
  std::vector<int> left(size_t(n_nodes), -1), right(size_t(n_nodes), -1);
  std::vector<double> height(size_t(n_nodes), 0.0);
  std::vector<int> size(size_t(n_nodes), 1);
  {
    DisjointSet ds(n_nodes);
    std::vector<int> rep(static_cast<size_t>(n_nodes));
    std::iota(rep.begin(), rep.end(), 0);
    int next = n;
    for (const auto& e : edges) {
      int ra = rep[size_t(ds.find(e.a))];
      int rb = rep[size_t(ds.find(e.b))];
      left[size_t(next)] = ra;
      right[size_t(next)] = rb;
      height[size_t(next)] = e.w;
      size[size_t(next)] = size[size_t(ra)] + size[size_t(rb)];
      int fa = ds.find(e.a), fb = ds.find(e.b);
      ds.parent[size_t(fa)] = fb;
      rep[size_t(ds.find(e.b))] = next;
      ++next;
    }
  }
  int root = n_nodes - 1;

  // condensed tree: clusters are relabeled 0.., points keep their ids
  std::vector<CondensedNode> rows;
  std::vector<double> birth{0.0};  // per condensed cluster
  int next_cluster = 1;

  // collect leaves of a linkage subtree
  auto leaves_of = [&](int node) {
    std::vector<int> out;
    std::vector<int> stack{node};
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      if (v < n) {
        out.push_back(v);
      } else {
        stack.push_back(left[size_t(v)]);
        stack.push_back(right[size_t(v)]);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  };

  {
    // (linkage node, condensed cluster owning it)
    std::vector<std::pair<int, int>> stack{{root, 0}};
    while (!stack.empty()) {
      auto [node, cluster] = stack.back();
      stack.pop_back();
      if (node < n) {
        // singleton falling out of its cluster at its merge height is
        // handled by the parent split below; a bare leaf root cannot occur
        continue;
      }
      int l = left[size_t(node)], r = right[size_t(node)];
      double lam = lambda_of(height[size_t(node)]);
      int sl = size[size_t(l)], sr = size[size_t(r)];
      bool l_big = sl >= min_cluster_size, r_big = sr >= min_cluster_size;
      if (l_big && r_big) {
        // true split: two new condensed clusters
        int cl = next_cluster++;
        rows.push_back({cluster, n + cl, lam, sl});
        birth.push_back(lam);
        int cr = next_cluster++;
        rows.push_back({cluster, n + cr, lam, sr});
        birth.push_back(lam);
        stack.push_back({l, cl});
        stack.push_back({r, cr});
      } else if (!l_big && !r_big) {
        // cluster ends; every remaining point leaves here
        for (int p : leaves_of(node)) rows.push_back({cluster, p, lam, 1});
      } else {
        int big = l_big ? l : r;
        int small = l_big ? r : l;
        for (int p : leaves_of(small)) rows.push_back({cluster, p, lam, 1});
        stack.push_back({big, cluster});
      }
    }
  }
  int n_clusters_cond = next_cluster;

  // stability: canonical (lambda, size) accumulation per cluster
  std::vector<std::vector<std::pair<double, int>>> contrib(static_cast<size_t>(n_clusters_cond));
  std::vector<std::vector<int>> children(static_cast<size_t>(n_clusters_cond));
  std::vector<std::vector<int>> point_rows(static_cast<size_t>(n_clusters_cond));
  for (int i = 0; i < int(rows.size()); ++i) {
    const auto& row = rows[size_t(i)];
    contrib[size_t(row.parent)].push_back({row.lambda, row.size});
    if (row.child >= n)
      children[size_t(row.parent)].push_back(row.child - n);
    else
      point_rows[size_t(row.parent)].push_back(i);
  }
  std::vector<double> stability(size_t(n_clusters_cond), 0.0);
  for (int c = 0; c < n_clusters_cond; ++c) {
    auto& list = contrib[size_t(c)];
    std::sort(list.begin(), list.end());
    double s = 0.0;
    for (auto& [lam, sz] : list) s += (lam - birth[size_t(c)]) * sz;
    stability[size_t(c)] = s;
  }

  // excess-of-mass selection; the root may win (single-cluster scenes)
  std::vector<double> score(size_t(n_clusters_cond), 0.0);
  std::vector<char> selected(size_t(n_clusters_cond), 0);
  for (int c = n_clusters_cond - 1; c >= 0; --c) {
    double child_sum = 0.0;
    for (int ch : children[size_t(c)]) child_sum += score[size_t(ch)];
    if (!children[size_t(c)].empty() && child_sum > stability[size_t(c)]) {
      score[size_t(c)] = child_sum;
      selected[size_t(c)] = 0;
    } else {
      score[size_t(c)] = stability[size_t(c)];
      selected[size_t(c)] = 1;
    }
  }
  // enforce an antichain: a selected ancestor absorbs its subtree
  {
    std::vector<std::pair<int, char>> stack{{0, 0}};
    while (!stack.empty()) {
      auto [c, covered] = stack.back();
      stack.pop_back();
      if (covered) selected[size_t(c)] = 0;
      char cov = covered || selected[size_t(c)];
      for (int ch : children[size_t(c)]) stack.push_back({ch, cov});
    }
  }

  // members per condensed cluster = all points in its subtree
  std::vector<std::vector<int>> members(static_cast<size_t>(n_clusters_cond));
  for (int c = n_clusters_cond - 1; c >= 0; --c) {
    auto& m = members[size_t(c)];
    for (int ri : point_rows[size_t(c)]) m.push_back(rows[size_t(ri)].child);
    for (int ch : children[size_t(c)]) {
      const auto& cm = members[size_t(ch)];
      m.insert(m.end(), cm.begin(), cm.end());
    }
    std::sort(m.begin(), m.end());
  }

  int label = 0;
  for (int c = 0; c < n_clusters_cond; ++c) {
    if (!selected[size_t(c)]) continue;
    for (int p : members[size_t(c)]) res.labels[size_t(p)] = label;
    ++label;
  }
  res.n_clusters = label;
  res.candidate_members = members;
  res.candidate_stability = stability;
  return res;
}

// ---------------------------------------------------------------- pipeline

ClusterResult cluster_scene(Scene& scene, const ClusterConfig& cfg) {
  const int n = int(scene.size());
  ClusterResult out;
  out.labels.assign(size_t(n), kUnassigned);
  if (n == 0) return out;

  Eigen::MatrixXf pos(n, 3), col(n, 3);
  for (int i = 0; i < n; ++i) {
    pos.row(i) = scene.gaussians[size_t(i)].position.transpose();
    col.row(i) = scene.gaussians[size_t(i)].color.transpose();
  }
  Eigen::MatrixXf feats = scene.feature_matrix();
  PcaResult pca = pca_reduce(feats, cfg.pca_dim);
  out.degenerate_features = pca.degenerate;

  Eigen::MatrixXf zp = zscore_columns(pos);
  Eigen::MatrixXf zc = zscore_columns(col);
  Eigen::MatrixXf zs = zscore_columns(pca.reduced);
  Eigen::MatrixXd u(n, 3 + 3 + cfg.pca_dim);
  u << zp.cast<double>(), zc.cast<double>(), zs.cast<double>();

  int mcs = cfg.min_cluster_size > 0
                ? cfg.min_cluster_size
                : std::max(20, int(0.002 * n));
  mcs = std::min(mcs, n);
  HdbscanResult h = hdbscan(u, mcs, cfg.min_samples);

  // relabel by descending member count (stable on first-member index)
  std::vector<std::vector<int>> groups(size_t(h.n_clusters));
  for (int i = 0; i < n; ++i)
    if (h.labels[size_t(i)] != kUnassigned)
      groups[size_t(h.labels[size_t(i)])].push_back(i);
  std::vector<int> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (groups[size_t(a)].size() != groups[size_t(b)].size())
      return groups[size_t(a)].size() > groups[size_t(b)].size();
    return groups[size_t(a)].front() < groups[size_t(b)].front();
  });

  out.n_groups = h.n_clusters;
  out.members.resize(groups.size());
  for (int newg = 0; newg < int(order.size()); ++newg)
    out.members[size_t(newg)] = groups[size_t(order[size_t(newg)])];
  for (int g = 0; g < out.n_groups; ++g)
    for (int i : out.members[size_t(g)]) out.labels[size_t(i)] = g;

  out.mean_feature = Eigen::MatrixXf::Zero(out.n_groups, scene.feature_dim());
  for (int g = 0; g < out.n_groups; ++g) {
    Eigen::VectorXf mean = Eigen::VectorXf::Zero(scene.feature_dim());
    for (int i : out.members[size_t(g)]) mean += scene.idsf[size_t(i)].f;
    mean /= float(out.members[size_t(g)].size());
    float norm = mean.norm();
    if (norm > 1e-12f) mean /= norm;
    out.mean_feature.row(g) = mean.transpose();
  }

  for (int i = 0; i < n; ++i) scene.idsf[size_t(i)].d = out.labels[size_t(i)];
  return out;
}

}  // namespace gsf

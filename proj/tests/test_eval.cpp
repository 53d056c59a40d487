#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <stdexcept>

#include "gsfield/eval.hpp"
#include "gsfield/rng.hpp"
#include "helpers.hpp"

using namespace gsf;

namespace {
Aabb box(double x0, double y0, double z0, double x1, double y1, double z1) {
  Aabb b;
  b.min = Eigen::Vector3d(x0, y0, z0);
  b.max = Eigen::Vector3d(x1, y1, z1);
  return b;
}
}  // namespace

TEST_CASE("iou3d hand values") {
  Aabb unit = box(0, 0, 0, 1, 1, 1);
  CHECK(iou3d(unit, unit) == doctest::Approx(1.0));
  CHECK(iou3d(unit, box(2, 2, 2, 3, 3, 3)) == 0.0);
  // shifted by half along one axis: inter 0.5, union 1.5
  CHECK(iou3d(unit, box(0.5, 0, 0, 1.5, 1, 1)) == doctest::Approx(1.0 / 3.0));
  // touching faces intersect with zero volume
  CHECK(iou3d(unit, box(1, 0, 0, 2, 1, 1)) == 0.0);
}

TEST_CASE("group aabb closed forms") {
  Scene s;
  ClusterResult cl;

  SUBCASE("single gaussian") {
    Gaussian g;
    g.position = Eigen::Vector3f(1, 2, 3);
    g.log_scale = Eigen::Vector3f(std::log(0.1f), std::log(0.2f), std::log(0.05f));
    s.gaussians = {g};
    s.idsf.resize(1);
    cl.n_groups = 1;
    cl.labels = {0};
    cl.members = {{0}};
    auto b = group_aabb(cl, s, 0);
    REQUIRE(b.has_value());
    // pad = 3 * max scale = 0.6
    CHECK(b->min.x() == doctest::Approx(1 - 0.6));
    CHECK(b->max.y() == doctest::Approx(2 + 0.6));
    CHECK(b->min.z() == doctest::Approx(3 - 0.6));
  }
  SUBCASE("far outlier dropped by the MAD guard") {
    for (int i = 0; i < 9; ++i) {
      Gaussian g;
      g.position = Eigen::Vector3f(0.1f * float(i), 0, 0);
      g.log_scale.setConstant(std::log(0.01f));
      s.gaussians.push_back(g);
    }
    Gaussian stray;
    stray.position = Eigen::Vector3f(100, 0, 0);
    stray.log_scale.setConstant(std::log(0.01f));
    s.gaussians.push_back(stray);
    s.idsf.resize(10);
    cl.n_groups = 1;
    cl.labels.assign(10, 0);
    cl.members = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}};
    auto b = group_aabb(cl, s, 0);
    REQUIRE(b.has_value());
    CHECK(b->max.x() < 2.0);  // stray at x=100 excluded
  }
  SUBCASE("empty group") {
    cl.n_groups = 1;
    cl.members = {{}};
    CHECK_FALSE(group_aabb(cl, s, 0).has_value());
  }
}

TEST_CASE("seg miou scripted") {
  std::vector<uint8_t> a(16, 0), b(16, 0);
  for (int i = 0; i < 8; ++i) a[size_t(i)] = 1;
  for (int i = 4; i < 12; ++i) b[size_t(i)] = 1;
  // inter 4, union 12
  CHECK(seg_miou({a}, {b}) == doctest::Approx(4.0 / 12.0));
  CHECK(seg_miou({a, a}, {b, a}) == doctest::Approx(0.5 * (4.0 / 12.0 + 1.0)));
  std::vector<uint8_t> empty(16, 0);
  CHECK(seg_miou({empty}, {empty}) == doctest::Approx(1.0));
  CHECK(seg_miou({}, {}) == doctest::Approx(1.0));
}

TEST_CASE("detection recall") {
  std::vector<Aabb> gts = {box(0, 0, 0, 1, 1, 1), box(5, 5, 5, 6, 6, 6)};
  std::vector<std::optional<Aabb>> preds = {
      box(0.1, 0, 0, 1.1, 1, 1),  // IoU ~ 0.8
      std::nullopt};
  CHECK(detection_recall(preds, gts, 0.25) == doctest::Approx(0.5));
  CHECK(detection_recall(preds, gts, 0.9) == doctest::Approx(0.0));
  CHECK(detection_recall({}, {}, 0.5) == doctest::Approx(1.0));
}

TEST_CASE("click selection rules") {
  int w = 20, h = 20;
  std::vector<int64_t> ids(size_t(w) * h, kUnassigned);
  // a labeled patch around (10, 10)
  for (int y = 9; y <= 11; ++y)
    for (int x = 9; x <= 11; ++x) ids[size_t(y) * w + x] = 2;

  SUBCASE("direct hit") {
    QueryResult r = click_select(ids, w, h, 10, 10);
    CHECK(r.detected);
    CHECK(r.group_id == 2);
  }
  SUBCASE("snaps to nearest label within five pixels") {
    QueryResult r = click_select(ids, w, h, 14, 10);  // 3 px right of patch
    CHECK(r.detected);
    CHECK(r.group_id == 2);
  }
  SUBCASE("no label within radius") {
    QueryResult r = click_select(ids, w, h, 1, 1);
    CHECK_FALSE(r.detected);
  }
  SUBCASE("out of bounds throws") {
    CHECK_THROWS_AS(click_select(ids, w, h, -1, 3), std::out_of_range);
    CHECK_THROWS_AS(click_select(ids, w, h, 3, h), std::out_of_range);
  }
}

TEST_CASE("cross view consistency scripted") {
  // view a: gt classes 0/1 predicted as groups 5/7 consistently;
  // view b: same mapping -> consistency 1
  std::vector<int64_t> gta = {0, 0, 1, 1}, gtb = {0, 1, 1, 1};
  std::vector<int64_t> pa = {5, 5, 7, 7}, pb = {5, 7, 7, 7};
  CHECK(cross_view_consistency(gta, pa, gtb, pb) == doctest::Approx(1.0));

  // flip view b's mapping -> no cross-view pair agrees
  std::vector<int64_t> pb_flip = {7, 5, 5, 5};
  CHECK(cross_view_consistency(gta, pa, gtb, pb_flip) == doctest::Approx(0.0));

  // reference count for a mixed case
  std::vector<int64_t> pb_mixed = {5, 7, 5, 7};
  // class 0: a has {5,5}, b has {5}: matched pairs 2*1=2 of 2*1=2... per class:
  // class 0: 2 a-pixels x 1 b-pixel, matches: a=5 (2) with b=5 (1) -> 2 of 2
  // class 1: 2 a-pixels x 3 b-pixels, a=7 (2) with b: 7 appears 2 -> 4 of 6
  double expect = (2.0 + 4.0) / (2.0 + 6.0);
  CHECK(cross_view_consistency(gta, pa, gtb, pb_mixed) ==
        doctest::Approx(expect));
}

TEST_CASE("query text picks the matching group") {
  Rng rng(7);
  // two groups with orthogonal learned features; a head trained nowhere near
  // this scale, so build one whose effect we can script: identity-ish via
  // large hidden width is unavailable -> instead verify ranking consistency
  // against a direct reimplementation of the scoring rule.
  Scene s;
  int d = 6, dt = 4;
  ClusterResult cl;
  cl.n_groups = 2;
  cl.mean_feature = Eigen::MatrixXf::Zero(2, d);
  cl.mean_feature(0, 0) = 1;
  cl.mean_feature(1, 1) = 1;
  cl.members = {{0}, {1}};
  cl.labels = {0, 1};
  s.gaussians.resize(2);
  s.idsf.resize(2);
  ProjectionHead head = ProjectionHead::init(d, dt, rng.fork("h"));

  Eigen::VectorXd text(dt);
  for (int i = 0; i < dt; ++i) text[i] = rng.normal();
  text.normalize();

  QueryResult r = query_text(s, cl, head, text);
  REQUIRE(r.scores.size() == 2);

  // scripted scores
  Eigen::MatrixXd proj = head.forward(cl.mean_feature.cast<double>());
  for (int g = 0; g < 2; ++g) {
    Eigen::VectorXd p = proj.row(g).transpose();
    double expect = p.norm() > 1e-12 ? p.normalized().dot(text) : 0.0;
    CHECK(r.scores[size_t(g)] == doctest::Approx(expect).epsilon(1e-9));
  }
  int want = r.scores[0] >= r.scores[1] ? 0 : 1;
  CHECK(r.group_id == want);
}

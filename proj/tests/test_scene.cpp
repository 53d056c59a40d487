#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "gsfield/errors.hpp"
#include "gsfield/rng.hpp"
#include "gsfield/scene.hpp"
#include "helpers.hpp"

namespace fs = std::filesystem;
using namespace gsf;

TEST_CASE("scene container round trip") {
  Rng rng(3);
  Scene s = testutil::random_scene(rng, 100, 16, 3);
  auto path = fs::temp_directory_path() / "scene_rt.idsf";
  save_scene(s, path);
  Scene back = load_scene(path);
  REQUIRE(back.size() == s.size());
  REQUIRE(back.feature_dim() == 16);
  for (size_t i = 0; i < s.size(); ++i) {
    CHECK(back.gaussians[i].position == s.gaussians[i].position);
    CHECK(back.gaussians[i].rotation == s.gaussians[i].rotation);
    CHECK(back.gaussians[i].log_scale == s.gaussians[i].log_scale);
    CHECK(back.gaussians[i].opacity_logit == s.gaussians[i].opacity_logit);
    CHECK(back.gaussians[i].color == s.gaussians[i].color);
    CHECK(back.idsf[i].f == s.idsf[i].f);
    CHECK(back.idsf[i].d == s.idsf[i].d);
  }
  fs::remove(path);
}

TEST_CASE("scene container corruption") {
  Rng rng(4);
  Scene s = testutil::random_scene(rng, 10, 8);
  auto path = fs::temp_directory_path() / "scene_bad.idsf";
  save_scene(s, path);

  SUBCASE("corrupted magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("QQQQ", 4);
    f.close();
    CHECK_THROWS_AS(load_scene(path), MalformedHeaderError);
  }
  SUBCASE("truncated payload") {
    fs::resize_file(path, fs::file_size(path) / 2);
    CHECK_THROWS_AS(load_scene(path), TruncatedPayloadError);
  }
  fs::remove(path);
}

TEST_CASE("on-axis projection closed form") {
  Camera cam = testutil::simple_camera(64, 64, 100.f);
  Gaussian g;
  g.position = Eigen::Vector3f(0, 0, 4);
  g.log_scale.setConstant(std::log(0.2f));
  auto s = project_gaussian(g, cam);
  REQUIRE(s.has_value());
  CHECK(s->mean2d.x() == doctest::Approx(cam.cx).epsilon(1e-9));
  CHECK(s->mean2d.y() == doctest::Approx(cam.cy).epsilon(1e-9));
  double expect = std::pow(100.0 * 0.2 / 4.0, 2) + 0.3;
  CHECK(s->cov2d(0, 0) == doctest::Approx(expect).epsilon(1e-5));
  CHECK(s->cov2d(1, 1) == doctest::Approx(expect).epsilon(1e-5));
  CHECK(std::abs(s->cov2d(0, 1)) < 1e-6);
  CHECK(s->depth == doctest::Approx(4.0));
}

TEST_CASE("behind-camera cull") {
  Camera cam = testutil::simple_camera(32, 32);
  Gaussian g;
  g.position = Eigen::Vector3f(0, 0, -1);
  CHECK_FALSE(project_gaussian(g, cam).has_value());
  g.position.z() = cam.znear * 0.5f;
  CHECK_FALSE(project_gaussian(g, cam).has_value());
}

TEST_CASE("cov2d vs Monte-Carlo projection oracle") {
  // Sample the 3D Gaussian, push samples through the exact perspective map,
  // and compare the empirical image-plane covariance with the propagated one.
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    Camera cam = testutil::simple_camera(64, 64, 80.f);
    Gaussian g = testutil::random_gaussian(rng);
    g.log_scale = g.log_scale.array().min(-2.2f);  // keep linearization tight
    auto s = project_gaussian(g, cam);
    REQUIRE(s.has_value());

    Eigen::Matrix3f cov3 = g.covariance();
    Eigen::LLT<Eigen::Matrix3d> llt(cov3.cast<double>());
    Eigen::Matrix3d L = llt.matrixL();
    const int n = 100000;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
    std::vector<Eigen::Vector2d> pts;
    pts.reserve(n);
    Rng sampler = rng.fork(uint64_t(trial));
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d z(sampler.normal(), sampler.normal(), sampler.normal());
      Eigen::Vector3f p = g.position + (L * z).cast<float>();
      Eigen::Vector3f c = cam.to_camera(p);
      Eigen::Vector2d uv(cam.fx * c.x() / c.z() + cam.cx,
                         cam.fy * c.y() / c.z() + cam.cy);
      pts.push_back(uv);
      mean += uv;
    }
    mean /= double(n);
    for (const auto& uv : pts) acc += (uv - mean) * (uv - mean).transpose();
    acc /= double(n - 1);

    Eigen::Matrix2d propagated = s->cov2d - 0.3 * Eigen::Matrix2d::Identity();
    double err = (acc - propagated).norm() / propagated.norm();
    CHECK(err < 0.02);
  }
}

TEST_CASE("projection equivariant under joint world translation") {
  Rng rng(21);
  Camera cam = testutil::simple_camera(48, 48);
  cam.rotation = Eigen::AngleAxisf(0.4f, Eigen::Vector3f(1, 2, 3).normalized())
                     .toRotationMatrix();
  Gaussian g = testutil::random_gaussian(rng);
  Eigen::Vector3f pos = Eigen::Vector3f(0.1f, -0.2f, 4.f);
  cam.translation = -(cam.rotation * pos);
  // place the gaussian in front of this (rotated, offset) camera
  g.position = pos + cam.rotation.transpose() * Eigen::Vector3f(0.2f, -0.3f, 3.5f);
  auto a = project_gaussian(g, cam);

  Eigen::Vector3f shift(1.5f, -0.7f, 2.1f);
  Gaussian g2 = g;
  g2.position += shift;
  Camera cam2 = cam;
  cam2.translation = -(cam2.rotation * (pos + shift));
  auto b = project_gaussian(g2, cam2);

  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK((a->mean2d - b->mean2d).norm() < 1e-4);
  CHECK((a->cov2d - b->cov2d).norm() < 1e-4);
  CHECK(a->depth == doctest::Approx(b->depth).epsilon(1e-6));
}

TEST_CASE("cov2d is SPD") {
  Rng rng(29);
  Camera cam = testutil::simple_camera(64, 64);
  for (int i = 0; i < 50; ++i) {
    Gaussian g = testutil::random_gaussian(rng);
    auto s = project_gaussian(g, cam);
    REQUIRE(s.has_value());
    CHECK(s->cov2d(0, 1) == doctest::Approx(s->cov2d(1, 0)));
    double det = s->cov2d.determinant();
    CHECK(s->cov2d(0, 0) > 0);
    CHECK(det > 0);
  }
}

TEST_CASE("projection backward vs finite differences") {
  Rng rng(31);
  Camera cam = testutil::simple_camera(64, 64, 90.f);
  cam.rotation = Eigen::AngleAxisf(-0.3f, Eigen::Vector3f(2, -1, 1).normalized())
                     .toRotationMatrix();
  cam.translation = Eigen::Vector3f(0.2f, 0.1f, 0.5f);

  int checked = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Gaussian g = testutil::random_gaussian(rng);
    Eigen::Vector2d dm(rng.normal(), rng.normal());
    Eigen::Matrix2d dc;
    double o = rng.normal();
    dc << rng.normal(), o, o, rng.normal();
    double dd = rng.normal();

    auto loss = [&](const Gaussian& gg) {
      auto s = project_gaussian(gg, cam);
      REQUIRE(s.has_value());
      return dm.dot(s->mean2d) + (dc.array() * s->cov2d.array()).sum() +
             dd * s->depth;
    };
    ProjectionGrads grads = project_gaussian_backward(g, cam, dm, dc, dd);

    // the projection runs in float, so each loss evaluation carries ~1e-7
    // relative noise; divide by the realized step and give the comparison an
    // absolute floor proportional to the loss magnitude
    const double eps = 1e-2;
    auto check_param = [&](float* p, double analytic) {
      float save = *p;
      *p = float(save + eps);
      double hi = *p;
      double up = loss(g);
      *p = float(save - eps);
      double lo = *p;
      double dn = loss(g);
      *p = save;
      double numeric = (up - dn) / (hi - lo);
      double floor = std::max(1e-2, 2e-3 * std::max(std::abs(up), std::abs(dn)));
      CHECK(testutil::rel_err(analytic, numeric, floor) < 5e-3);
      ++checked;
    };
    for (int k = 0; k < 3; ++k) check_param(&g.position[k], grads.d_position[k]);
    for (int k = 0; k < 4; ++k) check_param(&g.rotation[k], grads.d_rotation[k]);
    for (int k = 0; k < 3; ++k)
      check_param(&g.log_scale[k], grads.d_log_scale[k]);
  }
  CHECK(checked == 100);
}

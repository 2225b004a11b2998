#include "surfcap/core_geom.hpp"
#include "surfcap/error.hpp"

#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

using namespace surfcap;

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quaternion q{n(rng), n(rng), n(rng), n(rng)};
  return q.to_matrix();
}

Vec3 random_vec(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

TEST_CASE("triangle frame of the axis-aligned unit triangle") {
  const TriangleFrame f = triangle_frame({0, 0, 0}, {1, 0, 0}, {0, 1, 0});
  CHECK(f.T.isApprox(Vec3(1.0 / 3, 1.0 / 3, 0)));
  CHECK((f.R.col(0) - Vec3::UnitX()).norm() < 1e-12);
  CHECK((f.R.col(1) - Vec3::UnitZ()).norm() < 1e-12);
  CHECK((f.R.col(2) + Vec3::UnitY()).norm() < 1e-12);
  CHECK(f.s == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
}

TEST_CASE("triangle frame is orthonormal, right-handed and equivariant") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 v0 = random_vec(rng), v1 = random_vec(rng), v2 = random_vec(rng);
    const TriangleFrame f = triangle_frame(v0, v1, v2);
    CHECK((f.R * f.R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(f.R.determinant() - 1.0) < 1e-9);
    CHECK(f.s > 0.0);

    const Mat3 Q = random_rotation(rng);
    const Vec3 t = random_vec(rng, 3.0);
    const TriangleFrame g = triangle_frame(Q * v0 + t, Q * v1 + t, Q * v2 + t);
    CHECK((g.R - Q * f.R).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((g.T - (Q * f.T + t)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(g.s - f.s) < 1e-9);

    // Round trip through local coordinates.
    for (const Vec3& v : {v0, v1, v2}) {
      const Vec3 local = f.R.transpose() * (v - f.T) / f.s;
      CHECK((f.s * f.R * local + f.T - v).norm() < 1e-9);
    }
  }
}

TEST_CASE("degenerate triangles are rejected") {
  try {
    triangle_frame({0, 0, 0}, {1, 0, 0}, {2, 0, 0});
    FAIL("expected DegenerateTriangle");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateTriangle);
  }
}

TEST_CASE("positional encoding examples") {
  const std::vector<double> zero{0.0};
  const auto a = posenc(zero, 2);
  REQUIRE(a.size() == 4);
  CHECK(a[0] == 0.0);
  CHECK(a[1] == 1.0);
  CHECK(a[2] == 0.0);
  CHECK(a[3] == 1.0);

  const std::vector<double> half{0.5};
  const auto b = posenc(half, 1);
  CHECK(b[0] == doctest::Approx(1.0));
  CHECK(std::abs(b[1]) < 1e-15);

  // Independent scalar evaluation.
  const std::vector<double> p{0.3, -0.7};
  const auto c = posenc(p, 4);
  REQUIRE(c.size() == 16);
  std::size_t idx = 0;
  for (int k = 0; k < 4; ++k) {
    const double f = std::pow(2.0, k) * std::numbers::pi;
    for (double x : p) CHECK(c[idx++] == doctest::Approx(std::sin(f * x)).epsilon(1e-14));
    for (double x : p) CHECK(c[idx++] == doctest::Approx(std::cos(f * x)).epsilon(1e-14));
  }
  for (double v : c) CHECK(std::abs(v) <= 1.0);
  CHECK_THROWS_AS(posenc(p, 0), Error);
}

TEST_CASE("projection examples and homogeneous oracle") {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = cam.height = 100;
  auto p = project(cam, {0, 0, 1});
  CHECK(p.u == 50.0);
  CHECK(p.v == 50.0);
  CHECK(p.depth == 1.0);
  p = project(cam, {0.1, 0, 1});
  CHECK(p.u == doctest::Approx(60.0));
  CHECK(p.v == 50.0);

  try {
    project(cam, {0, 0, -1});
    FAIL("expected BehindCamera");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BehindCamera);
  }

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uf(50, 500);
  for (int trial = 0; trial < 100; ++trial) {
    Camera c;
    c.width = 640;
    c.height = 480;
    c.fx = uf(rng);
    c.fy = uf(rng);
    c.cx = 320 + random_vec(rng, 50)[0];
    c.cy = 240 + random_vec(rng, 50)[1];
    c.world_to_cam.rotation = random_rotation(rng);
    c.world_to_cam.translation = random_vec(rng);
    Vec3 x = c.world_to_cam.inverse().apply(Vec3(random_vec(rng)[0], random_vec(rng)[1], 2.0));
    Eigen::Matrix<double, 3, 4> P;
    Eigen::Matrix3d K;
    K << c.fx, 0, c.cx, 0, c.fy, c.cy, 0, 0, 1;
    P.leftCols<3>() = c.world_to_cam.rotation;
    P.col(3) = c.world_to_cam.translation;
    const Eigen::Vector3d h = K * P * x.homogeneous();
    const auto pr = project(c, x);
    CHECK(std::abs(pr.u - h[0] / h[2]) < 1e-9);
    CHECK(std::abs(pr.v - h[1] / h[2]) < 1e-9);
    CHECK(std::abs(pr.depth - h[2]) < 1e-9);
  }
}

TEST_CASE("camera validation") {
  Camera c;
  c.width = 10;
  c.height = 10;
  c.cx = 12;
  CHECK_THROWS_AS(c.validate(), Error);
  c.cx = 5;
  c.cy = 5;
  CHECK_NOTHROW(c.validate());
  c.fx = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("quaternion matrix round trip recovers q up to sign") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const Quaternion q = Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
    const Quaternion r = Quaternion::from_matrix(q.to_matrix());
    const double diff = std::min((q.as_vec() - r.as_vec()).norm(), (q.as_vec() + r.as_vec()).norm());
    CHECK(diff < 1e-9);
  }
}

TEST_CASE("quaternion product matches matrix composition and its linear maps") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Quaternion a = Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
    const Quaternion b = Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
    CHECK(((a * b).to_matrix() - a.to_matrix() * b.to_matrix()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(((a * b).as_vec() - quat_left_mul(a) * b.as_vec()).norm() < 1e-12);
    CHECK(((a * b).as_vec() - quat_right_mul(b) * a.as_vec()).norm() < 1e-12);
  }
}

TEST_CASE("rotation vjp matches finite differences") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Vec4 q(n(rng), n(rng), n(rng), n(rng));
    Mat3 g;
    for (int k = 0; k < 9; ++k) g.data()[k] = n(rng);
    const Vec4 analytic = rotation_from_raw_vjp(q, g);
    for (int k = 0; k < 4; ++k) {
      const double h = 1e-6;
      Vec4 qp = q, qm = q;
      qp[k] += h;
      qm[k] -= h;
      const double fd =
          ((rotation_from_raw(qp).cwiseProduct(g)).sum() - (rotation_from_raw(qm).cwiseProduct(g)).sum()) /
          (2 * h);
      CHECK(std::abs(fd - analytic[k]) < 1e-7 * std::max(1.0, std::abs(fd)));
    }
  }
}

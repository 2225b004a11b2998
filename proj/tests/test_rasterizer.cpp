#include "surfcap/oracle.hpp"
#include "surfcap/rasterizer.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

using namespace surfcap;

namespace {

Camera test_camera(int size = 24) {
  return look_at_camera({0.3, -0.2, -5.0}, {0, 0, 0}, {0, -1, 0}, size, size, 1.4 * size,
                        1.4 * size);
}

Surfel2D facing_surfel(const Vec3& pos, double scale, const Vec3& rgb, double opacity) {
  Surfel2D s;
  s.position = pos;
  s.log_scale = Vec2::Constant(std::log(scale));
  s.opacity_logit = logit(opacity);
  s.sh = {rgb_to_sh0(rgb[0]), rgb_to_sh0(rgb[1]), rgb_to_sh0(rgb[2])};
  return s;
}

std::vector<Surfel2D> random_scene(std::mt19937_64& rng, int n, int sh_degree) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> op(0.2, 0.7);
  std::uniform_real_distribution<double> sc(std::log(0.15), std::log(0.4));
  std::uniform_real_distribution<double> col(0.15, 0.85);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Surfel2D> out;
  for (int i = 0; i < n; ++i) {
    Surfel2D s;
    s.position = {0.6 * u(rng), 0.6 * u(rng), 0.5 * u(rng)};
    // Mostly camera-facing with a random tilt.
    const Quaternion tilt =
        Quaternion::from_axis_angle(Vec3(g(rng), g(rng), 0.0), 0.6 * u(rng));
    const Quaternion spin = Quaternion::from_axis_angle(Vec3::UnitZ(), 3.0 * u(rng));
    const Quaternion q = tilt * spin;
    s.rotation = {q.w * 1.3, q.x * 1.3, q.y * 1.3, q.z * 1.3};  // unnormalized on purpose
    s.log_scale = {sc(rng), sc(rng)};
    s.opacity_logit = logit(op(rng));
    const int k = sh_coeffs(sh_degree);
    s.sh.assign(3 * k, 0.0);
    for (int c = 0; c < 3; ++c) s.sh[c] = rgb_to_sh0(col(rng));
    for (int j = 3; j < 3 * k; ++j) s.sh[j] = 0.1 * g(rng);
    out.push_back(s);
  }
  return out;
}

bool generic(const RenderMargins& m) {
  return m.cutoff > 2e-3 && m.branch > 2e-3 && m.clamp > 1e-3 && m.transmittance > 1e-2 &&
         m.depth_gap > 1e-4 && m.facing > 1e-3 && m.color > 1e-3;
}

std::size_t surfel_dof(const Surfel2D& s) { return 3 + 4 + 2 + 1 + s.sh.size(); }

std::vector<double> pack(const std::vector<Surfel2D>& scene) {
  std::vector<double> x;
  for (const Surfel2D& s : scene) {
    for (int i = 0; i < 3; ++i) x.push_back(s.position[i]);
    const Vec4 q = s.rotation.as_vec();
    for (int i = 0; i < 4; ++i) x.push_back(q[i]);
    x.push_back(s.log_scale[0]);
    x.push_back(s.log_scale[1]);
    x.push_back(s.opacity_logit);
    x.insert(x.end(), s.sh.begin(), s.sh.end());
  }
  return x;
}

std::vector<Surfel2D> unpack(std::vector<Surfel2D> scene, std::span<const double> x) {
  std::size_t k = 0;
  for (Surfel2D& s : scene) {
    for (int i = 0; i < 3; ++i) s.position[i] = x[k++];
    s.rotation = {x[k], x[k + 1], x[k + 2], x[k + 3]};
    k += 4;
    s.log_scale = {x[k], x[k + 1]};
    k += 2;
    s.opacity_logit = x[k++];
    for (double& v : s.sh) v = x[k++];
  }
  return scene;
}

std::vector<double> pack_grad(const GradientBuffer& g) {
  std::vector<double> x;
  for (const SurfelGrad& s : g.surfels) {
    for (int i = 0; i < 3; ++i) x.push_back(s.position[i]);
    for (int i = 0; i < 4; ++i) x.push_back(s.rotation[i]);
    x.push_back(s.log_scale[0]);
    x.push_back(s.log_scale[1]);
    x.push_back(s.opacity_logit);
    x.insert(x.end(), s.sh.begin(), s.sh.end());
  }
  return x;
}

double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

Image random_image(std::mt19937_64& rng, int w, int h, int c) {
  std::normal_distribution<double> g(0.0, 1.0);
  Image img(w, h, c);
  for (double& v : img.data) v = g(rng);
  return img;
}

}  // namespace

TEST_CASE("ray-splat intersection examples") {
  Surfel2D s = facing_surfel({0, 0, 0}, 0.2, {1, 0, 0}, 0.5);
  auto hit = ray_splat_intersect(s, {0, 0, -1}, {0, 0, 1});
  REQUIRE(hit);
  CHECK(hit->u == doctest::Approx(0.0));
  CHECK(hit->v == doctest::Approx(0.0));
  CHECK(hit->depth == doctest::Approx(1.0));

  hit = ray_splat_intersect(s, {0.2, 0, -1}, {0, 0, 1});
  REQUIRE(hit);
  CHECK(hit->u == doctest::Approx(1.0));
  CHECK(hit->v == doctest::Approx(0.0));

  // Parallel ray misses.
  CHECK_FALSE(ray_splat_intersect(s, {0, 0, -1}, {1, 0, 0}));
  // Plane behind the origin misses.
  CHECK_FALSE(ray_splat_intersect(s, {0, 0, 1}, {0, 0, 1}));
}

TEST_CASE("ray-splat intersection lies on the surfel plane") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Surfel2D s;
    s.position = {g(rng), g(rng), g(rng)};
    s.rotation = {g(rng), g(rng), g(rng), g(rng)};
    s.log_scale = {0.3 * g(rng), 0.3 * g(rng)};
    const Vec3 origin(g(rng) * 3, g(rng) * 3, g(rng) * 3);
    const Vec3 dir = (s.position + Vec3(g(rng), g(rng), g(rng)) * 0.3 - origin).normalized();
    const auto hit = ray_splat_intersect(s, origin, dir);
    if (!hit) continue;
    const Mat3 R = s.rotation.to_matrix();
    const Vec3 p = origin + hit->depth * dir;
    CHECK(std::abs(R.col(2).dot(p - s.position)) < 1e-9);
    const Vec2 sc = s.scale();
    const Vec3 rebuilt = s.position + hit->u * sc[0] * R.col(0) + hit->v * sc[1] * R.col(1);
    CHECK((rebuilt - p).norm() < 1e-9);
  }
}

TEST_CASE("empty scene renders background") {
  const Camera cam = test_camera(16);
  RenderSettings st;
  const RenderOutput out = render({}, cam, st);
  for (double v : out.color.data) CHECK(v == 0.0);
  for (double v : out.alpha.data) CHECK(v == 0.0);

  st.background = {0.2, 0.3, 0.4};
  const RenderOutput bg = render({}, cam, st);
  CHECK(bg.color.at(3, 5, 2) == doctest::Approx(0.4));
}

TEST_CASE("single opaque surfel saturates at the alpha clamp") {
  Camera cam = look_at_camera({0, 0, -2}, {0, 0, 0}, {0, -1, 0}, 17, 17, 20, 20);
  cam.cx = cam.cy = 8;
  const std::vector<Surfel2D> scene{facing_surfel({0, 0, 0}, 1.0, {1, 0, 0}, 1.0 - 1e-9)};
  const RenderOutput out = render(scene, cam, RenderSettings{});
  CHECK(out.color.at(8, 8, 0) == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(out.color.at(8, 8, 1) == doctest::Approx(0.0));
  CHECK(out.alpha.at(8, 8) == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(out.depth.at(8, 8) == doctest::Approx(2.0));
  CHECK(out.distortion.at(8, 8) == 0.0);
}

TEST_CASE("two stacked surfels match closed-form blending") {
  Camera cam = look_at_camera({0, 0, -2}, {0, 0, 0}, {0, -1, 0}, 9, 9, 10, 10);
  cam.cx = cam.cy = 4;
  const double o1 = 0.6, o2 = 0.7;
  const Vec3 c1(0.9, 0.1, 0.2), c2(0.1, 0.8, 0.3), bg(0.05, 0.1, 0.15);
  std::vector<Surfel2D> scene{facing_surfel({0, 0, 0.5}, 0.5, c2, o2),
                              facing_surfel({0, 0, 0}, 0.5, c1, o1)};
  RenderSettings st;
  st.background = bg;
  const RenderOutput out = render(scene, cam, st);
  // Center ray hits both at u = v = 0, so G = 1.
  const double w1 = o1, w2 = o2 * (1 - o1), T = (1 - o1) * (1 - o2);
  const Vec3 expected = w1 * c1 + w2 * c2 + T * bg;
  for (int c = 0; c < 3; ++c) CHECK(std::abs(out.color.at(4, 4, c) - expected[c]) < 1e-6);
  CHECK(std::abs(out.alpha.at(4, 4) - (1 - T)) < 1e-12);
  CHECK(std::abs(out.depth.at(4, 4) - (w1 * 2.0 + w2 * 2.5) / (w1 + w2)) < 1e-12);
  CHECK(std::abs(out.distortion.at(4, 4) - w1 * w2 * 0.5) < 1e-12);
}

TEST_CASE("render invariants on random scenes") {
  std::mt19937_64 rng(99);
  const Camera cam = test_camera(40);
  for (int trial = 0; trial < 10; ++trial) {
    auto scene = random_scene(rng, 30, trial % 2 ? 1 : 0);
    RenderSettings st;
    st.sh_degree = trial % 2 ? 1 : 0;
    st.background = {0.1, 0.2, 0.3};
    const RenderOutput a = render(scene, cam, st);

    // Transmittance telescoping and bounds.
    for (std::size_t i = 0; i < a.alpha.data.size(); ++i) {
      CHECK(a.alpha.data[i] >= 0.0);
      CHECK(a.alpha.data[i] <= 1.0);
      CHECK(a.distortion.data[i] >= 0.0);
    }

    // Input order does not matter.
    auto permuted = scene;
    std::shuffle(permuted.begin(), permuted.end(), rng);
    const RenderOutput b = render(permuted, cam, st);
    CHECK(a.color.data == b.color.data);
    CHECK(a.depth.data == b.depth.data);

    // Tiling is exact against a single-tile reference.
    RenderSettings whole = st;
    whole.tile_size = 0;
    const RenderOutput c = render(scene, cam, whole);
    CHECK(a.color.data == c.color.data);
    CHECK(a.alpha.data == c.alpha.data);
    CHECK(a.normal.data == c.normal.data);
    CHECK(a.distortion.data == c.distortion.data);
  }
}

TEST_CASE("color gradient of a single surfel equals its blend weight") {
  Camera cam = look_at_camera({0, 0, -2}, {0, 0, 0}, {0, -1, 0}, 9, 9, 10, 10);
  cam.cx = cam.cy = 4;
  const std::vector<Surfel2D> scene{facing_surfel({0, 0, 0}, 0.5, {0.3, 0.4, 0.5}, 0.6)};
  RenderGradients g;
  g.color = Image(9, 9, 3);
  g.color.at(4, 4, 0) = 1.0;
  const GradientBuffer buf = render_backward(scene, cam, RenderSettings{}, g);
  // d color / d sh0 = C0 * alpha.
  CHECK(buf.surfels[0].sh[0] == doctest::Approx(0.6 * 0.28209479177387814).epsilon(1e-12));
  CHECK(buf.visible[0]);
}

TEST_CASE("surfel behind the transmittance cutoff gets zero gradient") {
  Camera cam = look_at_camera({0, 0, -2}, {0, 0, 0}, {0, -1, 0}, 5, 5, 4, 4);
  cam.cx = cam.cy = 2;
  std::vector<Surfel2D> scene;
  for (int i = 0; i < 3; ++i) scene.push_back(facing_surfel({0, 0, 0.1 * i}, 5.0, {1, 1, 1}, 0.999));
  scene.push_back(facing_surfel({0, 0, 1.0}, 5.0, {0.5, 0.5, 0.5}, 0.5));
  RenderGradients g;
  g.color = Image(5, 5, 3, 1.0);
  g.alpha = Image(5, 5, 1, 1.0);
  const GradientBuffer buf = render_backward(scene, cam, RenderSettings{}, g);
  const SurfelGrad& hidden = buf.surfels[3];
  CHECK(hidden.position.norm() == 0.0);
  CHECK(hidden.rotation.norm() == 0.0);
  CHECK(hidden.opacity_logit == 0.0);
  CHECK(hidden.sh[0] == 0.0);
  CHECK_FALSE(buf.visible[3]);
}

TEST_CASE("render backward matches central finite differences") {
  std::mt19937_64 rng(1234);
  const Camera cam = test_camera(24);
  int checked = 0;
  for (int attempt = 0; attempt < 200 && checked < 6; ++attempt) {
    const int degree = checked % 3 == 2 ? 2 : 0;
    RenderSettings st;
    st.sh_degree = degree;
    st.background = {0.2, 0.1, 0.3};
    const auto scene = random_scene(rng, 5, degree);
    if (!generic(render_margins(scene, cam, st))) continue;
    RenderGradients w{random_image(rng, 24, 24, 3), random_image(rng, 24, 24, 1),
                      random_image(rng, 24, 24, 1), random_image(rng, 24, 24, 3),
                      random_image(rng, 24, 24, 1)};
    auto loss = [&](std::span<const double> x) {
      const RenderOutput o = render(unpack(scene, x), cam, st);
      return dot(o.color, w.color) + dot(o.alpha, w.alpha) + dot(o.depth, w.depth) +
             dot(o.normal, w.normal) + dot(o.distortion, w.distortion);
    };
    const auto x0 = pack(scene);
    const auto numeric = fd_gradient(loss, x0, 1e-5);
    const auto analytic = pack_grad(render_backward(scene, cam, st, w));
    REQUIRE(analytic.size() == numeric.size());
    const double err = max_relative_error(analytic, numeric);
    INFO("attempt " << attempt << " rel err " << err);
    CHECK(err < 1e-4);
    ++checked;
  }
  CHECK(checked == 6);
}

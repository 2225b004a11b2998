// SPDX-License-Identifier: Apache-2.0
#include "surfcap/synth.hpp"

#include "surfcap/error.hpp"
#include "surfcap/rasterizer.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace surfcap {

std::string to_string(SynthKind kind) {
  return kind == SynthKind::GripperSphere ? "gripper-sphere" : "paddle-box";
}

SynthKind synth_kind_from_string(const std::string& name) {
  if (name == "gripper-sphere") return SynthKind::GripperSphere;
  if (name == "paddle-box") return SynthKind::PaddleBox;
  throw Error(ErrorCode::InvalidArgument, "unknown scene kind '" + name + "'");
}

void SynthSpec::validate() const {
  if (frames < 1) throw Error(ErrorCode::InvalidArgument, "synthetic scene needs T >= 1");
  if (views < 2) throw Error(ErrorCode::InvalidArgument, "synthetic scene needs N >= 2 views");
  if (width < 8 || height < 8) throw Error(ErrorCode::InvalidArgument, "image too small");
  if (!(tau > 0.0) || !(noise >= 0.0) || !(edge_length > 0.0) || !(gt_spacing > 0.0))
    throw Error(ErrorCode::InvalidArgument, "tau, noise, edge_length and gt_spacing must be positive");
  if (object_points < 4) throw Error(ErrorCode::InvalidArgument, "object needs >= 4 seed points");
}

double sphere_distance(const Vec3& p, const Vec3& center, double radius) {
  return std::max((p - center).norm() - radius, 0.0);
}

double box_distance(const Vec3& p, const Vec3& center, const Vec3& half_extent) {
  const Vec3 q = ((p - center).cwiseAbs() - half_extent).cwiseMax(0.0);
  return q.norm();
}

namespace {

constexpr double kPi = std::numbers::pi;

// Template mesh made of boxes ("links"), each with its own rigid pose per frame.
struct LinkMesh {
  std::vector<Vec3> local;        // link-frame vertex positions
  std::vector<Vec3> normal;       // outward normal of the owning face
  std::vector<double> bulge;      // bump weight in [0, 1]
  std::vector<Vec3> tint;         // base color
  std::vector<Face> faces;        // link-local indices
};

// Grid-subdivided box with outward-facing triangles. Face `bulge_face`
// (0..5 = -x,+x,-y,+y,-z,+z) gets a sin*sin bump weight vanishing on its rim.
LinkMesh box_mesh(const Vec3& lo, const Vec3& hi, double edge, int bulge_face,
                  const std::function<Vec3(const Vec3&)>& color) {
  LinkMesh m;
  for (int f = 0; f < 6; ++f) {
    const int axis = f / 2;
    const bool positive = f % 2 == 1;
    Vec3 n = Vec3::Zero();
    n[axis] = positive ? 1.0 : -1.0;
    // (u, v) spans the face with u x v = n.
    int ua = (axis + 1) % 3, va = (axis + 2) % 3;
    if (!positive) std::swap(ua, va);
    const double lu = hi[ua] - lo[ua], lv = hi[va] - lo[va];
    const int nu = std::max(1, static_cast<int>(std::ceil(lu / edge - 1e-9)));
    const int nv = std::max(1, static_cast<int>(std::ceil(lv / edge - 1e-9)));
    const auto base = static_cast<std::uint32_t>(m.local.size());
    for (int j = 0; j <= nv; ++j)
      for (int i = 0; i <= nu; ++i) {
        Vec3 p;
        p[axis] = positive ? hi[axis] : lo[axis];
        const double a = static_cast<double>(i) / nu, b = static_cast<double>(j) / nv;
        p[ua] = lo[ua] + a * lu;
        p[va] = lo[va] + b * lv;
        m.local.push_back(p);
        m.normal.push_back(n);
        m.bulge.push_back(f == bulge_face ? std::sin(kPi * a) * std::sin(kPi * b) : 0.0);
        m.tint.push_back(color(p));
      }
    auto id = [&](int i, int j) { return base + static_cast<std::uint32_t>(j * (nu + 1) + i); };
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nu; ++i) {
        m.faces.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1)});
        m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i, j + 1)});
      }
  }
  return m;
}

struct Link {
  LinkMesh mesh;
  std::vector<RigidTransform> pose;  // per frame
};

struct SceneGeometry {
  std::vector<Link> links;
  Vec3 target = Vec3::Zero();
  std::function<double(const Vec3&)> object_distance;
  std::vector<Vec3> object_points, object_normals;  // dense GT covering
  std::vector<Vec3> seed_points;
  std::function<Vec3(const Vec3&)> object_color;
};

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

std::vector<Vec3> fibonacci_sphere(std::size_t n) {
  std::vector<Vec3> pts;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * static_cast<double>(i);
    pts.emplace_back(r * std::cos(phi), y, r * std::sin(phi));
  }
  return pts;
}

// Points on a grid over the faces of an axis-aligned box, with normals.
void box_surface(const Vec3& center, const Vec3& half, double spacing, std::vector<Vec3>& pts,
                 std::vector<Vec3>& normals) {
  for (int f = 0; f < 6; ++f) {
    const int axis = f / 2;
    const double sign = f % 2 ? 1.0 : -1.0;
    const int ua = (axis + 1) % 3, va = (axis + 2) % 3;
    const int nu = std::max(1, static_cast<int>(std::round(2 * half[ua] / spacing)));
    const int nv = std::max(1, static_cast<int>(std::round(2 * half[va] / spacing)));
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nu; ++i) {
        Vec3 p = center;
        p[axis] += sign * half[axis];
        p[ua] += -half[ua] + (i + 0.5) * 2 * half[ua] / nu;
        p[va] += -half[va] + (j + 0.5) * 2 * half[va] / nv;
        Vec3 n = Vec3::Zero();
        n[axis] = sign;
        pts.push_back(p);
        normals.push_back(n);
      }
  }
}

Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

Vec3 skin(const Vec3& p, double length) {
  const double k = 0.85 + 0.15 * std::clamp(std::abs(p.y()) / length, 0.0, 1.0);
  return Vec3(0.86, 0.64, 0.52) * k;
}

SceneGeometry gripper_sphere(const SynthSpec& spec, const Vec3& phase) {
  SceneGeometry g;
  const double r = 0.02, H = 0.05, L = 0.06, W = 0.012, w = 0.004;
  const double open_gap = 0.012, penetration = 0.001;
  const double sin_open = (r + 0.5 * w + open_gap) / H;
  const double sin_end = (r + 0.5 * w - penetration) / H;
  const double th_open = std::asin(sin_open), th_end = std::asin(sin_end);
  const Vec3 hinge(0.0, H, 0.0);
  g.target = Vec3(0.0, 0.015, 0.0);
  for (int s : {1, -1}) {
    // Inner pad is local -z for s = +1 and +z for s = -1; bulge the outer one.
    const int outer = s > 0 ? 5 : 4;
    Link link;
    link.mesh = box_mesh(Vec3(-0.5 * W, -L, -0.5 * w), Vec3(0.5 * W, 0.0, 0.5 * w),
                         spec.edge_length, outer, [&](const Vec3& p) { return skin(p, L); });
    for (std::size_t t = 0; t < spec.frames; ++t) {
      const double a = spec.frames > 1 ? static_cast<double>(t) / (spec.frames - 1) : 1.0;
      const double th = spec.closing ? th_open + (th_end - th_open) * smoothstep(2.0 * a) : th_open;
      link.pose.push_back({rot_x(-s * th), hinge});
    }
    g.links.push_back(std::move(link));
  }
  g.object_distance = [r](const Vec3& p) { return sphere_distance(p, Vec3::Zero(), r); };
  g.object_color = [phase](const Vec3& p) {
    const Vec3 n = p.normalized();
    return Vec3(0.25 + 0.5 * (0.5 + 0.5 * std::sin(4.0 * n.x() + phase[0])),
                0.30 + 0.4 * (0.5 + 0.5 * std::sin(4.0 * n.y() + phase[1])),
                0.35 + 0.4 * (0.5 + 0.5 * std::sin(4.0 * n.z() + phase[2])));
  };
  const auto dense = static_cast<std::size_t>(
      std::ceil(4.0 * kPi * r * r / (spec.gt_spacing * spec.gt_spacing)));
  for (const Vec3& n : fibonacci_sphere(dense)) {
    g.object_points.push_back(r * n);
    g.object_normals.push_back(n);
  }
  for (const Vec3& n : fibonacci_sphere(spec.object_points)) g.seed_points.push_back(r * n);
  return g;
}

SceneGeometry paddle_box(const SynthSpec& spec, const Vec3& phase) {
  SceneGeometry g;
  const Vec3 half(0.02, 0.015, 0.02);
  const double top = half.y();
  const double Lp = 0.05, Wp = 0.03, w = 0.004, penetration = 0.0005;
  const Vec3 hinge(-0.03, top + w - penetration, 0.0);
  const double open = 45.0 * kPi / 180.0;
  g.target = Vec3(0.0, 0.01, 0.0);

  Link arm;
  arm.mesh = box_mesh(Vec3(-0.006, 0.0, -0.006), Vec3(0.0, 0.04, 0.006), spec.edge_length, -1,
                      [](const Vec3& p) { return skin(p, 0.04); });
  arm.pose.assign(spec.frames, RigidTransform{Mat3::Identity(), hinge});
  g.links.push_back(std::move(arm));

  Link paddle;
  paddle.mesh = box_mesh(Vec3(0.0, -w, -0.5 * Wp), Vec3(Lp, 0.0, 0.5 * Wp), spec.edge_length, 3,
                         [&](const Vec3& p) { return skin(Vec3(0, p.x(), 0), Lp); });
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const double a = spec.frames > 1 ? static_cast<double>(t) / (spec.frames - 1) : 1.0;
    const double phi = spec.closing ? open * (1.0 - smoothstep(2.0 * a)) : open;
    paddle.pose.push_back({rot_z(phi), hinge});
  }
  g.links.push_back(std::move(paddle));

  g.object_distance = [half](const Vec3& p) { return box_distance(p, Vec3::Zero(), half); };
  g.object_color = [phase](const Vec3& p) {
    return Vec3(0.30 + 0.4 * (0.5 + 0.5 * std::sin(60.0 * p.x() + phase[0])),
                0.35 + 0.3 * (0.5 + 0.5 * std::sin(60.0 * p.y() + phase[1])),
                0.25 + 0.5 * (0.5 + 0.5 * std::sin(60.0 * p.z() + phase[2])));
  };
  box_surface(Vec3::Zero(), half, spec.gt_spacing, g.object_points, g.object_normals);
  // Seed density chosen so the point count lands near object_points.
  const double area = 8.0 * (half.x() * half.y() + half.y() * half.z() + half.x() * half.z());
  std::vector<Vec3> unused;
  box_surface(Vec3::Zero(), half, std::sqrt(area / spec.object_points), g.seed_points, unused);
  return g;
}

Surfel2D oriented_surfel(const Vec3& p, const Vec3& n, double sigma, const Vec3& rgb) {
  Vec3 a = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 e = (a - n * n.dot(a)).normalized();
  Mat3 R;
  R.col(0) = e;
  R.col(1) = n.cross(e);
  R.col(2) = n;
  Surfel2D s;
  s.position = p;
  s.rotation = Quaternion::from_matrix(R);
  s.log_scale = Vec2::Constant(std::log(sigma));
  s.opacity_logit = logit(0.99);
  s.sh = {rgb_to_sh0(rgb[0]), rgb_to_sh0(rgb[1]), rgb_to_sh0(rgb[2])};
  return s;
}

// Covers every triangle with n^2 sub-triangle centroids.
void cover_triangles(const std::vector<Vec3>& verts, const std::vector<Face>& faces,
                     const std::vector<Vec3>& tint, double spacing, std::vector<Surfel2D>& out) {
  for (const Face& f : faces) {
    const Vec3 &a = verts[f[0]], &b = verts[f[1]], &c = verts[f[2]];
    const Vec3 cr = (b - a).cross(c - a);
    if (cr.norm() < 1e-14) continue;
    const Vec3 n = cr.normalized();
    const double longest = std::max({(b - a).norm(), (c - b).norm(), (a - c).norm()});
    const int k = std::max(1, static_cast<int>(std::ceil(longest / spacing)));
    const double sigma = 0.6 * longest / k;
    const Vec3 color = (tint[f[0]] + tint[f[1]] + tint[f[2]]) / 3.0;
    const Vec3 du = (b - a) / k, dv = (c - a) / k;
    for (int i = 0; i < k; ++i)
      for (int j = 0; i + j < k; ++j) {
        out.push_back(oriented_surfel(a + (i + 1.0 / 3) * du + (j + 1.0 / 3) * dv, n, sigma, color));
        if (i + j + 1 < k)
          out.push_back(oriented_surfel(a + (i + 2.0 / 3) * du + (j + 2.0 / 3) * dv, n, sigma, color));
      }
  }
}

// Values as they come back from the 32-bit on-disk formats.
Vec3 quantize_float(const Vec3& v) {
  return {static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
}

}  // namespace

SynthResult generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double ring_offset = u01(rng) * 2.0 * kPi / static_cast<double>(spec.views);
  const Vec3 phase(2 * kPi * u01(rng), 2 * kPi * u01(rng), 2 * kPi * u01(rng));

  const SceneGeometry geo =
      spec.kind == SynthKind::GripperSphere ? gripper_sphere(spec, phase) : paddle_box(spec, phase);

  SynthResult res;
  SceneBundle& b = res.bundle;
  b.frame_count = spec.frames;
  b.meta.tau = spec.tau;

  // One template mesh joining all links.
  TemplateSequence tmpl;
  tmpl.side = SourceKind::HandRight;
  std::vector<std::size_t> link_of_vertex;
  std::vector<Vec3> tint;
  for (std::size_t l = 0; l < geo.links.size(); ++l) {
    const LinkMesh& m = geo.links[l].mesh;
    const auto base = static_cast<std::uint32_t>(link_of_vertex.size());
    for (const Face& f : m.faces) tmpl.topology.faces.push_back({base + f[0], base + f[1], base + f[2]});
    link_of_vertex.insert(link_of_vertex.end(), m.local.size(), l);
    tint.insert(tint.end(), m.tint.begin(), m.tint.end());
  }
  const std::size_t nv = link_of_vertex.size();
  tmpl.topology.vertex_count = nv;

  std::vector<std::vector<Vec3>> true_vertices(spec.frames);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    TemplateFrame frame;
    frame.t = t;
    frame.provenance = "synthetic " + to_string(spec.kind) + " frame " + std::to_string(t);
    const double a = spec.frames > 1 ? static_cast<double>(t) / (spec.frames - 1) : 0.0;
    const double bump = spec.bulge ? spec.bulge_amplitude * std::sin(kPi * a) : 0.0;
    for (std::size_t l = 0; l < geo.links.size(); ++l) {
      const LinkMesh& m = geo.links[l].mesh;
      const RigidTransform& pose = geo.links[l].pose[t];
      for (std::size_t i = 0; i < m.local.size(); ++i) {
        const Vec3 p = pose.apply(m.local[i]);
        frame.vertices.push_back(quantize_float(p));
        true_vertices[t].push_back(pose.apply(m.local[i] + bump * m.bulge[i] * m.normal[i]));
      }
    }
    tmpl.frames.push_back(std::move(frame));
  }
  b.hand_names = {"right"};
  b.hands = {tmpl};

  // Analytic contact truth on the true surface.
  SynthGroundTruth& gt = res.truth;
  gt.tau = spec.tau;
  gt.vertex_contact.assign(1, std::vector<char>(nv, 0));
  gt.vertex_min_distance.assign(1, std::vector<double>(nv, std::numeric_limits<double>::infinity()));
  gt.distance.assign(1, {});
  for (std::size_t t = 0; t < spec.frames; ++t) {
    std::vector<double> d(nv);
    for (std::size_t i = 0; i < nv; ++i) {
      d[i] = geo.object_distance(true_vertices[t][i]);
      gt.vertex_min_distance[0][i] = std::min(gt.vertex_min_distance[0][i], d[i]);
      if (d[i] < spec.tau) gt.vertex_contact[0][i] = 1;
    }
    gt.distance[0].push_back(std::move(d));
  }

  // Object seed.
  ObjectSeed seed;
  for (const Vec3& p : geo.seed_points) {
    seed.points.push_back(quantize_float(p));
    seed.colors.push_back(
        geo.object_color(p).unaryExpr([](double v) { return std::round(v * 255.0) / 255.0; }));
  }
  b.objects = {seed};

  // Cameras on a ring around the vertical axis.
  const double dist = 0.3, elevation = 25.0 * kPi / 180.0;
  const double f = 150.0 * spec.width / 64.0;
  for (std::size_t v = 0; v < spec.views; ++v) {
    const double az = ring_offset + 2.0 * kPi * v / static_cast<double>(spec.views);
    const Vec3 eye = geo.target + dist * Vec3(std::cos(elevation) * std::cos(az), std::sin(elevation),
                                              std::cos(elevation) * std::sin(az));
    Camera cam = look_at_camera(eye, geo.target, Vec3::UnitY(), spec.width, spec.height, f, f);
    b.cameras.push_back(cam);
    b.view_names.push_back("cam" + std::to_string(v));
  }

  // Dense ground-truth covering: static object plus the true hand surface.
  std::vector<Surfel2D> object_cover;
  for (std::size_t i = 0; i < geo.object_points.size(); ++i)
    object_cover.push_back(oriented_surfel(geo.object_points[i], geo.object_normals[i],
                                           0.6 * spec.gt_spacing, geo.object_color(geo.object_points[i])));
  RenderSettings rs;
  b.images.assign(spec.views, {});
  b.masks.assign(spec.views, {});
  for (std::size_t t = 0; t < spec.frames; ++t) {
    std::vector<Surfel2D> cover = object_cover;
    cover_triangles(true_vertices[t], tmpl.topology.faces, tint, spec.gt_spacing, cover);
    for (std::size_t v = 0; v < spec.views; ++v) {
      const RenderOutput out = render(cover, b.cameras[v], rs);
      Image img = out.color;
      if (spec.noise > 0.0) {
        std::seed_seq ss{static_cast<std::uint64_t>(spec.seed), static_cast<std::uint64_t>(v),
                         static_cast<std::uint64_t>(t)};
        std::mt19937_64 noise_rng(ss);
        std::normal_distribution<double> n(0.0, spec.noise);
        for (double& x : img.data) x += n(noise_rng);
      }
      for (double& x : img.data) x = std::round(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0;
      Image mask(spec.width, spec.height, 1);
      for (std::size_t i = 0; i < mask.data.size(); ++i) mask.data[i] = out.alpha.data[i] > 0.5 ? 1.0 : 0.0;
      b.images[v].push_back(std::move(img));
      b.masks[v].push_back(std::move(mask));
    }
  }
  b.validate();
  return res;
}

void write_ground_truth(const std::filesystem::path& path, const SynthGroundTruth& truth,
                        const std::vector<std::string>& hand_names) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["tau"] = truth.tau;
  j["units"] = "meters";
  j["hands"] = nlohmann::json::array();
  for (std::size_t h = 0; h < truth.vertex_contact.size(); ++h) {
    std::vector<int> labels(truth.vertex_contact[h].begin(), truth.vertex_contact[h].end());
    j["hands"].push_back({{"name", h < hand_names.size() ? hand_names[h] : std::to_string(h)},
                          {"vertex_labels", labels},
                          {"vertex_min_distance", truth.vertex_min_distance[h]}});
  }
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  os << j.dump(1) << '\n';
}

std::vector<std::vector<char>> read_vertex_labels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::MissingFile, "missing label file " + path.string());
  std::vector<std::vector<char>> out;
  try {
    const auto j = nlohmann::json::parse(is);
    for (const auto& h : j.at("hands")) {
      std::vector<char> labels;
      for (const auto& v : h.at("vertex_labels")) labels.push_back(v.get<int>() != 0);
      out.push_back(std::move(labels));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace surfcap
